"""Multi-domain objective and the alternating cycle-GAN training loop.

Domain X holds measured chest chunks, domain Y finger chunks. Each
generator minimizes its own branch total (least-squares adversarial term,
cycle term of the cycle that ends in its target domain, identity term);
the discriminators then update on detached fakes.
"""
from __future__ import annotations

import io
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .core import ChunkPair, Dataset, standardize
from .evaluation import align, signal_metrics, write_csv
from .stargan import (
    CheckpointError,
    ModelConfig,
    StarGAN,
    _pack,
    _unpack,
    build_models,
    restore,
)
from .synth import augment_training_chunk


class DivergenceError(RuntimeError):
    """A loss became non-finite during training."""


@dataclass(frozen=True)
class LossWeights:
    adv: float = 1.0
    cycle: float = 10.0
    identity: float = 5.0

    def __post_init__(self):
        if min(self.adv, self.cycle, self.identity) < 0:
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def parse(cls, text: str) -> "LossWeights":
        """``"1,10,5"`` -> adversarial, cycle and identity weights."""
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 3:
            raise ValueError(f"expected three comma-separated weights, got {text!r}")
        return cls(*parts)


# -- loss terms ------------------------------------------------------------------


def _nonempty(t: torch.Tensor) -> torch.Tensor:
    if t.numel() == 0:
        raise ValueError("empty batch")
    return t


def lsgan_generator(scores: torch.Tensor) -> torch.Tensor:
    """MSE between 1 and the discriminator scores of generated samples."""
    return torch.mean((1.0 - _nonempty(scores)) ** 2)


def lsgan_discriminator(fake_scores: torch.Tensor, real_scores: torch.Tensor) -> torch.Tensor:
    """MSE(0, D(fake)) + MSE(1, D(real))."""
    return torch.mean(_nonempty(fake_scores) ** 2) + torch.mean((1.0 - _nonempty(real_scores)) ** 2)


def adv_loss_g(d, fake: torch.Tensor) -> torch.Tensor:
    return lsgan_generator(d(fake))


def adv_loss_d(d, fake: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
    return lsgan_discriminator(d(fake), d(real))


def _mad(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.mean(torch.abs(a - b))


def cycle_loss(g_xy, g_yx, x: torch.Tensor, y: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean absolute cycle error for X -> Y -> X and Y -> X -> Y."""
    return _mad(g_yx(g_xy(x)), x), _mad(g_xy(g_yx(y)), y)


def identity_loss(g, z: torch.Tensor) -> torch.Tensor:
    """Mean absolute change a generator makes to a sample already in its target domain."""
    return _mad(g(z), z)


def total_loss(adv, cycle, identity, w: LossWeights = LossWeights()):
    return w.adv * adv + w.cycle * cycle + w.identity * identity


@dataclass
class LossTerms:
    """All eight scalar terms computed on one batch."""

    adv_g_y: torch.Tensor
    adv_g_x: torch.Tensor
    cycle_x: torch.Tensor
    cycle_y: torch.Tensor
    id_y: torch.Tensor
    id_x: torch.Tensor
    adv_d_y: torch.Tensor
    adv_d_x: torch.Tensor

    def totals(self, w: LossWeights = LossWeights()) -> tuple[torch.Tensor, torch.Tensor]:
        """(L_total_Y for the restoring generator, L_total_X for the noising one)."""
        return (
            total_loss(self.adv_g_y, self.cycle_y, self.id_y, w),
            total_loss(self.adv_g_x, self.cycle_x, self.id_x, w),
        )

    def as_floats(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in vars(self).items()}


def loss_terms(model: StarGAN, x: torch.Tensor, y: torch.Tensor, detach_fakes_for_d: bool = True) -> LossTerms:
    """Evaluate every loss term; fakes are shared between generator and discriminator terms."""
    fake_y = model.g_xy(x)
    fake_x = model.g_yx(y)
    cyc_x = _mad(model.g_yx(fake_y), x)
    cyc_y = _mad(model.g_xy(fake_x), y)
    fy_d = fake_y.detach() if detach_fakes_for_d else fake_y
    fx_d = fake_x.detach() if detach_fakes_for_d else fake_x
    return LossTerms(
        adv_g_y=adv_loss_g(model.d_y, fake_y),
        adv_g_x=adv_loss_g(model.d_x, fake_x),
        cycle_x=cyc_x,
        cycle_y=cyc_y,
        id_y=identity_loss(model.g_xy, y),
        id_x=identity_loss(model.g_yx, x),
        adv_d_y=adv_loss_d(model.d_y, fy_d, y),
        adv_d_x=adv_loss_d(model.d_x, fx_d, x),
    )


# -- optimisation ----------------------------------------------------------------


@dataclass
class TrainOptions:
    """Loop settings. ``epochs`` is an upper bound; early stopping usually ends sooner."""

    epochs: int = 30
    batch: int = 4
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    patience: int = 10
    augment_sd: float = 50.0
    seed: int = 0
    channels: tuple[int, ...] = (0, 1, 2)
    weights: LossWeights = field(default_factory=LossWeights)
    max_steps_per_epoch: int | None = None

    def to_json(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "TrainOptions":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


def make_optimizers(model: StarGAN, opts: TrainOptions) -> dict[str, torch.optim.Adam]:
    return {
        n: torch.optim.Adam(net.parameters(), lr=opts.lr, betas=(opts.beta1, opts.beta2))
        for n, net in model.networks().items()
    }


def _check_finite(values: Mapping[str, float]) -> None:
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        raise DivergenceError(f"non-finite loss terms: {', '.join(bad)}")


def train_step(model: StarGAN, optims: Mapping[str, torch.optim.Optimizer], x: torch.Tensor, y: torch.Tensor,
               w: LossWeights = LossWeights()) -> dict[str, float]:
    """One alternating update: both generators first, then both discriminators."""
    model.train()
    terms = loss_terms(model, x, y)
    total_y, total_x = terms.totals(w)
    values = terms.as_floats()
    values.update(total_y=float(total_y.detach()), total_x=float(total_x.detach()))
    _check_finite(values)

    gxy = list(model.g_xy.parameters())
    gyx = list(model.g_yx.parameters())
    grads_xy = torch.autograd.grad(total_y, gxy, retain_graph=True)
    grads_yx = torch.autograd.grad(total_x, gyx, retain_graph=True)
    dy = list(model.d_y.parameters())
    dx = list(model.d_x.parameters())
    grads_dy = torch.autograd.grad(terms.adv_d_y, dy, retain_graph=True)
    grads_dx = torch.autograd.grad(terms.adv_d_x, dx)
    for name, params, grads in (("g_xy", gxy, grads_xy), ("g_yx", gyx, grads_yx)):
        for p, g in zip(params, grads):
            p.grad = g
        optims[name].step()
    # discriminator terms were built on detached fakes at the pre-update weights
    for name, params, grads in (("d_y", dy, grads_dy), ("d_x", dx, grads_dx)):
        for p, g in zip(params, grads):
            p.grad = g
        optims[name].step()
    return values


# -- data ------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TrainingData:
    """Standardized arrays, shape (N, C, L): chest (X) and finger (Y)."""

    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.x)


def pair_arrays(pairs: Sequence[ChunkPair], channels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Standardized (chest, finger) arrays for the chosen channels."""
    ch = list(channels)
    x = np.stack([standardize(p.chest.data[ch].astype(np.float64)) for p in pairs]).astype(np.float32)
    y = np.stack([standardize(p.finger.data[ch].astype(np.float64)) for p in pairs]).astype(np.float32)
    return x, y


def training_data(pairs: Sequence[ChunkPair], channels: Sequence[int] = (0, 1, 2), augment_sd: float = 50.0,
                  seed: int = 0) -> TrainingData:
    """Originals plus one noise-augmented copy of every chest chunk (raw scale, before standardizing).

    The finger partner of an augmented chunk is its original finger chunk, so
    the count doubles on both sides.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no training pairs")
    x, y = pair_arrays(pairs, channels)
    if augment_sd > 0:
        seeds = np.random.SeedSequence([seed, 0xA06]).spawn(len(pairs))
        noisy = [augment_training_chunk(p.chest, augment_sd, s) for p, s in zip(pairs, seeds)]
        xa = np.stack([standardize(c.data[list(channels)].astype(np.float64)) for c in noisy]).astype(np.float32)
        x, y = np.concatenate([x, xa]), np.concatenate([y, y])
    return TrainingData(x, y)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Batch order for one epoch; depends only on the seed and the epoch number."""
    return np.random.default_rng([seed, epoch]).permutation(n)


# -- validation ------------------------------------------------------------------


def validation_rmse(g_xy, pairs: Sequence[ChunkPair], channels: Sequence[int], max_lag: int = 800) -> list[float]:
    """Per-channel median RMSE_t of restored against finger after lag alignment."""
    x, y = pair_arrays(pairs, channels)
    r = restore(g_xy, x)
    ref = list(channels).index(2) if 2 in channels else 0
    per = [[] for _ in channels]
    for xi, yi, ri in zip(x, y, r):
        al = align(ri, xi, yi, max_lag=max_lag, ref_channel=ref)
        f, rr = standardize(al.fppg), standardize(al.restored)
        for k in range(len(channels)):
            per[k].append(signal_metrics(f[k], rr[k])["RMSE_t"])
    return [float(np.median(v)) for v in per]


# -- state -----------------------------------------------------------------------


@dataclass
class TrainState:
    """Everything needed to continue training exactly where it stopped."""

    model: StarGAN
    optims: dict[str, torch.optim.Optimizer]
    opts: TrainOptions
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    best_score: float = math.inf
    best_epoch: int = -1
    bad_epochs: int = 0
    best_weights: dict[str, torch.Tensor] | None = None

    @property
    def stopped(self) -> bool:
        return self.bad_epochs >= self.opts.patience or self.epoch >= self.opts.epochs

    def best_model(self) -> StarGAN:
        """Copy of the model at the best validation epoch (the current one if none yet)."""
        m = build_models(self.model.cfg, 0, self.model.channels)
        m.load_state_dict(self.best_weights if self.best_weights is not None else self.model.state_dict())
        return m


def new_state(cfg: ModelConfig, opts: TrainOptions) -> TrainState:
    model = build_models(cfg, opts.seed, len(opts.channels))
    return TrainState(model, make_optimizers(model, opts), opts)


def _optim_tensors(optims: Mapping[str, torch.optim.Optimizer]) -> dict[str, torch.Tensor]:
    out = {}
    for name, opt in optims.items():
        for i, st in opt.state_dict()["state"].items():
            for k, v in st.items():
                out[f"opt.{name}.{i}.{k}"] = v if torch.is_tensor(v) else torch.tensor(v)
    return out


def save_state(state: TrainState, path: Path | str) -> Path:
    meta = {
        "kind": "train_state",
        "config": state.model.cfg.to_json(),
        "channels": state.model.channels,
        "opts": state.opts.to_json(),
        "epoch": state.epoch,
        "history": [{k: v for k, v in h.items() if k != "seconds"} for h in state.history],
        "best_score": state.best_score if math.isfinite(state.best_score) else None,
        "best_epoch": state.best_epoch,
        "bad_epochs": state.bad_epochs,
    }
    tensors = {f"model.{k}": v for k, v in state.model.state_dict().items()}
    if state.best_weights is not None:
        tensors.update({f"best.{k}": v for k, v in state.best_weights.items()})
    tensors.update(_optim_tensors(state.optims))
    buf = io.BytesIO()
    _pack(buf, meta, tensors)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def load_state(path: Path | str) -> TrainState:
    meta, tensors = _unpack(Path(path).read_bytes(), path)
    if meta.get("kind") != "train_state":
        raise CheckpointError(f"{path}: not a training state")
    cfg = ModelConfig.from_json(meta["config"])
    opts = TrainOptions.from_json(meta["opts"])
    model = build_models(cfg, 0, meta["channels"])
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    best = {k[5:]: v for k, v in tensors.items() if k.startswith("best.")} or None
    optims = make_optimizers(model, opts)
    for name, opt in optims.items():
        sd = opt.state_dict()
        prefix = f"opt.{name}."
        state: dict[int, dict] = {}
        for k, v in tensors.items():
            if k.startswith(prefix):
                i, key = k[len(prefix) :].split(".", 1)
                state.setdefault(int(i), {})[key] = v
        sd["state"] = state
        opt.load_state_dict(sd)
    bs = meta["best_score"]
    return TrainState(model, optims, opts, meta["epoch"], meta["history"],
                      math.inf if bs is None else bs, meta["best_epoch"], meta["bad_epochs"], best)


# -- loop ------------------------------------------------------------------------


def run_epoch(state: TrainState, data: TrainingData) -> dict[str, float]:
    """One pass over the training data in the epoch's fixed order; returns mean loss terms."""
    opts = state.opts
    order = epoch_order(len(data), opts.seed, state.epoch)
    n_batches = len(order) // opts.batch
    if opts.max_steps_per_epoch is not None:
        n_batches = min(n_batches, opts.max_steps_per_epoch)
    if n_batches == 0:
        raise ValueError(f"{len(order)} training chunks cannot fill a batch of {opts.batch}")
    dtype = next(state.model.g_xy.parameters()).dtype
    sums: dict[str, float] = {}
    for b in range(n_batches):
        idx = order[b * opts.batch : (b + 1) * opts.batch]
        x = torch.as_tensor(data.x[idx], dtype=dtype)
        y = torch.as_tensor(data.y[idx], dtype=dtype)
        vals = train_step(state.model, state.optims, x, y, opts.weights)
        for k, v in vals.items():
            sums[k] = sums.get(k, 0.0) + v
    return {k: v / n_batches for k, v in sums.items()}


def train(
    train_pairs: Sequence[ChunkPair] | Dataset,
    cfg: ModelConfig,
    opts: TrainOptions = TrainOptions(),
    validation_pairs: Sequence[ChunkPair] | None = None,
    state: TrainState | None = None,
    state_path: Path | str | None = None,
    history_path: Path | str | None = None,
    log: Callable[[str], None] | None = None,
) -> TrainState:
    """Train until ``opts.epochs`` or until validation RMSE_t stops improving.

    ``train_pairs`` may be a :class:`Dataset`, in which case its ``train`` and
    ``validation`` splits are used. Pass ``state`` (e.g. from
    :func:`load_state`) to resume. The best-validation weights are kept on
    the returned state.
    """
    if isinstance(train_pairs, Dataset):
        validation_pairs = train_pairs["validation"] if validation_pairs is None else validation_pairs
        train_pairs = train_pairs["train"]
    if not train_pairs or not validation_pairs:
        raise ValueError("training needs non-empty train and validation splits")
    if state is None:
        state = new_state(cfg, opts)
    opts = state.opts
    data = training_data(train_pairs, opts.channels, opts.augment_sd, opts.seed)
    while not state.stopped:
        t0 = time.perf_counter()
        losses = run_epoch(state, data)
        val = validation_rmse(state.model.g_xy, validation_pairs, opts.channels)
        score = float(np.mean(val))
        state.epoch += 1
        if score < state.best_score:
            state.best_score, state.best_epoch, state.bad_epochs = score, state.epoch, 0
            state.best_weights = {k: v.clone() for k, v in state.model.state_dict().items()}
        else:
            state.bad_epochs += 1
        row = {"epoch": state.epoch, **losses}
        row.update({f"val_RMSE_t_{c}": v for c, v in zip(opts.channels, val)})
        row["val_RMSE_t"] = score
        row["seconds"] = time.perf_counter() - t0
        state.history.append(row)
        if log:
            log(f"epoch {state.epoch}: total_Y {losses['total_y']:.4f} total_X {losses['total_x']:.4f} "
                f"val RMSE_t {score:.4f} ({row['seconds']:.1f}s)")
        if history_path is not None:
            write_history(state.history, history_path)
        if state_path is not None:
            save_state(state, state_path)
    return state


def write_history(history: Sequence[Mapping], path: Path | str) -> None:
    """Per-epoch CSV; wall-clock time is left out so reruns are byte-identical."""
    write_csv(Path(path), [{k: v for k, v in h.items() if k != "seconds"} for h in history])


def restore_pairs(g_xy, pairs: Sequence[ChunkPair], channels: Sequence[int] = (0, 1, 2)) -> list[np.ndarray]:
    """Restored, standardized chest arrays of shape (len(channels), L), one per pair."""
    if not pairs:
        return []
    x, _ = pair_arrays(pairs, channels)
    return list(restore(g_xy, x))
