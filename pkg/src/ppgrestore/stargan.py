"""UNet generators and convolutional discriminators of the cycle-consistent GAN.

The eleven ablation configurations ``m01``..``m11`` are available through
:data:`CONFIGS`. A generator maps a (batch, channels, length) standardized
chunk to a tensor of the same shape; a discriminator maps it to one score in
(0, 1) per chunk.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch
from torch import nn

from ._gru import gru_sequence

INCEPTION_MODES = ("none", "first", "all")
INCEPTION_KERNELS = (3, 9, 15)
G_KERNELS = {"fixed": (9, 9, 9), "var": (9, 5, 5)}
D_KERNELS = {"fixed": (7, 7, 7, 7, 7), "var": (9, 7, 5, 3, 1)}
LSTM_HIDDEN = 16
NORM_EPS = 1e-5


class ConfigError(ValueError):
    """Invalid model configuration."""


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def _power_of_two(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@dataclass(frozen=True)
class ModelConfig:
    """One row of the ablation grid.

    Attributes
    ----------
    g_init, d_init : int
        Feature maps of the first generator / discriminator block.
    inception : {"none", "first", "all"}
        Where inception blocks replace plain conv blocks.
    g_kernel, d_kernel : {"fixed", "var"}
        Kernel schedule, see :data:`G_KERNELS` and :data:`D_KERNELS`.
    gru, lstm : bool
        GRU layers in the skip connections; BiLSTM before the output conv.
    instance_norm : bool
        Turning normalization off makes every output sample depend on a
        bounded input window only; used for receptive-field checks.
    """

    name: str = "custom"
    g_init: int = 16
    d_init: int = 8
    inception: str = "first"
    g_kernel: str = "fixed"
    d_kernel: str = "fixed"
    gru: bool = False
    lstm: bool = False
    instance_norm: bool = True

    def __post_init__(self):
        if not (_power_of_two(self.g_init) and _power_of_two(self.d_init)):
            raise ConfigError("filter counts must be powers of two")
        if self.inception not in INCEPTION_MODES:
            raise ConfigError(f"inception must be one of {INCEPTION_MODES}")
        if self.g_kernel not in G_KERNELS or self.d_kernel not in D_KERNELS:
            raise ConfigError("kernel schedule must be 'fixed' or 'var'")

    @property
    def g_kernels(self) -> tuple[int, ...]:
        return G_KERNELS[self.g_kernel]

    @property
    def d_kernels(self) -> tuple[int, ...]:
        return D_KERNELS[self.d_kernel]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: Mapping) -> "ModelConfig":
        return cls(**d)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def _row(name, g, d, inc, gk, dk, gru, lstm):
    return ModelConfig(name, g, d, inc, gk, dk, gru, lstm)


CONFIGS: dict[str, ModelConfig] = {
    c.name: c
    for c in (
        _row("m01", 8, 4, "first", "fixed", "fixed", False, False),
        _row("m02", 16, 8, "first", "fixed", "fixed", False, False),
        _row("m03", 32, 16, "first", "fixed", "fixed", False, False),
        _row("m04", 16, 8, "none", "fixed", "fixed", False, False),
        _row("m05", 16, 8, "all", "fixed", "fixed", False, False),
        _row("m06", 16, 8, "first", "var", "var", False, False),
        _row("m07", 16, 8, "first", "var", "fixed", False, False),
        _row("m08", 16, 8, "first", "fixed", "var", False, False),
        _row("m09", 16, 8, "first", "fixed", "fixed", True, False),
        _row("m10", 16, 8, "first", "fixed", "fixed", False, True),
        _row("m11", 16, 8, "first", "fixed", "fixed", True, True),
    )
}


def get_config(name: str, **overrides) -> ModelConfig:
    try:
        cfg = CONFIGS[name]
    except KeyError:
        raise ConfigError(f"unknown configuration {name!r}; choose from {sorted(CONFIGS)}") from None
    return replace(cfg, **overrides) if overrides else cfg


# -- layers ----------------------------------------------------------------------


def _norm(ch: int, enabled: bool) -> nn.Module:
    return nn.InstanceNorm1d(ch, eps=NORM_EPS, affine=True) if enabled else nn.Identity()


class ConvBlock(nn.Module):
    """Conv1d, instance norm and Swish; ``stride=2`` halves the length."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, norm: bool = True):
        super().__init__()
        self.conv = nn.Conv1d(c_in, c_out, kernel, stride=stride, padding=(kernel - 1) // 2)
        self.norm = _norm(c_out, norm)
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class InceptionBlock(nn.Module):
    """Three parallel convs (kernels 3, 9, 15) concatenated and reduced by a width-1 conv."""

    def __init__(self, c_in: int, c_out: int, norm: bool = True):
        super().__init__()
        self.paths = nn.ModuleList(nn.Conv1d(c_in, c_out, k, padding=(k - 1) // 2) for k in INCEPTION_KERNELS)
        self.reduce = nn.Conv1d(len(INCEPTION_KERNELS) * c_out, c_out, 1)
        self.norm = _norm(c_out, norm)
        self.act = nn.SiLU()

    def forward(self, x):
        y = torch.cat([p(x) for p in self.paths], dim=1)
        return self.act(self.norm(self.reduce(y)))


class SkipGRU(nn.Module):
    """Bidirectional single-layer GRU along time whose output replaces the skipped features.

    The forward and time-reversed passes each have hidden size ``channels``
    and are summed, so the skip keeps its width and gains no net delay.
    """

    def __init__(self, channels: int):
        super().__init__()
        h = channels
        for sfx in ("", "_reverse"):
            setattr(self, "weight_ih" + sfx, nn.Parameter(torch.empty(3 * h, channels)))
            setattr(self, "weight_hh" + sfx, nn.Parameter(torch.empty(3 * h, h)))
            setattr(self, "bias_ih" + sfx, nn.Parameter(torch.empty(3 * h)))
            setattr(self, "bias_hh" + sfx, nn.Parameter(torch.empty(3 * h)))

    def forward(self, x):  # (B, C, T)
        seq = x.transpose(1, 2)
        fwd = gru_sequence(seq, self.weight_ih, self.weight_hh, self.bias_ih, self.bias_hh)
        bwd = gru_sequence(seq.flip(1), self.weight_ih_reverse, self.weight_hh_reverse,
                           self.bias_ih_reverse, self.bias_hh_reverse).flip(1)
        return (fwd + bwd).transpose(1, 2)


class OutputBiLSTM(nn.Module):
    def __init__(self, channels: int, hidden: int = LSTM_HIDDEN):
        super().__init__()
        self.lstm = nn.LSTM(channels, hidden, batch_first=True, bidirectional=True)
        self.out_channels = 2 * hidden

    def forward(self, x):
        return self.lstm(x.transpose(1, 2))[0].transpose(1, 2)


# -- networks --------------------------------------------------------------------


class Generator(nn.Module):
    """Three-level 1-D UNet.

    Encoder blocks at ``g``, ``2g`` and ``4g`` feature maps are separated by
    stride-2 convs; a same-width bottleneck block follows. The decoder
    upsamples with transposed convs, concatenates the (optionally GRU
    filtered) skip features and reduces them with a conv block. A linear
    conv maps back to the input channel count.
    """

    def __init__(self, cfg: ModelConfig, channels: int = 3):
        super().__init__()
        self.cfg = cfg
        self.channels = channels
        g, (k1, k2, k3) = cfg.g_init, cfg.g_kernels
        n = cfg.instance_norm

        def block(c_in, c_out, k, level):
            if cfg.inception == "all" or (cfg.inception == "first" and level == "first"):
                return InceptionBlock(c_in, c_out, n)
            return ConvBlock(c_in, c_out, k, norm=n)

        self.enc1 = block(channels, g, k1, "first")
        self.down1 = ConvBlock(g, g, k1, stride=2, norm=n)
        self.enc2 = block(g, 2 * g, k2, "enc2")
        self.down2 = ConvBlock(2 * g, 2 * g, k2, stride=2, norm=n)
        self.enc3 = block(2 * g, 4 * g, k3, "enc3")
        self.bottleneck = block(4 * g, 4 * g, k3, "bottleneck")
        self.up2 = nn.ConvTranspose1d(4 * g, 2 * g, k3, stride=2, padding=(k3 - 1) // 2, output_padding=1)
        self.dec2 = block(4 * g, 2 * g, k2, "dec2")
        self.up1 = nn.ConvTranspose1d(2 * g, g, k2, stride=2, padding=(k2 - 1) // 2, output_padding=1)
        self.dec1 = block(2 * g, g, k1, "dec1")
        self.skip1 = SkipGRU(g) if cfg.gru else nn.Identity()
        self.skip2 = SkipGRU(2 * g) if cfg.gru else nn.Identity()
        self.lstm = OutputBiLSTM(g) if cfg.lstm else None
        self.out = nn.Conv1d(self.lstm.out_channels if self.lstm else g, channels, k1, padding=(k1 - 1) // 2)

    def forward(self, x):
        if x.shape[-1] % 4:
            raise ValueError(f"length {x.shape[-1]} is not divisible by 4")
        e1 = self.enc1(x)
        e2 = self.enc2(self.down1(e1))
        b = self.bottleneck(self.enc3(self.down2(e2)))
        d2 = self.dec2(torch.cat([self.up2(b), self.skip2(e2)], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), self.skip1(e1)], dim=1))
        if self.lstm is not None:
            d1 = self.lstm(d1)
        return self.out(d1)


class Discriminator(nn.Module):
    """Five stride-2 conv blocks ``[d, 2d, 4d, 8d, 4d]``, a conv to one map, time mean and sigmoid."""

    def __init__(self, cfg: ModelConfig, channels: int = 3):
        super().__init__()
        self.cfg = cfg
        d, ks = cfg.d_init, cfg.d_kernels
        widths = (d, 2 * d, 4 * d, 8 * d, 4 * d)
        blocks, c_in = [], channels
        for w, k in zip(widths, ks):
            blocks.append(ConvBlock(c_in, w, k, stride=2, norm=cfg.instance_norm))
            c_in = w
        self.blocks = nn.Sequential(*blocks)
        self.out = nn.Conv1d(c_in, 1, ks[-1], padding=(ks[-1] - 1) // 2)

    def logits(self, x):
        return self.out(self.blocks(x)).mean(dim=(1, 2))

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


@dataclass
class StarGAN:
    """The two generators and two discriminators of one model.

    ``g_xy`` restores chest (X) to finger-like (Y) signals, ``g_yx`` maps
    finger signals back towards the chest domain.
    """

    cfg: ModelConfig
    g_xy: Generator
    g_yx: Generator
    d_x: Discriminator
    d_y: Discriminator
    channels: int = 3

    NAMES = ("g_xy", "g_yx", "d_x", "d_y")

    def networks(self) -> dict[str, nn.Module]:
        return {n: getattr(self, n) for n in self.NAMES}

    def parameters(self):
        for net in self.networks().values():
            yield from net.parameters()

    def state_dict(self) -> dict[str, torch.Tensor]:
        return {f"{n}.{k}": v for n, net in self.networks().items() for k, v in net.state_dict().items()}

    def load_state_dict(self, state: Mapping[str, torch.Tensor]) -> None:
        for n, net in self.networks().items():
            sub = {k[len(n) + 1 :]: v for k, v in state.items() if k.startswith(n + ".")}
            net.load_state_dict(sub, strict=True)

    def train(self, mode: bool = True) -> "StarGAN":
        for net in self.networks().values():
            net.train(mode)
        return self

    def eval(self) -> "StarGAN":
        return self.train(False)

    def to(self, dtype: torch.dtype) -> "StarGAN":
        for net in self.networks().values():
            net.to(dtype)
        return self


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """Fan-in scaled uniform init, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``; norms start at identity."""
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.ConvTranspose1d)):
            # same fan convention as torch: dim 1 times kernel width for both kinds
            fan_in = m.weight.shape[1] * m.weight.shape[2]
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                m.bias.uniform_(-bound, bound, generator=generator)
        elif isinstance(m, nn.InstanceNorm1d) and m.affine:
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
        elif isinstance(m, (SkipGRU, nn.LSTM)):
            bound = 1.0 / math.sqrt(m.weight_hh.shape[1] if isinstance(m, SkipGRU) else m.hidden_size)
            with torch.no_grad():
                for p in m.parameters():
                    p.uniform_(-bound, bound, generator=generator)


def build_models(cfg: ModelConfig, seed: int = 0, channels: int = 3) -> StarGAN:
    """Instantiate and deterministically initialize all four networks."""
    if channels < 1:
        raise ConfigError("need at least one channel")
    gen = torch.Generator().manual_seed(int(seed))
    nets = [Generator(cfg, channels), Generator(cfg, channels), Discriminator(cfg, channels), Discriminator(cfg, channels)]
    for net in nets:
        init_weights(net, gen)
    return StarGAN(cfg, *nets, channels=channels)


def count_parameters(models: nn.Module | StarGAN | Iterable) -> int:
    """Number of trainable scalars in a network, a :class:`StarGAN` or an iterable of them."""
    if isinstance(models, (nn.Module, StarGAN)):
        params = models.parameters()
    else:
        params = (p for m in models for p in m.parameters())
    return int(sum(p.numel() for p in params if p.requires_grad))


def receptive_field(cfg: ModelConfig) -> int:
    """Half-width, in input samples, of the window that can affect one output sample.

    Each conv adds ``(k // 2)`` times the sample spacing it operates at; the
    deepest path through the bottleneck bounds the skip paths. Only
    meaningful without instance norm and recurrent layers, which both couple
    the whole sequence.
    """
    k1, k2, k3 = cfg.g_kernels
    inc = max(INCEPTION_KERNELS) // 2

    def h(k, first=False):
        return inc if cfg.inception == "all" or (cfg.inception == "first" and first) else k // 2

    path = [
        (h(k1, True), 1),  # enc1
        (k1 // 2, 1),  # down1
        (h(k2), 2),  # enc2
        (k2 // 2, 2),  # down2
        (h(k3), 4),  # enc3
        (h(k3), 4),  # bottleneck
        (k3 // 2, 2),  # up2, offsets land on the finer grid
        (h(k2), 2),  # dec2
        (k2 // 2, 1),  # up1
        (h(k1), 1),  # dec1
        (k1 // 2, 1),  # output conv
    ]
    return int(sum(half * spacing for half, spacing in path))


# -- checkpoints -----------------------------------------------------------------

CKPT_MAGIC = b"PPGRCKPT"
CKPT_VERSION = 1
_DTYPES = {torch.float32: 0, torch.float64: 1, torch.int64: 2, torch.uint8: 3}
_NP = {0: "<f4", 1: "<f8", 2: "<i8", 3: "u1"}


def _pack(buf: io.BytesIO, meta: Mapping, tensors: Mapping[str, torch.Tensor]) -> None:
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    blob = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        code = _DTYPES[t.dtype]
        nb = name.encode()
        buf.write(struct.pack("<HBB", len(nb), code, t.dim()))
        buf.write(nb)
        buf.write(struct.pack(f"<{t.dim()}q", *t.shape))
        buf.write(t.numpy().astype(_NP[code], copy=False).tobytes())


def _unpack(data: bytes, path="<bytes>") -> tuple[dict, dict[str, torch.Tensor]]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(8)) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (n,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(n)))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        ln, code, ndim = struct.unpack("<HBB", take(4))
        name = bytes(take(ln)).decode()
        shape = struct.unpack(f"<{ndim}q", take(8 * ndim))
        if code not in _NP:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        dt = np.dtype(_NP[code])
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(take(size), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        tensors[name] = torch.from_numpy(arr.copy())
    if pos != len(view):
        raise CheckpointError(f"{path}: {len(view) - pos} trailing bytes")
    return meta, tensors


def checkpoint_bytes(model: StarGAN, extra: Mapping | None = None) -> bytes:
    meta = {"config": model.cfg.to_json(), "channels": model.channels, "extra": dict(extra or {})}
    buf = io.BytesIO()
    _pack(buf, meta, model.state_dict())
    return buf.getvalue()


def save_checkpoint(model: StarGAN, path: Path | str, extra: Mapping | None = None) -> Path:
    """Write config and weights; the file is written atomically via a temporary name."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, extra))
    tmp.replace(path)
    return path


def load_checkpoint(path: Path | str) -> tuple[StarGAN, dict]:
    """Rebuild the model stored at ``path``; returns it with the ``extra`` metadata."""
    meta, tensors = _unpack(Path(path).read_bytes(), path)
    cfg = ModelConfig.from_json(meta["config"])
    model = build_models(cfg, 0, meta["channels"])
    dtypes = {t.dtype for t in tensors.values() if t.is_floating_point()}
    if dtypes == {torch.float64}:
        model.to(torch.float64)
    try:
        model.load_state_dict(tensors)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: weights do not match config: {e}") from e
    return model, meta.get("extra", {})


# -- inference -------------------------------------------------------------------


@torch.no_grad()
def restore(g_xy: Generator, chunks: np.ndarray, batch: int = 16) -> np.ndarray:
    """Apply the restoring generator to standardized chunks of shape (N, C, L)."""
    x = np.asarray(chunks)
    if x.ndim == 2:
        return restore(g_xy, x[None], batch)[0]
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input")
    g_xy.eval()
    dtype = next(g_xy.parameters()).dtype
    out = [g_xy(torch.as_tensor(x[i : i + batch], dtype=dtype)).numpy() for i in range(0, len(x), batch)]
    return np.concatenate(out).astype(np.float64)
