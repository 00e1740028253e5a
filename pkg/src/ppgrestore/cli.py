"""Command-line front end: ``ppg-restore <subcommand> [flags]``.

Exit status is 0 on success, 2 for invalid arguments or inputs and 1 for
failures while running.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

CHANNEL_MODES = {"3": (0, 1, 2), "1": (2,)}


class UsageError(ValueError):
    """Invalid input detected before or during a run; maps to exit status 2."""


def _threads() -> None:
    cap = os.environ.get("PPG_RESTORE_THREADS")
    if not cap:
        return
    try:
        n = max(1, int(cap))
    except ValueError:
        raise UsageError(f"PPG_RESTORE_THREADS must be an integer, got {cap!r}") from None
    import numba
    import torch

    torch.set_num_threads(n)
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ppg-restore", description="Chest PPG restoration with a cycle-consistent GAN.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(sp, data=True, out=True, seed=False):
        if data:
            sp.add_argument("--data", type=Path, required=True, help="dataset root, split directory or raw recordings")
        if out:
            sp.add_argument("--out", type=Path, required=True, help="output directory")
        if seed:
            sp.add_argument("--seed", type=int, required=True, help="random seed")

    def model_flags(sp):
        sp.add_argument("--config", default="m09", help="architecture m01..m11 (default m09)")
        sp.add_argument("--g-init", type=int, default=None, help="override generator initial filters")
        sp.add_argument("--channels", choices=sorted(CHANNEL_MODES), default="3",
                        help="3 = red/IR/green, 1 = green only")
        sp.add_argument("--weights", default="1,10,5", help="adversarial,cycle,identity loss weights")
        sp.add_argument("--epochs", type=int, default=30, help="maximum epochs (default 30)")
        sp.add_argument("--batch", type=int, default=4, help="batch size (default 4)")
        sp.add_argument("--patience", type=int, default=10, help="early-stopping patience in epochs")

    sp = sub.add_parser("synth", help="write a synthetic finger/chest cohort as a dataset")
    common(sp, data=False, seed=True)
    sp.add_argument("--subjects", type=int, default=12)
    sp.add_argument("--recordings", type=int, default=3, help="recordings per subject")
    sp.add_argument("--duration", type=float, default=120.0, help="seconds per recording")

    sp = sub.add_parser("preprocess", help="band-pass and segment raw recordings into a dataset")
    common(sp)
    sp.add_argument("--seed", type=int, default=0, help="seed for the subject split when no manifest exists")

    sp = sub.add_parser("label", help="quality-gate a dataset; writes the gate report and the retained set")
    common(sp)
    sp.add_argument("--labels", type=Path, default=None, help="manual chest keep/leave labels (JSON)")
    sp.add_argument("--r-hat", type=float, default=0.8, help="template correlation threshold")

    sp = sub.add_parser("train", help="train one configuration; writes checkpoints and history")
    common(sp, seed=True)
    model_flags(sp)
    sp.add_argument("--resume", type=Path, default=None, help="training state to continue from")

    sp = sub.add_parser("ablate", help="train and validate several configurations")
    common(sp, seed=True)
    model_flags(sp)
    sp.add_argument("--configs", default="m01,m02,m03,m04,m05,m06,m07,m08,m09,m10,m11")

    sp = sub.add_parser("restore", help="restore chest chunks with a trained checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--split", default="test")

    sp = sub.add_parser("evaluate", help="score restored chunks; writes CSV tables and figures")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, default=None, help="restore with this model first")
    sp.add_argument("--split", default="test")
    sp.add_argument("--traces", type=int, default=2, help="chunks exported as overlay traces")
    sp.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    return p


# -- helpers ---------------------------------------------------------------------


def _load_dataset(path: Path):
    from .core import read_dataset

    if not path.exists():
        raise UsageError(f"dataset {path} does not exist")
    return read_dataset(path)


def _pairs(path: Path, split: str):
    ds = _load_dataset(path)
    pairs = ds[split] if ds[split] else ds.pairs
    if not pairs:
        raise UsageError(f"no chunk pairs found under {path}")
    return list(pairs)


def _require_splits(ds, path: Path) -> None:
    empty = [s for s in ("train", "validation") if not ds[s]]
    if empty:
        raise UsageError(f"{path} has no chunk pairs in split(s): {', '.join(empty)}")


def _model_config(args):
    from .stargan import get_config

    over = {} if args.g_init is None else {"g_init": args.g_init}
    return get_config(args.config, **over)


def _train_options(args):
    from .training import LossWeights, TrainOptions

    if args.epochs < 1 or args.batch < 1:
        raise UsageError("--epochs and --batch must be positive")
    try:
        weights = LossWeights.parse(args.weights)
    except ValueError as e:
        raise UsageError(f"--weights: {e}") from None
    return TrainOptions(epochs=args.epochs, batch=args.batch, patience=args.patience, seed=args.seed,
                        channels=CHANNEL_MODES[args.channels], weights=weights)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _restore_into(pairs, model, channels):
    """Attach restored chunks; channels the model does not cover keep the standardized measurement."""
    from .core import standardize
    from .training import restore_pairs

    out = []
    for p, r in zip(pairs, restore_pairs(model.g_xy, pairs, channels)):
        full = standardize(p.chest.data.astype(np.float64))
        full[list(channels)] = r
        out.append(p.replace(restored=p.chest.replace(data=full, source="restored", labels=None)))
    return out


# -- subcommands -----------------------------------------------------------------


def cmd_synth(args) -> None:
    from .pipeline import synthetic_cohort, write_cohort

    if args.subjects < 4:
        raise UsageError("need at least 4 subjects for a train/validation/test split")
    cohort = synthetic_cohort(args.subjects, args.recordings, args.duration, args.seed)
    ds = write_cohort(cohort, args.out)
    print(f"wrote {len(ds)} chunk pairs for {args.subjects} subjects to {args.out}")


def cmd_preprocess(args) -> None:
    from .core import split_subjects, write_dataset
    from .pipeline import preprocess_recordings, read_recordings

    if not args.data.is_dir():
        raise UsageError(f"raw recording directory {args.data} does not exist")
    recs = read_recordings(args.data)
    if not recs:
        raise UsageError(f"no recordings under {args.data}")
    manifest = args.data / "manifest.json"
    if manifest.exists():
        assignment = json.loads(manifest.read_text())["assignment"]
    else:
        ids = sorted({r.subject_id for r in recs})
        rng = np.random.default_rng(args.seed)
        assignment = split_subjects([ids[i] for i in rng.permutation(len(ids))])
    ds = preprocess_recordings(recs, assignment)
    write_dataset(ds, args.out, extra={"preprocessed_from": str(args.data)})
    print(f"wrote {len(ds)} chunk pairs to {args.out}")


def cmd_label(args) -> None:
    from .core import write_dataset
    from .quality import gate_dataset, load_labels, write_gate_report

    manual = load_labels(args.labels) if args.labels else None
    result = gate_dataset(_load_dataset(args.data), manual, args.r_hat)
    args.out.mkdir(parents=True, exist_ok=True)
    write_gate_report(result, args.out / "gate_report.csv")
    write_dataset(result.dataset, args.out, extra={"gated_from": str(args.data), "r_hat": args.r_hat})
    kept = len(result.dataset)
    print(f"retained {kept} of {len(result.labels)} chunk pairs")


def cmd_train(args) -> None:
    from .plotting import history_figure
    from .stargan import save_checkpoint
    from .training import load_state, train

    ds = _load_dataset(args.data)
    _require_splits(ds, args.data)
    args.out.mkdir(parents=True, exist_ok=True)
    state = load_state(args.resume) if args.resume else None
    opts = state.opts if state else _train_options(args)
    state = train(ds, _model_config(args) if state is None else state.model.cfg, opts, state=state,
                  state_path=args.out / "last.state", history_path=args.out / "history.csv", log=_log)
    best = state.best_model()
    save_checkpoint(best, args.out / "best.ckpt",
                    extra={"channels": list(opts.channels), "best_epoch": state.best_epoch, "seed": opts.seed})
    history_figure(state.history, args.out / "history.png")
    print(f"best epoch {state.best_epoch}, validation RMSE_t {state.best_score:.4f}")


def cmd_ablate(args) -> None:
    from .evaluation import evaluate_pairs, write_csv
    from .stargan import count_parameters, get_config, save_checkpoint
    from .training import train, restore_pairs

    ds = _load_dataset(args.data)
    _require_splits(ds, args.data)
    opts = _train_options(args)
    rows = []
    names = [c.strip() for c in args.configs.split(",") if c.strip()]
    cfgs = [get_config(n, **({} if args.g_init is None else {"g_init": args.g_init})) for n in names]
    for cfg in cfgs:
        _log(f"== {cfg.name}")
        state = train(ds, cfg, opts, log=_log)
        model = state.best_model()
        save_checkpoint(model, args.out / cfg.name / "best.ckpt", extra={"channels": list(opts.channels)})
        val = list(ds["validation"])
        rep = evaluate_pairs(val, restore_pairs(model.g_xy, val, opts.channels), channels=opts.channels)
        for ch, m in rep.signal["restored"].items():
            rows.append({"config": cfg.name, "channel": ch, "parameters": count_parameters(model.g_xy), **m})
    args.out.mkdir(parents=True, exist_ok=True)
    write_csv(args.out / "ablation.csv", rows)
    print(f"wrote {args.out / 'ablation.csv'}")


def _load_model(path: Path):
    from .stargan import load_checkpoint

    if not path.exists():
        raise UsageError(f"checkpoint {path} does not exist")
    model, extra = load_checkpoint(path)
    channels = tuple(extra.get("channels", (0, 1, 2)))
    if len(channels) != model.channels:
        raise UsageError(f"checkpoint metadata lists channels {channels} for a {model.channels}-channel model")
    return model, channels


def cmd_restore(args) -> None:
    from .core import Dataset, write_dataset

    model, channels = _load_model(args.checkpoint)
    pairs = _pairs(args.data, args.split)
    restored = _restore_into(pairs, model, channels)
    write_dataset(Dataset({args.split: restored}), args.out,
                  extra={"restored_channels": list(channels), "checkpoint": str(args.checkpoint)})
    print(f"restored {len(restored)} chunks into {args.out}")


def cmd_evaluate(args) -> None:
    from .core import read_manifest
    from .evaluation import evaluate_pairs, trace_rows, write_report

    if args.checkpoint is not None:
        model, channels = _load_model(args.checkpoint)
        pairs = _restore_into(_pairs(args.data, args.split), model, channels)
    else:
        pairs = _pairs(args.data, args.split)
        if any(p.restored is None for p in pairs):
            raise UsageError("dataset has no restored chunks; pass --checkpoint or run restore first")
        try:
            channels = tuple(read_manifest(args.data).get("restored_channels", (0, 1, 2)))
        except (FileNotFoundError, ValueError):
            channels = (0, 1, 2)
    rep = evaluate_pairs(pairs, channels=channels)
    traces = []
    for p in pairs[: max(0, args.traces)]:
        traces.extend(trace_rows(p, p.restored.data[list(channels)], channels))
    paths = write_report(rep, args.out, traces)
    if not args.no_figures:
        from .plotting import report_figures

        paths.update(report_figures(rep, args.out, traces))
    print(json.dumps({k: str(v) for k, v in sorted(paths.items())}, indent=1))


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "label": cmd_label,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "restore": cmd_restore,
    "evaluate": cmd_evaluate,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse reports usage errors with status 2
        return int(e.code or 0)
    from .core import DatasetFormatError
    from .stargan import CheckpointError, ConfigError

    try:
        _threads()
        COMMANDS[args.command](args)
    except (UsageError, ConfigError, CheckpointError, DatasetFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report and map to runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
