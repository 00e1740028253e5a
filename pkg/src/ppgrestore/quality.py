"""Finger-PPG screening, template gating and chest-channel labelling.

Finger chunks pass in three stages: kurtosis/entropy screening, a pulse-rate
estimate on an aggressively band-limited copy, and normalized correlation
against a template built from that rate. Chest channels of accepted chunks
are then marked keep/leave, either from a labels file or by an
autocorrelation periodicity check.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import CHANNEL_NAMES, FS, Chunk, ChunkPair, Dataset, Series
from .dsp import (
    FilterSpec,
    UndefinedCorrelationError,
    filter_array,
    kurtosis,
    peak_filter,
    preprocessing_filter,
    shannon_entropy,
    xcorr_normalized,
)
from .evaluation import NoPeaksError, PeakSeries, detect_systolic_peaks, pp_pr, write_csv

KURTOSIS_MAX = 3.5
ENTROPY_MIN = 0.8
R_HAT = 0.8
PR_RANGE = (30.0, 150.0)
TEMPLATE_PR_RANGE = (30.0, 180.0)
TEMPLATE_PREROLL_S = 20.0
PEAK_SETTLE_S = 0.75

# two-Gaussian beat, positions and widths as fractions of the beat period
SYSTOLIC_POS = 0.25
SYSTOLIC_WIDTH = 0.14
DICROTIC_POS = 0.55
DICROTIC_WIDTH = 0.10
DICROTIC_AMP = 0.35


class PulseRateError(ValueError):
    """Pulse rate could not be estimated or is out of range."""


def nominal_beat(
    period: int,
    systolic_width: float = SYSTOLIC_WIDTH,
    dicrotic_amp: float = DICROTIC_AMP,
    dicrotic_width: float = DICROTIC_WIDTH,
) -> np.ndarray:
    """One period of the systolic + dicrotic beat, wrapped so it tiles smoothly."""
    u = np.arange(period) / period
    beat = np.zeros(period)
    for k in (-1, 0, 1):
        beat += np.exp(-0.5 * ((u - SYSTOLIC_POS - k) / systolic_width) ** 2)
        beat += dicrotic_amp * np.exp(-0.5 * ((u - DICROTIC_POS - k) / dicrotic_width) ** 2)
    return beat


@dataclass(frozen=True, eq=False)
class PulseTemplate:
    nominal_beat: np.ndarray
    replicated: Series
    period: int
    pr_bpm: float

    @property
    def full_beats(self) -> int:
        return len(self.replicated) // self.period


def beat_period(pr_bpm: float, fs: float = FS) -> int:
    return int(round(fs * 60.0 / pr_bpm))


def build_template(
    pr_bpm: float, fs: float = FS, duration_s: float = 5.0, shape_filter: FilterSpec | None = None
) -> PulseTemplate:
    """Tile the nominal beat at ``pr_bpm`` across ``duration_s`` seconds.

    With ``shape_filter`` the tiled beat is passed through that filter after a
    pre-roll long enough for the start-up transient to die out, so the
    template matches signals that went through the same preprocessing.
    """
    lo, hi = TEMPLATE_PR_RANGE
    if not lo <= pr_bpm <= hi:
        raise PulseRateError(f"template rate {pr_bpm} bpm outside [{lo}, {hi}]")
    n = int(round(duration_s * fs))
    period = beat_period(pr_bpm, fs)
    beat = nominal_beat(period)
    if shape_filter is None:
        reps = -(-n // period)
        return PulseTemplate(beat, Series(np.tile(beat, reps)[:n], fs), period, float(pr_bpm))
    pre = -(-int(round(TEMPLATE_PREROLL_S * fs)) // period)
    reps = pre + -(-n // period)
    tiled = filter_array(shape_filter, np.tile(beat, reps))[pre * period : pre * period + n]
    return PulseTemplate(beat, Series(tiled, fs), period, float(pr_bpm))


def screen_channel(x) -> tuple[bool, float, float]:
    """(passed, kurtosis, entropy) for one finger channel; degenerate channels fail."""
    x = np.asarray(getattr(x, "samples", x), dtype=np.float64)
    e = shannon_entropy(x)
    try:
        k = kurtosis(x)
    except ValueError:
        return False, math.nan, e
    return (k < KURTOSIS_MAX and e > ENTROPY_MIN), k, e


def screen_fppg(chunk: Chunk) -> tuple[bool, bool, bool]:
    """Per-channel pass/fail on kurtosis < 3.5 and normalized entropy > 0.8."""
    return tuple(screen_channel(c)[0] for c in chunk.data)


def estimate_pulse_rate(channel, fs: float = FS) -> float:
    """Pulse rate (bpm) from peaks of the 0.5-2.5 Hz Butterworth-filtered channel."""
    fs = getattr(channel, "fs", fs)
    x = np.asarray(getattr(channel, "samples", channel), dtype=np.float64)
    if np.ptp(x) == 0:
        raise PulseRateError("flat channel")
    y = filter_array(peak_filter(fs), x - x.mean())
    try:
        peaks = detect_systolic_peaks(y, fs)
        # maxima inside the start-up transient of the narrow band-pass are spurious
        settled = peaks.indices[peaks.indices >= int(round(PEAK_SETTLE_S * fs))]
        pr = pp_pr(PeakSeries(settled, peaks.t_s))[1]
    except NoPeaksError as e:
        raise PulseRateError(f"insufficient peaks: {e}") from e
    lo, hi = PR_RANGE
    if not lo <= pr <= hi:
        raise PulseRateError(f"pulse rate {pr:.1f} bpm outside [{lo}, {hi}]")
    return pr


@dataclass
class QualityLabel:
    """Outcome of the quality procedure for one chunk pair."""

    fppg_ok: bool = False
    r_d: tuple[float, ...] = (math.nan,) * 3
    pulse_rate: tuple[float, ...] = (math.nan,) * 3
    kurtosis: tuple[float, ...] = (math.nan,) * 3
    entropy: tuple[float, ...] = (math.nan,) * 3
    screen_ok: tuple[bool, ...] = (False,) * 3
    cppg_channel_labels: tuple[str, ...] | None = None
    reason: str = ""

    @property
    def retained(self) -> bool:
        return bool(self.fppg_ok and self.cppg_channel_labels and "keep" in self.cppg_channel_labels)


def gate_fppg(chunk: Chunk, r_hat: float = R_HAT) -> QualityLabel:
    """Screen, rate-estimate and template-match every finger channel.

    The chunk is accepted only if all three channels pass screening and reach
    ``r_d >= r_hat`` against their own rate-matched template, searched over
    +/- one beat period. The template is shaped by the same band-pass the
    finger signal went through during preprocessing.
    """
    lab = QualityLabel()
    screens = [screen_channel(c) for c in chunk.data]
    lab.screen_ok = tuple(s[0] for s in screens)
    lab.kurtosis = tuple(s[1] for s in screens)
    lab.entropy = tuple(s[2] for s in screens)
    if not all(lab.screen_ok):
        lab.reason = "screen"
        return lab
    prs, rds = [], []
    duration = chunk.n_samples / chunk.fs
    for c in chunk.data:
        try:
            pr = estimate_pulse_rate(Series(c, chunk.fs))
            tpl = build_template(pr, chunk.fs, duration, preprocessing_filter(chunk.fs))
            rd = xcorr_normalized(tpl.replicated, c, max_lag=tpl.period).r_best
        except (PulseRateError, UndefinedCorrelationError):
            pr, rd = math.nan, math.nan
        prs.append(pr)
        rds.append(rd)
    lab.pulse_rate, lab.r_d = tuple(prs), tuple(rds)
    lab.fppg_ok = all(np.isfinite(rd) and rd >= r_hat for rd in rds)
    if not lab.fppg_ok:
        lab.reason = "pulse_rate" if not all(np.isfinite(prs)) else "template"
    return lab


def periodic_channel(x, fs: float = FS, min_lag_s: float = 0.33, max_lag_s: float = 2.0, threshold: float = 0.5) -> bool:
    """True when the autocorrelation has a local peak >= ``threshold`` in the beat-lag range."""
    x = np.asarray(getattr(x, "samples", x), dtype=np.float64)
    if np.ptp(x) == 0:
        return False
    hi = int(round(max_lag_s * fs))
    try:
        xc = xcorr_normalized(x, x, max_lag=hi + 1)
    except UndefinedCorrelationError:
        return False
    r = np.nan_to_num(xc.r, nan=-1.0)
    mid = hi + 1
    lo = int(round(min_lag_s * fs))
    for lag in range(lo, hi + 1):
        k = mid + lag
        if r[k] >= threshold and r[k] >= r[k - 1] and r[k] >= r[k + 1]:
            return True
    return False


def label_cppg(chunk: Chunk, manual_labels: Sequence[str] | None = None) -> tuple[str, str, str]:
    """Keep/leave per chest channel; a manual labelling wins when given."""
    if manual_labels is not None:
        labels = tuple(manual_labels)
        if len(labels) != 3 or any(lab not in ("keep", "leave") for lab in labels):
            raise ValueError(f"bad manual labels {manual_labels!r}")
        return labels
    return tuple("keep" if periodic_channel(c, chunk.fs) else "leave" for c in chunk.data)


def load_labels(path: Path | str) -> dict[str, tuple[str, str, str]]:
    """Read a ``{"subject/chunk": ["keep", "leave", "keep"]}`` labels file."""
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ValueError("labels file must hold a JSON object")
    return {str(k): tuple(v) for k, v in raw.items()}


def label_pair(pair: ChunkPair, manual: Mapping[str, Sequence[str]] | None = None, r_hat: float = R_HAT) -> QualityLabel:
    lab = gate_fppg(pair.finger, r_hat)
    if lab.fppg_ok:
        lab.cppg_channel_labels = label_cppg(pair.chest, (manual or {}).get(pair.chunk_id))
    return lab


@dataclass
class GateResult:
    dataset: Dataset
    labels: dict[str, QualityLabel] = field(default_factory=dict)

    def report_rows(self) -> list[dict]:
        rows = []
        for cid, lab in self.labels.items():
            row = {"chunk_id": cid}
            for i, name in enumerate(CHANNEL_NAMES):
                row[f"E_{name}"] = lab.entropy[i]
                row[f"K_{name}"] = lab.kurtosis[i]
                row[f"PR_{name}"] = lab.pulse_rate[i]
                row[f"r_d_{name}"] = lab.r_d[i]
            for i, name in enumerate(CHANNEL_NAMES):
                row[f"cppg_{name}"] = lab.cppg_channel_labels[i] if lab.cppg_channel_labels else ""
            row["fppg_ok"] = lab.fppg_ok
            row["retained"] = lab.retained
            row["reason"] = lab.reason
            rows.append(row)
        return rows


def gate_dataset(
    ds: Dataset, manual: Mapping[str, Sequence[str]] | None = None, r_hat: float = R_HAT
) -> GateResult:
    """Label every pair and keep the retained ones, with chest labels attached."""
    splits, labels = {}, {}
    for split, pairs in ds.splits.items():
        kept = []
        for p in pairs:
            lab = label_pair(p, manual, r_hat)
            labels[p.chunk_id] = lab
            if lab.retained:
                kept.append(p.replace(chest=p.chest.replace(labels=lab.cppg_channel_labels)))
        splits[split] = kept
    return GateResult(Dataset(splits), labels)


def write_gate_report(result: GateResult, path: Path | str) -> None:
    write_csv(Path(path), result.report_rows())
