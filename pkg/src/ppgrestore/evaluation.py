"""Alignment, waveform metrics, beat detection and clinical agreement."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage, signal

from .core import CHANNEL_NAMES, FS, GREEN, ChunkPair, DegenerateChannelError, standardize
from .dsp import UndefinedCorrelationError, design_bandpass, filter_array, welch_psd, xcorr_normalized

MIN_GAP_S = 0.33
MAX_GAP_S = 2.0


class NoPeaksError(ValueError):
    """Too few valid beats were found in a chunk."""


# -- alignment -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AlignedTriple:
    fppg: np.ndarray
    measured: np.ndarray
    restored: np.ndarray
    applied_lag: int

    @property
    def n_samples(self) -> int:
        return self.fppg.shape[-1]


def trim_to_lag(ref: np.ndarray, lag: int, *others: np.ndarray) -> tuple[np.ndarray, ...]:
    """Drop the non-overlapping ends after shifting ``others`` by ``lag`` samples."""
    n = ref.shape[-1]
    if abs(lag) >= n:
        raise ValueError(f"lag {lag} leaves no overlap")
    if lag >= 0:
        return (ref[..., : n - lag],) + tuple(o[..., lag:] for o in others)
    return (ref[..., -lag:],) + tuple(o[..., : n + lag] for o in others)


def align(
    restored: np.ndarray,
    measured: np.ndarray,
    fppg: np.ndarray,
    max_lag: int = int(2 * FS),
    ref_channel: int = GREEN,
) -> AlignedTriple:
    """Shift measured and restored chest signals onto the finger signal.

    The lag is chosen on ``ref_channel`` from the normalized cross-correlation
    of restored against finger, then applied to both chest signals.
    """
    restored, measured, fppg = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (restored, measured, fppg))
    if not restored.shape == measured.shape == fppg.shape:
        raise ValueError("restored, measured and fppg shapes differ")
    ch = min(ref_channel, fppg.shape[0] - 1)
    lag = xcorr_normalized(fppg[ch], restored[ch], max_lag).best_lag
    f, m, r = trim_to_lag(fppg, lag, measured, restored)
    return AlignedTriple(f, m, r, lag)


def best_lag(reference: np.ndarray, candidate: np.ndarray, max_lag: int = int(2 * FS)) -> int:
    """Samples by which ``candidate`` lags ``reference``."""
    return xcorr_normalized(reference, candidate, max_lag).best_lag


# -- waveform metrics ----------------------------------------------------------


def signal_metrics(a: np.ndarray, b: np.ndarray) -> dict[str, float]:
    """RMSE, MAE, Pearson R and R^2 of candidate ``b`` against reference ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("inputs differ in shape")
    d = a - b
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = (da * da).sum(), (db * db).sum()
    if saa == 0 or sbb == 0:
        raise DegenerateChannelError("correlation undefined for a constant input")
    return {
        "RMSE_t": float(np.sqrt(np.mean(d * d))),
        "MAE": float(np.mean(np.abs(d))),
        "R": float(np.clip((da * db).sum() / np.sqrt(saa * sbb), -1, 1)),
        "R2": float(1.0 - (d * d).sum() / saa),
    }


def snr_db(candidate: np.ndarray, reference: np.ndarray) -> float:
    """``10 log10(var(reference) / var(candidate - reference))``; +inf when exact."""
    candidate = np.asarray(candidate, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    noise = np.var(candidate - reference)
    if noise == 0:
        return math.inf
    return float(10.0 * np.log10(np.var(reference) / noise))


def rmse_f(a: np.ndarray, b: np.ndarray, fs: float = FS, window_len: int = 200) -> float:
    """Root-mean-square difference of the two Welch spectra."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("inputs differ in shape")
    pa = welch_psd(a, window_len=window_len, fs=fs).power
    pb = welch_psd(b, window_len=window_len, fs=fs).power
    return float(np.sqrt(np.mean((pa - pb) ** 2)))


# -- beats ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PeakSeries:
    indices: np.ndarray
    t_s: float

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.size and np.any(np.diff(idx) <= 0):
            raise ValueError("peak indices must be strictly increasing")
        object.__setattr__(self, "indices", idx)

    @property
    def n_peaks(self) -> int:
        return int(self.indices.size)

    @property
    def times(self) -> np.ndarray:
        return self.indices * self.t_s


def _validated(indices: np.ndarray, fs: float) -> PeakSeries:
    if indices.size < 2:
        raise NoPeaksError(f"found {indices.size} peak(s), need at least 2")
    gaps = np.diff(indices) / fs
    if np.any(gaps < MIN_GAP_S - 1e-9) or np.any(gaps > MAX_GAP_S + 1e-9):
        raise NoPeaksError(
            f"inter-beat gaps outside [{MIN_GAP_S}, {MAX_GAP_S}] s: {np.round(gaps, 3).tolist()}"
        )
    return PeakSeries(indices, 1.0 / fs)


def detect_systolic_peaks(channel, fs: float = FS, quantile: float = 0.75, window_s: float = 1.5) -> PeakSeries:
    """Systolic peaks as local maxima above a rolling-quantile threshold.

    Maxima closer than 0.33 s are resolved in favour of the larger one.
    Raises :class:`NoPeaksError` if fewer than two peaks survive or the
    resulting beat gaps fall outside [0.33, 2] s.
    """
    fs = getattr(channel, "fs", fs)
    x = np.asarray(getattr(channel, "samples", channel), dtype=np.float64)
    if x.size < 3 or np.ptp(x) == 0:
        raise NoPeaksError("flat or empty channel")
    x = (x - x.mean()) / x.std()
    size = max(3, int(round(window_s * fs)))
    thr = ndimage.percentile_filter(x, 100 * quantile, size=size, mode="nearest")
    idx, _ = signal.find_peaks(x, height=thr, distance=max(1, int(math.ceil(MIN_GAP_S * fs))))
    return _validated(idx, fs)


def detect_r_peaks(ecg, fs: float = FS) -> PeakSeries:
    """R peaks from a 5-15 Hz band energy envelope, refined on the raw trace."""
    fs = getattr(ecg, "fs", fs)
    x = np.asarray(getattr(ecg, "samples", ecg), dtype=np.float64)
    if x.size < 3 or np.ptp(x) == 0:
        raise NoPeaksError("flat or empty ECG")
    x = x - np.median(x)
    band = filter_array(design_bandpass("butterworth", 2, 5.0, 15.0, fs), x)
    w = max(1, int(round(0.15 * fs)))
    energy = np.convolve(band * band, np.ones(w) / w, mode="full")[: x.size]
    thr = 0.3 * np.percentile(energy, 99)
    cand, _ = signal.find_peaks(energy, height=thr, distance=int(math.ceil(MIN_GAP_S * fs)))
    # the causal band-pass and the trailing integrator both delay the envelope
    back, ahead = int(round(0.3 * fs)), int(round(0.05 * fs))
    refined = []
    for p in cand:
        lo, hi = max(0, p - back), min(x.size, p + ahead + 1)
        refined.append(lo + int(np.argmax(x[lo:hi])))
    refined = np.unique(refined)
    if refined.size > 1:
        keep = [refined[0]]
        for r in refined[1:]:
            if (r - keep[-1]) / fs >= MIN_GAP_S:
                keep.append(r)
            elif x[r] > x[keep[-1]]:
                keep[-1] = r
        refined = np.asarray(keep)
    return _validated(np.asarray(refined, dtype=np.int64), fs)


def pp_pr(peaks: PeakSeries) -> tuple[float, float]:
    """Mean peak-to-peak interval (s) and the matching rate (beats/min).

    The interval is averaged over the ``N_p - 1`` consecutive gaps.
    """
    if peaks.n_peaks < 2:
        raise NoPeaksError("need at least 2 peaks")
    pp = peaks.t_s * float(np.mean(np.diff(peaks.indices)))
    return pp, 60.0 / pp


def pr_from_times(times: Sequence[float]) -> float:
    t = np.asarray(times, dtype=np.float64)
    if t.size < 2:
        raise NoPeaksError("need at least 2 beat times")
    return 60.0 / float(np.mean(np.diff(t)))


# -- agreement -----------------------------------------------------------------


@dataclass(frozen=True)
class BlandAltman:
    bias: float
    lower: float
    upper: float
    sd: float
    n: int


def bland_altman(candidate: Sequence[float], reference: Sequence[float]) -> BlandAltman:
    """Bias and 1.96 SD limits of ``candidate - reference``."""
    c = np.asarray(candidate, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if c.shape != r.shape:
        raise ValueError("unequal number of measurements")
    if c.size < 2:
        raise ValueError("Bland-Altman analysis needs at least 2 pairs")
    d = c - r
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    return BlandAltman(bias, bias - 1.96 * sd, bias + 1.96 * sd, sd, int(d.size))


def pearson(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ok = np.isfinite(a) & np.isfinite(b)
    a, b = a[ok], b[ok]
    if a.size < 3 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return math.nan
    return float(np.corrcoef(a, b)[0, 1])


# -- report --------------------------------------------------------------------

SIGNAL_KEYS = ("RMSE_t", "MAE", "R", "R2", "SNR", "RMSE_f")
CLINICAL_KEYS = ("R_PP", "R_PR", "R_HR", "R_RR", "MAE_PR", "MAE_HR", "MAE_PR_gt")
KINDS = ("measured", "restored")


@dataclass
class MetricsReport:
    """Per-chunk rows plus the aggregated tables.

    ``rows`` has one entry per chunk and channel. ``signal`` and ``clinical``
    map kind -> channel name -> metric -> value; signal metrics are medians
    over chunks, clinical ones are correlations or mean absolute errors
    across chunks.
    """

    channels: tuple[str, ...]
    rows: list[dict] = field(default_factory=list)
    signal: dict = field(default_factory=dict)
    clinical: dict = field(default_factory=dict)
    bland_altman: dict = field(default_factory=dict)
    lags: dict = field(default_factory=dict)
    lag_rows: list[dict] = field(default_factory=list)
    excluded: dict = field(default_factory=dict)
    n_chunks: int = 0

    def median(self, kind: str, key: str, channels: Sequence[str] | None = None) -> float:
        """Median of a per-chunk metric pooled over the given channels."""
        channels = channels or self.channels
        v = [r[f"{kind}_{key}"] for r in self.rows if r["channel"] in channels]
        v = np.asarray(v, dtype=np.float64)
        v = v[np.isfinite(v)]
        return float(np.median(v)) if v.size else math.nan

    def pooled_mae(self, kind: str, ref: str = "gt", channels: Sequence[str] | None = None) -> float:
        channels = channels or self.channels
        err = []
        for r in self.rows:
            if r["channel"] not in channels:
                continue
            a, b = r.get(f"{kind}_PR"), r.get(f"{ref}_PR")
            if a is not None and b is not None and np.isfinite(a) and np.isfinite(b):
                err.append(abs(a - b))
        return float(np.mean(err)) if err else math.nan

    def summary(self) -> dict:
        return {
            "n_chunks": self.n_chunks,
            "channels": list(self.channels),
            "signal": self.signal,
            "clinical": self.clinical,
            "bland_altman": self.bland_altman,
            "lags": self.lags,
            "excluded": self.excluded,
        }


def _safe(fn, *args):
    try:
        return fn(*args)
    except (NoPeaksError, DegenerateChannelError, UndefinedCorrelationError, ValueError):
        return None


def _chunk_rows(pair: ChunkPair, restored: np.ndarray, channels: Sequence[int], fs: float, max_lag: int):
    fppg = pair.finger.data[list(channels)].astype(np.float64)
    meas = pair.chest.data[list(channels)].astype(np.float64)
    rest = np.asarray(restored, dtype=np.float64)
    fppg, meas = standardize(fppg), standardize(meas)
    rest = standardize(rest)
    ref = list(channels).index(GREEN) if GREEN in channels else 0
    al = align(rest, meas, fppg, max_lag=max_lag, ref_channel=ref)
    f, m, r = standardize(al.fppg), standardize(al.measured), standardize(al.restored)
    window = int(round(0.1 * pair.finger.n_samples))

    ecg_hr = ecg_pp = None
    if pair.ecg is not None:
        ecg = trim_to_lag(pair.ecg.samples, al.applied_lag)[0]
        rp = _safe(detect_r_peaks, ecg, pair.ecg.fs)
        if rp is not None:
            ecg_pp, ecg_hr = pp_pr(rp)
    gt = None
    if pair.ground_truth_hr is not None:
        gt = float(pair.ground_truth_hr)
    elif pair.beat_times:
        gt = _safe(pr_from_times, pair.beat_times)

    rows = []
    for k, c in enumerate(channels):
        row = {"chunk_id": pair.chunk_id, "subject_id": pair.subject_id, "channel": CHANNEL_NAMES[c], "lag": al.applied_lag}
        for kind, cand in (("measured", m[k]), ("restored", r[k])):
            sm = signal_metrics(f[k], cand)
            row.update({f"{kind}_{key}": val for key, val in sm.items()})
            row[f"{kind}_SNR"] = snr_db(cand, f[k])
            row[f"{kind}_RMSE_f"] = rmse_f(f[k], cand, fs, window)
        for kind, x in (("fppg", f[k]), ("measured", m[k]), ("restored", r[k])):
            pk = _safe(detect_systolic_peaks, x, fs)
            pp, pr = pp_pr(pk) if pk is not None else (math.nan, math.nan)
            row[f"{kind}_PP"], row[f"{kind}_PR"] = pp, pr
        row["ecg_PP"] = ecg_pp if ecg_pp is not None else math.nan
        row["ecg_PR"] = ecg_hr if ecg_hr is not None else math.nan
        row["gt_PR"] = gt if gt is not None else math.nan
        rows.append(row)
    return rows, al


def evaluate_pairs(
    pairs: Sequence[ChunkPair],
    restored: Sequence[np.ndarray] | None = None,
    channels: Sequence[int] = (0, 1, 2),
    fs: float = FS,
    max_lag_s: float = 2.0,
) -> MetricsReport:
    """Score measured and restored chest signals against the finger reference.

    ``restored[i]`` is the restored chest signal for ``pairs[i]`` (shape
    ``(len(channels), L)``); when omitted, the ``restored`` chunk stored on
    each pair is used.
    """
    channels = tuple(channels)
    names = tuple(CHANNEL_NAMES[c] for c in channels)
    max_lag = int(round(max_lag_s * fs))
    rep = MetricsReport(channels=names)
    excluded = {"alignment": 0}
    ref = channels.index(GREEN) if GREEN in channels else 0
    for i, pair in enumerate(pairs):
        if restored is not None:
            rest = np.asarray(restored[i])
        elif pair.restored is not None:
            rest = pair.restored.data[list(channels)]
        else:
            raise ValueError(f"no restored signal for {pair.chunk_id}")
        rest = np.atleast_2d(rest)
        try:
            rows, _ = _chunk_rows(pair, rest, channels, fs, max_lag)
        except (DegenerateChannelError, UndefinedCorrelationError, ValueError):
            excluded["alignment"] += 1
            continue
        rep.rows.extend(rows)
        meas = standardize(pair.chest.data[list(channels)])
        fppg = standardize(pair.finger.data[list(channels)])
        rest_s = standardize(rest)
        rep.lag_rows.append(
            {
                "chunk_id": pair.chunk_id,
                "restored_vs_measured_ms": 1000.0 * best_lag(meas[ref], rest_s[ref], max_lag) / fs,
                "restored_vs_fppg_ms": 1000.0 * best_lag(fppg[ref], rest_s[ref], max_lag) / fs,
            }
        )
        rep.n_chunks += 1
    _aggregate(rep, excluded)
    return rep


def _aggregate(rep: MetricsReport, excluded: dict) -> None:
    for kind in KINDS:
        rep.signal[kind] = {}
        rep.clinical[kind] = {}
        for name in rep.channels:
            rows = [r for r in rep.rows if r["channel"] == name]
            rep.signal[kind][name] = {
                key: _nanmedian([r[f"{kind}_{key}"] for r in rows]) for key in SIGNAL_KEYS
            }
            col = lambda key: np.array([r[key] for r in rows], dtype=np.float64)  # noqa: E731
            pp, pr = col(f"{kind}_PP"), col(f"{kind}_PR")
            rep.clinical[kind][name] = {
                "R_PP": pearson(pp, col("fppg_PP")),
                "R_PR": pearson(pr, col("fppg_PR")),
                "R_HR": pearson(pr, col("ecg_PR")),
                "R_RR": pearson(pp, col("ecg_PP")),
                "MAE_PR": _mae(pr, col("fppg_PR")),
                "MAE_HR": _mae(pr, col("ecg_PR")),
                "MAE_PR_gt": _mae(pr, col("gt_PR")),
            }
            excluded[f"peaks_{kind}_{name}"] = int(np.sum(~np.isfinite(pr)))
            ok = np.isfinite(pp) & np.isfinite(col("fppg_PP"))
            if ok.sum() >= 2:
                ba = bland_altman(pp[ok], col("fppg_PP")[ok])
                rep.bland_altman.setdefault(kind, {})[name] = ba.__dict__
    for key in ("restored_vs_measured_ms", "restored_vs_fppg_ms"):
        v = np.array([r[key] for r in rep.lag_rows], dtype=np.float64)
        if v.size:
            counts, edges = np.histogram(v, bins=np.arange(-2000, 2001, 25))
            rep.lags[key] = {
                "mean": float(v.mean()),
                "sd": float(v.std(ddof=1)) if v.size > 1 else 0.0,
                "median_abs": float(np.median(np.abs(v))),
                "histogram": {"edges_ms": edges.tolist(), "counts": counts.tolist()},
            }
    rep.excluded = excluded


def _nanmedian(v) -> float:
    v = np.asarray(v, dtype=np.float64)
    v = v[np.isfinite(v)]
    return float(np.median(v)) if v.size else math.nan


def _mae(a: np.ndarray, b: np.ndarray) -> float:
    ok = np.isfinite(a) & np.isfinite(b)
    return float(np.mean(np.abs(a[ok] - b[ok]))) if ok.any() else math.nan


# -- output --------------------------------------------------------------------


def fmt(v) -> str:
    """Fixed 9-significant-digit formatting so repeated runs are byte-identical."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".9g")
    return str(v)


def write_csv(path: Path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c, "")) for c in columns])


def _round_floats(obj):
    if isinstance(obj, float):
        return float(format(obj, ".9g")) if math.isfinite(obj) else str(obj)
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def write_report(rep: MetricsReport, out: Path | str, traces: Sequence[dict] = ()) -> dict[str, Path]:
    """Write the metrics CSV, JSON summary and plot-ready CSVs under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": out / "metrics.csv",
        "summary": out / "summary.json",
        "bland_altman": out / "bland_altman.csv",
        "lags": out / "lags.csv",
        "lag_histogram": out / "lag_histogram.csv",
    }
    write_csv(paths["metrics"], rep.rows)
    paths["summary"].write_text(json.dumps(_round_floats(rep.summary()), indent=1, sort_keys=True))
    ba_rows = []
    for r in rep.rows:
        for kind in KINDS:
            a, b = r[f"{kind}_PP"], r["fppg_PP"]
            if np.isfinite(a) and np.isfinite(b):
                ba_rows.append(
                    {"chunk_id": r["chunk_id"], "channel": r["channel"], "kind": kind,
                     "pp_fppg": b, "pp_cppg": a, "mean": (a + b) / 2, "diff": a - b}
                )
    write_csv(paths["bland_altman"], ba_rows, ["chunk_id", "channel", "kind", "pp_fppg", "pp_cppg", "mean", "diff"])
    write_csv(paths["lags"], rep.lag_rows, ["chunk_id", "restored_vs_measured_ms", "restored_vs_fppg_ms"])
    hist_rows = []
    h1 = rep.lags.get("restored_vs_measured_ms", {}).get("histogram")
    h2 = rep.lags.get("restored_vs_fppg_ms", {}).get("histogram")
    if h1 and h2:
        for lo, c1, c2 in zip(h1["edges_ms"][:-1], h1["counts"], h2["counts"]):
            hist_rows.append({"bin_start_ms": lo, "restored_vs_measured": c1, "restored_vs_fppg": c2})
    write_csv(paths["lag_histogram"], hist_rows, ["bin_start_ms", "restored_vs_measured", "restored_vs_fppg"])
    if traces:
        paths["traces"] = out / "traces.csv"
        write_csv(paths["traces"], traces)
    return paths


def trace_rows(pair: ChunkPair, restored: np.ndarray, channels: Sequence[int] = (0, 1, 2), fs: float = FS) -> list[dict]:
    """Aligned, standardized overlay traces of one chunk, for plotting."""
    channels = list(channels)
    f = standardize(pair.finger.data[channels])
    m = standardize(pair.chest.data[channels])
    r = standardize(np.atleast_2d(restored))
    ref = channels.index(GREEN) if GREEN in channels else 0
    al = align(r, m, f, ref_channel=ref)
    rows = []
    for i in range(al.n_samples):
        row = {"chunk_id": pair.chunk_id, "t": i / fs}
        for k, c in enumerate(channels):
            name = CHANNEL_NAMES[c]
            row[f"fppg_{name}"] = al.fppg[k, i]
            row[f"measured_{name}"] = al.measured[k, i]
            row[f"restored_{name}"] = al.restored[k, i]
        rows.append(row)
    return rows
