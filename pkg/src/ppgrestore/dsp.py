"""Filters, spectra, correlation and moments used across the pipeline."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

from .core import FS, Series


class FilterDesignError(ValueError):
    """The requested filter cannot be designed or would be unstable."""


class NyquistError(FilterDesignError):
    """A band edge lies at or beyond the Nyquist frequency."""


class UndefinedCorrelationError(ValueError):
    """Normalized correlation is undefined at every evaluated lag."""


@dataclass(frozen=True, eq=False)
class FilterSpec:
    """A digital IIR band-pass filter.

    Coefficients are kept as second-order sections; ``b``/``a`` expand them to
    a single transfer function, which is ill-conditioned for narrow bands at
    high sampling rates and should only be used for inspection.
    """

    family: str
    order: int
    band: tuple[float, float]
    fs: float
    sos: np.ndarray

    @property
    def b(self) -> np.ndarray:
        return signal.sos2tf(self.sos)[0]

    @property
    def a(self) -> np.ndarray:
        return signal.sos2tf(self.sos)[1]

    @property
    def poles(self) -> np.ndarray:
        return signal.sos2zpk(self.sos)[1]

    def frequency_response(self, freqs: np.ndarray) -> np.ndarray:
        return signal.sosfreqz(self.sos, worN=np.asarray(freqs, dtype=float), fs=self.fs)[1]


def design_bandpass(family: str, order: int, lo_hz: float, hi_hz: float, fs: float = FS) -> FilterSpec:
    """Design a band-pass filter with -3 dB points at ``lo_hz`` and ``hi_hz``.

    ``order`` is the prototype low-pass order, so the band-pass system has
    order ``2 * order``. Bessel designs are magnitude-normalized.
    """
    if family not in ("bessel", "butterworth"):
        raise FilterDesignError(f"unknown filter family {family!r}")
    if order < 1:
        raise FilterDesignError("order must be >= 1")
    if fs <= 0:
        raise FilterDesignError("sampling rate must be positive")
    if hi_hz >= fs / 2:
        raise NyquistError(f"upper edge {hi_hz} Hz is not below Nyquist ({fs / 2} Hz)")
    if not 0 < lo_hz < hi_hz:
        raise FilterDesignError(f"need 0 < lo < hi, got ({lo_hz}, {hi_hz})")
    if family == "bessel":
        sos = signal.bessel(order, [lo_hz, hi_hz], btype="bandpass", fs=fs, output="sos", norm="mag")
    else:
        sos = signal.butter(order, [lo_hz, hi_hz], btype="bandpass", fs=fs, output="sos")
    spec = FilterSpec(family, order, (float(lo_hz), float(hi_hz)), float(fs), sos)
    if not np.all(np.abs(spec.poles) < 1):
        raise FilterDesignError("design produced poles on or outside the unit circle")
    return spec


PREPROCESS_BAND = (0.5, 25.0)
PEAK_BAND = (0.5, 2.5)


def preprocessing_filter(fs: float = FS) -> FilterSpec:
    return design_bandpass("bessel", 4, *PREPROCESS_BAND, fs)


def peak_filter(fs: float = FS) -> FilterSpec:
    return design_bandpass("butterworth", 4, *PEAK_BAND, fs)


def apply_filter(f: FilterSpec, s: Series) -> Series:
    """Causal, zero-initial-state filtering."""
    if s.fs != f.fs:
        raise ValueError(f"series at {s.fs} Hz, filter designed for {f.fs} Hz")
    return Series(signal.sosfilt(f.sos, s.samples), s.fs)


def filter_array(f: FilterSpec, x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Same as :func:`apply_filter` for raw arrays of any shape."""
    return signal.sosfilt(f.sos, np.asarray(x, dtype=np.float64), axis=axis)


# -- correlation ---------------------------------------------------------------


_DIRECT_OVERLAP = 16


@dataclass(frozen=True)
class XCorr:
    lags: np.ndarray
    r: np.ndarray
    best_lag: int
    r_best: float


def rescale01(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def xcorr_normalized(t, s, max_lag: int, rescale: bool = True) -> XCorr:
    """Normalized cross-correlation of template ``t`` against signal ``s``.

    At lag ``d`` the samples ``t[i]`` and ``s[i + d]`` are paired over their
    overlap, and both means are taken over that overlap only, so every value
    is a Pearson coefficient. A signal that lags the template by ``d``
    samples therefore peaks at ``+d``. Lags with fewer than two overlapping
    samples or a constant overlap are reported as NaN.

    Parameters
    ----------
    t, s : Series or array_like
        Template and signal; lengths may differ.
    max_lag : int
        Lags ``-max_lag..max_lag`` are evaluated.
    rescale : bool
        Map both inputs to [0, 1] first. Pearson values are unchanged by
        this, it only keeps the sums well scaled.
    """
    t = np.asarray(getattr(t, "samples", t), dtype=np.float64)
    s = np.asarray(getattr(s, "samples", s), dtype=np.float64)
    if rescale:
        t, s = rescale01(t), rescale01(s)
    nt, ns = t.size, s.size
    max_lag = int(max_lag)
    lags = np.arange(-max_lag, max_lag + 1)

    # overlap for lag d: i in [max(0, -d), min(nt, ns - d))
    i0 = np.maximum(0, -lags)
    i1 = np.minimum(nt, ns - lags)
    n = i1 - i0
    valid = n >= 2
    i0c = np.clip(i0, 0, nt)
    i1c = np.clip(i1, 0, nt)
    j0c = np.clip(i0 + lags, 0, ns)
    j1c = np.clip(i1 + lags, 0, ns)

    ct = np.concatenate([[0.0], np.cumsum(t)])
    ctt = np.concatenate([[0.0], np.cumsum(t * t)])
    cs = np.concatenate([[0.0], np.cumsum(s)])
    css = np.concatenate([[0.0], np.cumsum(s * s)])
    st, stt = ct[i1c] - ct[i0c], ctt[i1c] - ctt[i0c]
    ss, sss = cs[j1c] - cs[j0c], css[j1c] - css[j0c]

    full = signal.correlate(s, t, mode="full")
    full_lags = signal.correlation_lags(ns, nt, mode="full")
    idx = lags - full_lags[0]
    inrange = (idx >= 0) & (idx < full.size)
    sts = np.zeros(lags.size)
    sts[inrange] = full[idx[inrange]]

    with np.errstate(invalid="ignore", divide="ignore"):
        nn = np.where(valid, n, 1)
        num = sts - st * ss / nn
        vt = stt - st * st / nn
        vs = sss - ss * ss / nn
        tol_t = 1e-12 * np.maximum(stt, 1.0)
        tol_s = 1e-12 * np.maximum(sss, 1.0)
        ok = valid & (vt > tol_t) & (vs > tol_s)
        r = np.where(ok, num / np.sqrt(np.where(ok, vt, 1.0) * np.where(ok, vs, 1.0)), np.nan)
    # running sums cancel badly on tiny overlaps, so evaluate those directly
    for k in np.flatnonzero(valid & (n < _DIRECT_OVERLAP)):
        a = t[i0[k] : i1[k]]
        b = s[i0[k] + lags[k] : i1[k] + lags[k]]
        a, b = a - a.mean(), b - b.mean()
        va, vb = a @ a, b @ b
        ok[k] = va > 0 and vb > 0
        r[k] = a @ b / np.sqrt(va * vb) if ok[k] else np.nan
    r = np.clip(r, -1.0, 1.0)
    if not np.any(ok):
        raise UndefinedCorrelationError("correlation undefined at every lag (constant input?)")
    k = int(np.nanargmax(r))
    return XCorr(lags, r, int(lags[k]), float(r[k]))


# -- moments -------------------------------------------------------------------


def shannon_entropy(s, bins: int = 16) -> float:
    """Histogram entropy over [min, max], normalized by ``log(bins)``."""
    x = np.asarray(getattr(s, "samples", s), dtype=np.float64)
    if x.size < 2:
        raise ValueError("entropy needs at least two samples")
    lo, hi = x.min(), x.max()
    if lo == hi:
        return 0.0
    counts, _ = np.histogram(x, bins=bins, range=(lo, hi))
    p = counts[counts > 0] / x.size
    return float(-(p * np.log(p)).sum() / np.log(bins))


def kurtosis(s) -> float:
    """Pearson kurtosis (fourth standardized moment; Gaussian gives 3)."""
    x = np.asarray(getattr(s, "samples", s), dtype=np.float64)
    d = x - x.mean()
    m2 = np.mean(d * d)
    if m2 == 0:
        raise ValueError("kurtosis undefined for zero variance")
    return float(np.mean(d**4) / m2**2)


# -- spectra -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Psd:
    freqs: np.ndarray
    power: np.ndarray
    window_len: int
    overlap: int

    @property
    def df(self) -> float:
        return float(self.freqs[1] - self.freqs[0])


def welch_psd(s, window_frac: float = 0.1, window_len: int | None = None, fs: float | None = None) -> Psd:
    """One-sided Welch density with a Hann window and 50% overlap.

    The window is ``round(window_frac * len(s))`` samples unless
    ``window_len`` is given.
    """
    if fs is None:
        fs = getattr(s, "fs", FS)
    x = np.asarray(getattr(s, "samples", s), dtype=np.float64)
    n = window_len if window_len is not None else int(round(window_frac * x.size))
    if n < 8:
        raise ValueError(f"window of {n} samples is too short (need >= 8)")
    if x.size < n:
        raise ValueError(f"series of {x.size} samples is shorter than the {n}-sample window")
    noverlap = n // 2
    f, p = signal.welch(
        x, fs=fs, window="hann", nperseg=n, noverlap=noverlap, detrend="constant", scaling="density"
    )
    return Psd(f, np.maximum(p, 0.0), n, noverlap)


def band_limited_noise(
    sd: float,
    band: tuple[float, float] = PREPROCESS_BAND,
    fs: float = FS,
    n: int = 2000,
    seed: int | np.random.SeedSequence | None = None,
) -> Series:
    """Gaussian noise (mean 0, ``sd``) passed through the Bessel band-pass."""
    if not sd > 0:
        raise ValueError(f"noise sd must be positive, got {sd}")
    rng = np.random.default_rng(seed)
    raw = rng.normal(0.0, sd, n)
    return apply_filter(design_bandpass("bessel", 4, band[0], band[1], fs), Series(raw, fs))
