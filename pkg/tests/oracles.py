"""Independent reference implementations used by the tests.

These are deliberately direct and slow. They share no code with the library.
"""
import math

import numpy as np


def xcorr_bruteforce(t, s, max_lag):
    """Pearson correlation of ``t[i]`` with ``s[i + d]`` over the overlap, one lag at a time."""
    t = [float(v) for v in t]
    s = [float(v) for v in s]
    out = []
    for d in range(-max_lag, max_lag + 1):
        idx = [i for i in range(len(t)) if 0 <= i + d < len(s)]
        if len(idx) < 2:
            out.append(math.nan)
            continue
        tm = sum(t[i] for i in idx) / len(idx)
        sm = sum(s[i + d] for i in idx) / len(idx)
        num = sum((t[i] - tm) * (s[i + d] - sm) for i in idx)
        vt = sum((t[i] - tm) ** 2 for i in idx)
        vs = sum((s[i + d] - sm) ** 2 for i in idx)
        out.append(num / math.sqrt(vt * vs) if vt > 0 and vs > 0 else math.nan)
    return np.array(out)


def rescale01(x):
    x = np.asarray(x, dtype=float)
    return (x - x.min()) / (x.max() - x.min())


def impulse_spectrum(filt, n=2**16):
    """Magnitude response from the FFT of a long impulse response."""
    imp = np.zeros(n)
    imp[0] = 1.0
    h = filt(imp)
    freqs = np.fft.rfftfreq(n, 1.0 / 400.0)
    return freqs, np.abs(np.fft.rfft(h))


def mean_abs(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    return sum(abs(x - y) for x, y in zip(a, b)) / a.size
