"""Synthetic finger/chest PPG recordings with known beat times.

Stands in for the private acquisition: each subject gets a beat train with
heart-rate variability, rendered per channel with the two-Gaussian beat.
The chest copy is delayed, amplitude-modulated by respiration, given
baseline wander and corrupted by band-limited Gaussian noise. A lead-II-like
ECG is rendered from the same beats.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import FS, Chunk, Series
from .dsp import band_limited_noise
from .quality import DICROTIC_AMP, DICROTIC_POS, DICROTIC_WIDTH, SYSTOLIC_POS, SYSTOLIC_WIDTH

FINGER_SCALE = 1000.0
CHEST_SCALE = 150.0
ECG_SCALE = 1000.0
PTT_S = 0.22  # R wave to finger systolic peak
HRV_AR = 0.9  # beat-to-beat persistence of the heart-rate deviation
# chest noise multipliers for red, IR, green
CHANNEL_NOISE = (1.25, 0.85, 1.0)


@dataclass(frozen=True)
class SubjectModel:
    base_hr: float = 72.0
    hr_variability: float = 3.0
    amplitude: tuple[float, float, float] = (1.0, 1.0, 1.0)
    systolic_width: tuple[float, float, float] = (SYSTOLIC_WIDTH,) * 3
    dicrotic_amp: tuple[float, float, float] = (DICROTIC_AMP,) * 3
    chest_gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    respiration_hz: float = 0.25
    chest_noise_level: float = 60.0
    chest_delay_ms: float = 80.0

    def __post_init__(self):
        if not 40 <= self.base_hr <= 120:
            raise ValueError(f"base_hr {self.base_hr} outside [40, 120] bpm")
        if not -200 <= self.chest_delay_ms <= 200:
            raise ValueError(f"chest_delay_ms {self.chest_delay_ms} outside [-200, 200]")
        if self.hr_variability < 0 or self.chest_noise_level < 0:
            raise ValueError("variability and noise level must be non-negative")
        for name in ("amplitude", "systolic_width", "dicrotic_amp", "chest_gain"):
            v = getattr(self, name)
            if len(v) != 3:
                raise ValueError(f"{name} needs one value per channel")
            object.__setattr__(self, name, tuple(float(a) for a in v))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SubjectModel":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def random_subject(rng: np.random.Generator, noise_range: tuple[float, float] = (100.0, 180.0)) -> SubjectModel:
    """Draw a plausible subject; morphology is perturbed away from the nominal beat."""
    return SubjectModel(
        base_hr=float(rng.uniform(55, 95)),
        hr_variability=float(rng.uniform(1.0, 3.0)),
        amplitude=tuple(rng.uniform(0.7, 1.3, 3)),
        systolic_width=tuple(SYSTOLIC_WIDTH * rng.uniform(0.9, 1.15, 3)),
        dicrotic_amp=tuple(DICROTIC_AMP * rng.uniform(0.6, 1.3, 3)),
        chest_gain=tuple(rng.uniform(0.7, 1.3, 3)),
        respiration_hz=float(rng.uniform(0.2, 0.33)),
        chest_noise_level=float(rng.uniform(*noise_range)),
        chest_delay_ms=float(rng.uniform(-150, 150)),
    )


@dataclass(frozen=True, eq=False)
class SynthRecording:
    finger: np.ndarray  # (3, L) raw units
    chest: np.ndarray  # (3, L)
    ecg: np.ndarray  # (L,)
    beat_times: np.ndarray  # finger systolic peaks, s
    fs: float


def beat_train(duration_s: float, base_hr: float, hrv: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Systolic peak times and their beat periods, starting before t = 0."""
    times, periods = [], []
    t = -rng.uniform(0.5, 1.5)
    e = 0.0
    while t < duration_s + 2.0:
        e = HRV_AR * e + np.sqrt(1 - HRV_AR**2) * rng.standard_normal()
        hr = np.clip(base_hr + hrv * e, 35.0, 170.0)
        period = 60.0 / hr
        times.append(t)
        periods.append(period)
        t += period
    return np.asarray(times), np.asarray(periods)


def render_ppg(t: np.ndarray, beats: np.ndarray, periods: np.ndarray, systolic_width: float, dicrotic_amp: float) -> np.ndarray:
    """Sum of systolic and dicrotic Gaussians for every beat."""
    out = np.zeros_like(t)
    off = (DICROTIC_POS - SYSTOLIC_POS)
    for tb, T in zip(beats, periods):
        lo, hi = np.searchsorted(t, [tb - 2 * T, tb + 2 * T])
        u = t[lo:hi] - tb
        out[lo:hi] += np.exp(-0.5 * (u / (systolic_width * T)) ** 2)
        out[lo:hi] += dicrotic_amp * np.exp(-0.5 * ((u - off * T) / (DICROTIC_WIDTH * T)) ** 2)
    return out


def render_ecg(t: np.ndarray, r_times: np.ndarray) -> np.ndarray:
    out = np.zeros_like(t)
    waves = ((-0.04, 0.010, -0.12), (0.0, 0.012, 1.0), (0.035, 0.010, -0.25), (-0.16, 0.025, 0.12), (0.25, 0.06, 0.3))
    for tr in r_times:
        lo, hi = np.searchsorted(t, [tr - 0.4, tr + 0.6])
        u = t[lo:hi] - tr
        for mu, sd, amp in waves:
            out[lo:hi] += amp * np.exp(-0.5 * ((u - mu) / sd) ** 2)
    return out


def _centered(x: np.ndarray) -> np.ndarray:
    # no DC step at t = 0, so the causal band-pass settles within a beat or two
    return x - x.mean()


def seed_sequence(seed) -> np.random.SeedSequence:
    """Fresh sequence for ``seed``; a passed-in sequence is copied so spawning never mutates it."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key, pool_size=seed.pool_size)
    return np.random.SeedSequence(seed)


def synth_pair(subject: SubjectModel, duration_s: float, seed, fs: float = FS) -> SynthRecording:
    """Render one finger/chest/ECG recording of ``duration_s`` seconds."""
    if duration_s < 5:
        raise ValueError("duration must be at least 5 s")
    ss = seed_sequence(seed)
    beat_seed, phase_seed, *noise_seeds = ss.spawn(5)
    rng = np.random.default_rng(beat_seed)
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs
    beats, periods = beat_train(duration_s, subject.base_hr, subject.hr_variability, rng)
    delay = subject.chest_delay_ms / 1000.0

    finger = np.empty((3, n))
    clean_chest = np.empty((3, n))
    for c in range(3):
        sw, da = subject.systolic_width[c], subject.dicrotic_amp[c]
        finger[c] = FINGER_SCALE * subject.amplitude[c] * _centered(render_ppg(t, beats, periods, sw, da))
        clean_chest[c] = CHEST_SCALE * subject.chest_gain[c] * _centered(render_ppg(t, beats + delay, periods, sw, da))

    chest = clean_chest.copy()
    level = subject.chest_noise_level
    if level > 0:
        prng = np.random.default_rng(phase_seed)
        phase = prng.uniform(0, 2 * np.pi)
        resp = np.sin(2 * np.pi * subject.respiration_hz * t + phase)
        depth = min(0.6, level / 200.0)
        wander = level * (1.5 * resp + prng.uniform(-1, 1) * np.sin(2 * np.pi * 0.05 * t + prng.uniform(0, 6.3)))
        for c in range(3):
            noise = band_limited_noise(level * CHANNEL_NOISE[c], fs=fs, n=n, seed=noise_seeds[c]).samples
            chest[c] = clean_chest[c] * (1.0 + depth * resp) + wander + noise
    ecg = ECG_SCALE * render_ecg(t, beats - PTT_S)
    keep = (beats >= 0) & (beats < duration_s)
    return SynthRecording(finger, chest, ecg, beats[keep], fs)


def augment_training_chunk(chunk: Chunk, sd: float = 50.0, seed: int | np.random.SeedSequence | None = None) -> Chunk:
    """Add independent band-limited noise of standard deviation ``sd`` to each channel."""
    seeds = seed_sequence(seed).spawn(3)
    noisy = np.array(chunk.data, dtype=np.float64)
    for c in range(3):
        noisy[c] += band_limited_noise(sd, fs=chunk.fs, n=chunk.n_samples, seed=seeds[c]).samples
    return chunk.replace(data=noisy)


def augment_training_set(chunks, sd: float = 50.0, seed: int = 0) -> list[Chunk]:
    """Originals followed by one noisy copy of each, so the count doubles."""
    chunks = list(chunks)
    seeds = np.random.SeedSequence(seed).spawn(len(chunks))
    return chunks + [augment_training_chunk(c, sd, s) for c, s in zip(chunks, seeds)]


def ecg_series(rec: SynthRecording) -> Series:
    return Series(rec.ecg, rec.fs)
