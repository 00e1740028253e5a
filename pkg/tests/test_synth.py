import numpy as np
import pytest

from ppgrestore.core import FS, Chunk
from ppgrestore.dsp import welch_psd
from ppgrestore.evaluation import pr_from_times
from ppgrestore.pipeline import synthetic_cohort
from ppgrestore.synth import (
    CHEST_SCALE,
    FINGER_SCALE,
    SubjectModel,
    augment_training_chunk,
    augment_training_set,
    beat_train,
    synth_pair,
)


def test_same_seed_is_bit_identical():
    s = SubjectModel()
    a, b = synth_pair(s, 10, 5), synth_pair(s, 10, 5)
    for k in ("finger", "chest", "ecg", "beat_times"):
        assert np.array_equal(getattr(a, k), getattr(b, k))
    assert not np.array_equal(a.chest, synth_pair(s, 10, 6).chest)


def test_seed_sequence_argument_is_not_consumed():
    ss = np.random.SeedSequence(42).spawn(1)[0]
    a, b = synth_pair(SubjectModel(), 10, ss), synth_pair(SubjectModel(), 10, ss)
    assert np.array_equal(a.chest, b.chest)
    c = _chest_chunk()
    assert augment_training_chunk(c, seed=ss) == augment_training_chunk(c, seed=ss)


def test_noiseless_chest_is_scaled_finger():
    s = SubjectModel(chest_noise_level=0.0, chest_delay_ms=0.0, amplitude=(1.0, 0.8, 1.2), chest_gain=(0.9, 1.1, 1.0))
    rec = synth_pair(s, 10, 1)
    for c in range(3):
        ratio = (CHEST_SCALE * s.chest_gain[c]) / (FINGER_SCALE * s.amplitude[c])
        assert np.allclose(rec.chest[c], ratio * rec.finger[c], rtol=0, atol=1e-9)


def test_chest_delay_shifts_the_beats():
    s = SubjectModel(chest_noise_level=0.0, chest_delay_ms=100.0)
    rec = synth_pair(s, 10, 1)
    k = np.argmax(np.correlate(rec.chest[2], rec.finger[2], mode="full")) - (rec.finger.shape[1] - 1)
    assert k == 40


def test_beat_count_over_a_minute():
    counts = [synth_pair(SubjectModel(base_hr=72, hr_variability=3.0), 60, seed).beat_times.size for seed in range(10)]
    assert abs(np.mean(counts) - 72) <= 2
    assert max(abs(c - 72) for c in counts) <= 6


def test_beat_times_match_instantaneous_rate():
    rng = np.random.default_rng(0)
    beats, periods = beat_train(30.0, 70.0, 2.0, rng)
    assert np.allclose(np.diff(beats), periods[:-1])
    inside = beats[(beats >= 5) & (beats < 10)]
    assert pr_from_times(inside) == pytest.approx(60 / periods[(beats >= 5) & (beats < 10)][:-1].mean(), abs=1e-9)


def test_subject_bounds_are_enforced():
    with pytest.raises(ValueError):
        SubjectModel(base_hr=130)
    with pytest.raises(ValueError):
        SubjectModel(chest_delay_ms=250)
    with pytest.raises(ValueError):
        synth_pair(SubjectModel(), 4.0, 0)


def test_subject_json_round_trip():
    s = SubjectModel(base_hr=64.5, amplitude=(1.0, 0.9, 1.1))
    assert SubjectModel.from_json(s.to_json()) == s


# -- augmentation --------------------------------------------------------------


def _chest_chunk():
    rec = synth_pair(SubjectModel(), 10, 2)
    return Chunk(rec.chest[:, 1200:3200], FS, "chest", "s", 0)


def test_augmentation_noise_is_band_limited():
    c = _chest_chunk()
    noisy = augment_training_chunk(c, 50.0, seed=3)
    diff = noisy.data.astype(float) - c.data.astype(float)
    for d in diff:
        psd = welch_psd(d)
        assert psd.power[psd.freqs >= 100.0].max() < 0.01 * psd.power.max()
        assert d.std() > 10


def test_augmentation_is_reproducible():
    c = _chest_chunk()
    assert augment_training_chunk(c, seed=4) == augment_training_chunk(c, seed=4)
    assert augment_training_chunk(c, seed=4) != augment_training_chunk(c, seed=5)


def test_augmentation_doubles_the_count():
    chunks = [_chest_chunk().replace(chunk_index=i) for i in range(5)]
    out = augment_training_set(chunks, seed=1)
    assert len(out) == 10
    assert out[:5] == chunks


# -- cohort --------------------------------------------------------------------


def test_default_cohort_shape():
    cohort = synthetic_cohort(duration_s=10.0)
    assert len(cohort.subjects) == 12 and len(cohort.recordings) == 36
    split = {s: sorted(k for k, v in cohort.assignment.items() if v == s) for s in ("train", "validation", "test")}
    assert [len(split[s]) for s in ("train", "validation", "test")] == [6, 3, 3]


def test_ground_truth_rate_matches_generator(small_dataset):
    for p in small_dataset.pairs:
        if p.beat_times and len(p.beat_times) >= 2:
            assert p.ground_truth_hr == pytest.approx(pr_from_times(p.beat_times), abs=1e-9)
            assert 40 <= p.ground_truth_hr <= 130
