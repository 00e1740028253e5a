"""Raw recordings to chunked datasets: filtering, segmentation, cohorts."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import (
    CHUNK_SECONDS,
    FS,
    OVERLAP_SECONDS,
    ChunkPair,
    Dataset,
    DatasetFormatError,
    Series,
    read_array,
    segment_recording,
    split_subjects,
    window_starts,
    write_array,
    write_dataset,
)
from .dsp import filter_array, preprocessing_filter
from .evaluation import pr_from_times
from .synth import SubjectModel, random_subject, synth_pair


@dataclass(frozen=True, eq=False)
class Recording:
    """One raw, simultaneously sampled finger/chest session."""

    finger: np.ndarray
    chest: np.ndarray
    fs: float
    subject_id: str
    recording: int = 0
    ecg: np.ndarray | None = None
    beat_times: np.ndarray | None = None


def preprocess_recording(rec: Recording, first_index: int = 0,
                         window_s: float = CHUNK_SECONDS, overlap_s: float = OVERLAP_SECONDS) -> list[ChunkPair]:
    """Band-pass both sensors and cut them into matched chunk pairs."""
    bp = preprocessing_filter(rec.fs)
    finger = filter_array(bp, rec.finger)
    chest = filter_array(bp, rec.chest)
    fch = segment_recording(finger, rec.fs, window_s, overlap_s, source="finger",
                            subject_id=rec.subject_id, first_index=first_index)
    cch = segment_recording(chest, rec.fs, window_s, overlap_s, source="chest",
                            subject_id=rec.subject_id, first_index=first_index)
    starts = window_starts(finger.shape[1], rec.fs, window_s, overlap_s)
    win = int(round(window_s * rec.fs))
    pairs = []
    for f, c, s in zip(fch, cch, starts):
        ecg = Series(rec.ecg[s : s + win], rec.fs) if rec.ecg is not None else None
        bt = gt = None
        if rec.beat_times is not None:
            t0 = s / rec.fs
            inside = rec.beat_times[(rec.beat_times >= t0) & (rec.beat_times < t0 + window_s)] - t0
            bt = tuple(float(x) for x in inside)
            gt = pr_from_times(inside) if inside.size >= 2 else None
        pairs.append(ChunkPair(f, c, ecg=ecg, ground_truth_hr=gt, beat_times=bt))
    return pairs


def preprocess_recordings(recordings: Iterable[Recording], assignment: dict[str, str]) -> Dataset:
    """Chunk every recording; chunk indices run on per subject across recordings."""
    splits: dict[str, list[ChunkPair]] = {}
    next_index: dict[str, int] = {}
    for rec in recordings:
        first = next_index.get(rec.subject_id, 0)
        pairs = preprocess_recording(rec, first)
        next_index[rec.subject_id] = first + len(pairs)
        splits.setdefault(assignment[rec.subject_id], []).extend(pairs)
    return Dataset(splits)


# -- raw storage -----------------------------------------------------------------


def write_recording(root: Path, rec: Recording) -> None:
    d = Path(root) / rec.subject_id
    d.mkdir(parents=True, exist_ok=True)
    rows = [rec.finger, rec.chest]
    if rec.ecg is not None:
        rows.append(rec.ecg[None, :])
    write_array(d / f"{rec.recording}.f32", np.vstack(rows))
    meta = {
        "fs": rec.fs,
        "subject_id": rec.subject_id,
        "recording": rec.recording,
        "has_ecg": rec.ecg is not None,
        "beat_times": rec.beat_times.tolist() if rec.beat_times is not None else None,
    }
    (d / f"{rec.recording}.json").write_text(json.dumps(meta))


def read_recordings(root: Path | str) -> list[Recording]:
    """Recordings stored as ``<root>/<subject>/<n>.{f32,json}``, in sorted order."""
    root = Path(root)
    recs = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        for meta_path in sorted(sub.glob("*.json"), key=lambda p: int(p.stem)):
            meta = json.loads(meta_path.read_text())
            data = read_array(meta_path.with_suffix(".f32")).astype(np.float64)
            expect = 7 if meta["has_ecg"] else 6
            if data.shape[0] != expect:
                raise DatasetFormatError(f"expected {expect} channels, found {data.shape[0]}",
                                         meta_path.with_suffix(".f32"), 6)
            bt = meta.get("beat_times")
            recs.append(Recording(
                finger=data[:3], chest=data[3:6], fs=float(meta["fs"]),
                subject_id=meta["subject_id"], recording=int(meta["recording"]),
                ecg=data[6] if meta["has_ecg"] else None,
                beat_times=np.asarray(bt) if bt is not None else None,
            ))
    return recs


# -- synthetic cohort --------------------------------------------------------------


@dataclass
class Cohort:
    subjects: dict[str, SubjectModel]
    assignment: dict[str, str]
    recordings: list[Recording]
    seed: int

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "subjects": {k: v.to_json() for k, v in self.subjects.items()},
            "assignment": self.assignment,
        }


def synthetic_cohort(n_subjects: int = 12, recordings: int = 3, duration_s: float = 120.0,
                     seed: int = 0, fs: float = FS,
                     proportions: Sequence[float] = (0.5, 0.25, 0.25)) -> Cohort:
    """Default: 12 subjects split 6/3/3, three 2-minute recordings each."""
    ss = np.random.SeedSequence(seed)
    subj_seed, rec_seed = ss.spawn(2)
    rng = np.random.default_rng(subj_seed)
    ids = [f"s{i:02d}" for i in range(n_subjects)]
    subjects = {sid: random_subject(rng) for sid in ids}
    recs = []
    seeds = rec_seed.spawn(n_subjects * recordings)
    for i, sid in enumerate(ids):
        for r in range(recordings):
            sr = synth_pair(subjects[sid], duration_s, seeds[i * recordings + r], fs)
            recs.append(Recording(sr.finger, sr.chest, fs, sid, r, sr.ecg, sr.beat_times))
    return Cohort(subjects, split_subjects(ids, proportions), recs, seed)


def build_synthetic_dataset(cohort: Cohort) -> Dataset:
    return preprocess_recordings(cohort.recordings, cohort.assignment)


def write_cohort(cohort: Cohort, out: Path | str) -> Dataset:
    """Write raw recordings under ``out/raw`` and the chunked dataset under ``out``."""
    out = Path(out)
    for rec in cohort.recordings:
        write_recording(out / "raw", rec)
    (out / "raw" / "manifest.json").parent.mkdir(parents=True, exist_ok=True)
    (out / "raw" / "manifest.json").write_text(json.dumps(cohort.manifest(), indent=1, sort_keys=True))
    ds = build_synthetic_dataset(cohort)
    write_dataset(ds, out, extra={"synthetic": cohort.manifest()})
    return ds
