"""Signal containers, segmentation, normalization and dataset persistence.

A dataset lives on disk as::

    <root>/dataset.json
    <root>/<split>/<subject>/<chunk_index>.f32      finger + chest samples
    <root>/<split>/<subject>/<chunk_index>.json     sidecar metadata
    <root>/<split>/<subject>/<chunk_index>.ecg.f32  optional ECG
    <root>/<split>/<subject>/<chunk_index>.restored.f32  optional restored chest

Every ``.f32`` file starts with a 12 byte header (magic ``PPGC``, format
version, channel count, sample count) followed by little-endian float32
samples, channel-major.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

FS = 400.0
CHUNK_SECONDS = 5.0
CHUNK_SAMPLES = 2000
OVERLAP_SECONDS = 2.0
CHANNEL_NAMES = ("red", "ir", "green")
GREEN = 2
SOURCES = ("finger", "chest", "restored", "synthetic")
SPLITS = ("train", "validation", "test")
LABELS = ("keep", "leave")

MAGIC = b"PPGC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHI")


class DegenerateChannelError(ValueError):
    """A channel has zero variance and cannot be standardized."""


class EmptyInputError(ValueError):
    """The input is too short for the requested operation."""


class DatasetFormatError(ValueError):
    """A dataset file is malformed.

    Attributes
    ----------
    path : Path
        File in which the problem was found.
    offset : int
        Byte offset at which parsing failed.
    """

    def __init__(self, message: str, path: Path | str, offset: int):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = Path(path)
        self.offset = offset


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Series:
    """A single real-valued channel sampled at ``fs`` Hz."""

    samples: np.ndarray
    fs: float = FS

    def __post_init__(self):
        s = np.array(self.samples, dtype=np.float64)
        if s.ndim != 1 or s.size < 1:
            raise ValueError("series must be one-dimensional and non-empty")
        if not np.all(np.isfinite(s)):
            raise ValueError("series contains non-finite samples")
        if not self.fs > 0:
            raise ValueError(f"sampling rate must be positive, got {self.fs}")
        object.__setattr__(self, "samples", _frozen(s))
        object.__setattr__(self, "fs", float(self.fs))

    def __len__(self) -> int:
        return self.samples.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, Series):
            return NotImplemented
        return self.fs == other.fs and np.array_equal(self.samples, other.samples)

    @property
    def duration(self) -> float:
        return len(self) / self.fs


@dataclass(frozen=True, eq=False)
class Chunk:
    """A three-channel (red, infrared, green) window, stored as float32.

    ``labels`` holds the per-channel keep/leave decision, or ``None`` when the
    chunk has not been labelled.
    """

    data: np.ndarray
    fs: float = FS
    source: str = "synthetic"
    subject_id: str = ""
    chunk_index: int = 0
    labels: tuple[str, str, str] | None = None

    def __post_init__(self):
        d = np.array(self.data, dtype=np.float32)
        if d.ndim != 2 or d.shape[0] != 3:
            raise ValueError(f"chunk must have exactly 3 channels, got shape {d.shape}")
        if d.shape[1] < 1:
            raise ValueError("chunk channels are empty")
        if not np.all(np.isfinite(d)):
            raise ValueError("chunk contains non-finite samples")
        if not self.fs > 0:
            raise ValueError(f"sampling rate must be positive, got {self.fs}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if self.labels is not None:
            labels = tuple(self.labels)
            if len(labels) != 3 or any(lab not in LABELS for lab in labels):
                raise ValueError(f"labels must be 3 of {LABELS}, got {self.labels!r}")
            object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "data", _frozen(d))
        object.__setattr__(self, "fs", float(self.fs))
        object.__setattr__(self, "chunk_index", int(self.chunk_index))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Chunk):
            return NotImplemented
        return (
            self.fs == other.fs
            and self.source == other.source
            and self.subject_id == other.subject_id
            and self.chunk_index == other.chunk_index
            and self.labels == other.labels
            and np.array_equal(self.data, other.data)
        )

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> tuple[Series, Series, Series]:
        return tuple(Series(c, self.fs) for c in self.data)

    def channel(self, i: int) -> Series:
        return Series(self.data[i], self.fs)

    def replace(self, **changes) -> "Chunk":
        kw = dict(
            data=self.data,
            fs=self.fs,
            source=self.source,
            subject_id=self.subject_id,
            chunk_index=self.chunk_index,
            labels=self.labels,
        )
        kw.update(changes)
        return Chunk(**kw)


@dataclass(frozen=True, eq=False)
class ChunkPair:
    """Matched finger/chest chunks, plus optional ECG and beat ground truth.

    ``beat_times`` are the true systolic peak times of the finger signal, in
    seconds from the chunk start (synthetic data only). ``restored`` is filled
    in by the restoration step.
    """

    finger: Chunk
    chest: Chunk
    ecg: Series | None = None
    ground_truth_hr: float | None = None
    beat_times: tuple[float, ...] | None = None
    restored: Chunk | None = None

    def __post_init__(self):
        f, c = self.finger, self.chest
        if (f.subject_id, f.chunk_index) != (c.subject_id, c.chunk_index):
            raise ValueError("finger and chest chunks belong to different windows")
        if f.fs != c.fs:
            raise ValueError("finger and chest sampling rates differ")
        if f.n_samples != c.n_samples:
            raise ValueError("finger and chest chunk lengths differ")
        if self.ecg is not None:
            if self.ecg.fs != f.fs:
                raise ValueError("ECG sampling rate differs from PPG")
            # stored as float32 on disk, like the PPG channels
            object.__setattr__(self, "ecg", Series(self.ecg.samples.astype(np.float32), self.ecg.fs))
        if self.restored is not None and self.restored.n_samples != f.n_samples:
            raise ValueError("restored chunk length differs")
        if self.beat_times is not None:
            object.__setattr__(self, "beat_times", tuple(float(t) for t in self.beat_times))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ChunkPair):
            return NotImplemented
        return (
            self.finger == other.finger
            and self.chest == other.chest
            and self.ecg == other.ecg
            and self.ground_truth_hr == other.ground_truth_hr
            and self.beat_times == other.beat_times
            and self.restored == other.restored
        )

    @property
    def subject_id(self) -> str:
        return self.finger.subject_id

    @property
    def chunk_index(self) -> int:
        return self.finger.chunk_index

    @property
    def chunk_id(self) -> str:
        return f"{self.subject_id}/{self.chunk_index}"

    def replace(self, **changes) -> "ChunkPair":
        kw = dict(
            finger=self.finger,
            chest=self.chest,
            ecg=self.ecg,
            ground_truth_hr=self.ground_truth_hr,
            beat_times=self.beat_times,
            restored=self.restored,
        )
        kw.update(changes)
        return ChunkPair(**kw)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Chunk pairs grouped into subject-disjoint splits.

    Pairs are kept in (subject, chunk index) order, which is also the order
    in which :func:`read_dataset` returns them.
    """

    splits: Mapping[str, tuple[ChunkPair, ...]] = field(default_factory=dict)

    def __post_init__(self):
        splits = {}
        owner: dict[str, str] = {}
        for name, pairs in self.splits.items():
            if name not in SPLITS:
                raise ValueError(f"unknown split {name!r}")
            pairs = tuple(sorted(pairs, key=lambda p: (p.subject_id, p.chunk_index)))
            keys = [(p.subject_id, p.chunk_index) for p in pairs]
            if len(set(keys)) != len(keys):
                raise ValueError(f"split {name!r} holds the same chunk twice")
            for p in pairs:
                prev = owner.setdefault(p.subject_id, name)
                if prev != name:
                    raise ValueError(
                        f"subject {p.subject_id!r} appears in both {prev!r} and {name!r}"
                    )
            splits[name] = pairs
        object.__setattr__(self, "splits", splits)

    def __getitem__(self, split: str) -> tuple[ChunkPair, ...]:
        return self.splits.get(split, ())

    def __len__(self) -> int:
        return sum(len(p) for p in self.splits.values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        mine = {k: v for k, v in self.splits.items() if v}
        theirs = {k: v for k, v in other.splits.items() if v}
        return mine == theirs

    @property
    def pairs(self) -> list[ChunkPair]:
        return [p for s in SPLITS for p in self[s]]

    def split_of(self, subject_id: str) -> str | None:
        for name, pairs in self.splits.items():
            if any(p.subject_id == subject_id for p in pairs):
                return name
        return None

    def subjects(self, split: str) -> list[str]:
        return sorted({p.subject_id for p in self[split]})


def window_starts(n_samples: int, fs: float, window_s: float, overlap_s: float) -> list[int]:
    """Start indices of full windows, using exact integer arithmetic."""
    win = window_s * fs
    stride = (window_s - overlap_s) * fs
    if abs(win - round(win)) > 1e-9 or abs(stride - round(stride)) > 1e-9:
        raise ValueError("window and stride must be whole numbers of samples")
    if not 0 <= overlap_s < window_s:
        raise ValueError("overlap must satisfy 0 <= overlap < window")
    win, stride = int(round(win)), int(round(stride))
    if n_samples < win:
        raise EmptyInputError(f"recording of {n_samples} samples is shorter than one window ({win})")
    count = (n_samples - win) // stride + 1
    return [j * stride for j in range(count)]


def segment_recording(
    data: np.ndarray,
    fs: float = FS,
    window_s: float = CHUNK_SECONDS,
    overlap_s: float = OVERLAP_SECONDS,
    *,
    source: str = "synthetic",
    subject_id: str = "",
    first_index: int = 0,
) -> list[Chunk]:
    """Cut a (3, L) recording into overlapping chunks; the trailing partial window is dropped."""
    data = np.asarray(data)
    if data.ndim != 2 or data.shape[0] != 3:
        raise ValueError(f"recording must be shaped (3, L), got {data.shape}")
    win = int(round(window_s * fs))
    return [
        Chunk(data[:, s : s + win], fs, source, subject_id, first_index + j)
        for j, s in enumerate(window_starts(data.shape[1], fs, window_s, overlap_s))
    ]


def standardize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Z-score along ``axis`` in float64; raises on zero-variance rows."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=axis, keepdims=True)
    sd = x.std(axis=axis, keepdims=True)
    if np.any(sd == 0):
        raise DegenerateChannelError("cannot standardize a constant channel")
    return (x - mu) / sd


def standardize_chunk(c: Chunk) -> Chunk:
    """Per-channel zero-mean, unit-variance copy of ``c``."""
    return c.replace(data=standardize(c.data))


def split_subjects(
    subject_ids: Sequence[str], proportions: Sequence[float] = (0.5, 0.25, 0.25)
) -> dict[str, str]:
    """Assign subjects, in the given order, to train/validation/test blocks."""
    n = len(subject_ids)
    total = float(sum(proportions))
    n_train = int(round(n * proportions[0] / total))
    n_val = int(round(n * proportions[1] / total))
    out = {}
    for i, sid in enumerate(subject_ids):
        out[sid] = "train" if i < n_train else "validation" if i < n_train + n_val else "test"
    return out


# -- persistence -------------------------------------------------------------


def write_array(path: Path, a: np.ndarray) -> None:
    a = np.atleast_2d(np.asarray(a, dtype="<f4"))
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, a.shape[0], a.shape[1]))
        fh.write(np.ascontiguousarray(a).tobytes())


def read_array(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError("truncated header", path, len(raw))
    magic, version, n_ch, n = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", path, 0)
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {version}", path, 4)
    need = _HEADER.size + 4 * n_ch * n
    if len(raw) != need:
        offset = min(len(raw), need)
        raise DatasetFormatError(
            f"payload has {len(raw) - _HEADER.size} bytes, expected {need - _HEADER.size}",
            path,
            offset,
        )
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n_ch, n).astype(np.float32)


def _write_pair(d: Path, p: ChunkPair) -> None:
    stem = d / str(p.chunk_index)
    write_array(stem.with_suffix(".f32"), np.vstack([p.finger.data, p.chest.data]))
    if p.ecg is not None:
        write_array(d / f"{p.chunk_index}.ecg.f32", p.ecg.samples)
    if p.restored is not None:
        write_array(d / f"{p.chunk_index}.restored.f32", p.restored.data)
    meta = {
        "version": FORMAT_VERSION,
        "fs": p.finger.fs,
        "subject_id": p.subject_id,
        "chunk_index": p.chunk_index,
        "finger": {"source": p.finger.source, "labels": p.finger.labels},
        "chest": {"source": p.chest.source, "labels": p.chest.labels},
        "has_ecg": p.ecg is not None,
        "ecg_fs": p.ecg.fs if p.ecg is not None else None,
        "has_restored": p.restored is not None,
        "ground_truth_hr": p.ground_truth_hr,
        "beat_times": list(p.beat_times) if p.beat_times is not None else None,
    }
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=1))


def _read_pair(d: Path, index: str) -> ChunkPair:
    meta_path = d / f"{index}.json"
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"invalid JSON sidecar: {e.msg}", meta_path, e.pos) from e
    try:
        fs, sid, ci = float(meta["fs"]), str(meta["subject_id"]), int(meta["chunk_index"])
        fsrc, csrc = meta["finger"], meta["chest"]
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetFormatError(f"sidecar missing field ({e})", meta_path, 0) from e
    data = read_array(d / f"{index}.f32")
    if data.shape[0] != 6:
        raise DatasetFormatError(f"expected 6 channels, found {data.shape[0]}", d / f"{index}.f32", 6)

    def labels(x):
        return tuple(x) if x is not None else None

    finger = Chunk(data[:3], fs, fsrc["source"], sid, ci, labels(fsrc["labels"]))
    chest = Chunk(data[3:], fs, csrc["source"], sid, ci, labels(csrc["labels"]))
    ecg = None
    if meta.get("has_ecg"):
        ecg = Series(read_array(d / f"{index}.ecg.f32")[0], meta.get("ecg_fs") or fs)
    restored = None
    if meta.get("has_restored"):
        restored = Chunk(read_array(d / f"{index}.restored.f32"), fs, "restored", sid, ci)
    bt = meta.get("beat_times")
    return ChunkPair(
        finger,
        chest,
        ecg=ecg,
        ground_truth_hr=meta.get("ground_truth_hr"),
        beat_times=tuple(bt) if bt is not None else None,
        restored=restored,
    )


def write_dataset(d: Dataset, path: Path | str, extra: Mapping | None = None) -> Path:
    """Write ``d`` under ``path``; ``extra`` is merged into ``dataset.json``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    counts = {}
    for split, pairs in d.splits.items():
        counts[split] = len(pairs)
        for p in pairs:
            sub = root / split / p.subject_id
            sub.mkdir(parents=True, exist_ok=True)
            _write_pair(sub, p)
    manifest = {"format": "ppgrestore-dataset", "version": FORMAT_VERSION, "counts": counts}
    if extra:
        manifest.update(extra)
    (root / "dataset.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root


def _read_split(split_dir: Path) -> list[ChunkPair]:
    pairs = []
    for sub in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        stems = [f.name[: -len(".json")] for f in sub.glob("*.json")]
        for stem in sorted(stems, key=int):
            pairs.append(_read_pair(sub, stem))
    return pairs


def read_dataset(path: Path | str) -> Dataset:
    """Read a dataset root, or a single split directory such as ``data/test``."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"no dataset at {root}")
    present = [s for s in SPLITS if (root / s).is_dir()]
    if present:
        return Dataset({s: _read_split(root / s) for s in present})
    if root.name in SPLITS:
        return Dataset({root.name: _read_split(root)})
    raise FileNotFoundError(f"{root} contains no {'/'.join(SPLITS)} directories")


def read_manifest(path: Path | str) -> dict:
    p = Path(path)
    for cand in (p / "dataset.json", p.parent / "dataset.json"):
        if cand.is_file():
            return json.loads(cand.read_text())
    return {}


def stack_channels(chunks: Iterable[Chunk], channels: Sequence[int] = (0, 1, 2)) -> np.ndarray:
    """(N, C, L) float64 array of the selected channels."""
    return np.stack([np.asarray(c.data[list(channels)], dtype=np.float64) for c in chunks])
