"""Cardiac sequences, label normalization, circular windowing and the LVQD
binary dataset format."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, LabelError

NUM_FRAMES = 20
IMAGE_SIZE = 80
PIXELS = IMAGE_SIZE * IMAGE_SIZE
NUM_INDICES = 11
SPACING_RANGE = (0.5, 2.5)

INDEX_NAMES = (
    "area_cav", "area_myo", "dim1", "dim2", "dim3",
    "rwt_IS", "rwt_I", "rwt_IL", "rwt_AL", "rwt_A", "rwt_AS",
)
AREA_SLICE = slice(0, 2)
LENGTH_SLICE = slice(2, 11)
DIASTOLE, SYSTOLE = 0, 1

# normalization divisors: areas by pixel count, lengths by image side
NORMALIZER = np.array([PIXELS] * 2 + [IMAGE_SIZE] * 9, dtype=np.float64)

MAGIC = b"LVQD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")
FRAME_DTYPE = np.dtype([
    ("image", "<f4", (IMAGE_SIZE, IMAGE_SIZE)),
    ("labels", "<f4", (NUM_INDICES,)),
    ("phase", "u1"),
    ("pad", "u1", (3,)),
])
SUBJECT_DTYPE = np.dtype([
    ("subject_id", "<u4"),
    ("pixel_spacing", "<f4"),
    ("frames", FRAME_DTYPE, (NUM_FRAMES,)),
])
HEADER_SIZE = _HEADER.size
RECORD_SIZE = SUBJECT_DTYPE.itemsize


@dataclass(frozen=True)
class FrameLabels:
    """Normalized indices of one frame plus its cardiac phase."""

    area_cav: float
    area_myo: float
    dim1: float
    dim2: float
    dim3: float
    rwt1: float  # IS
    rwt2: float  # I
    rwt3: float  # IL
    rwt4: float  # AL
    rwt5: float  # A
    rwt6: float  # AS
    phase: int

    @classmethod
    def from_array(cls, values: Sequence[float], phase: int) -> "FrameLabels":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (NUM_INDICES,):
            raise LabelError(f"expected {NUM_INDICES} label values, got {values.shape}")
        return cls(*(float(v) for v in values), int(phase))

    def as_array(self) -> np.ndarray:
        return np.array([self.area_cav, self.area_myo, self.dim1, self.dim2, self.dim3,
                         self.rwt1, self.rwt2, self.rwt3, self.rwt4, self.rwt5, self.rwt6])


@dataclass
class CardiacSequence:
    subject_id: int
    pixel_spacing: float
    frames: np.ndarray  # (20, 80, 80) float32 in [0, 1]
    labels: np.ndarray  # (20, 11) float32, normalized
    phase: np.ndarray   # (20,) uint8, 0 = diastole, 1 = systole

    def __post_init__(self):
        if self.frames.shape != (NUM_FRAMES, IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"frames must be {(NUM_FRAMES, IMAGE_SIZE, IMAGE_SIZE)}, got {self.frames.shape}")
        if self.labels.shape != (NUM_FRAMES, NUM_INDICES) or self.phase.shape != (NUM_FRAMES,):
            raise ValueError("labels must be (20, 11) and phase (20,)")
        lo, hi = SPACING_RANGE
        if not lo <= self.pixel_spacing <= hi:
            raise ValueError(f"pixel spacing {self.pixel_spacing} outside [{lo}, {hi}] mm/pixel")

    def frame_labels(self, index: int) -> FrameLabels:
        return FrameLabels.from_array(self.labels[index], self.phase[index])


@dataclass
class SliceWindow:
    frames: np.ndarray  # (kappa, 80, 80)
    center_label: FrameLabels
    subject_id: int
    center_index: int
    frame_indices: tuple[int, ...]


# --------------------------------------------------------------------------
# labels
# --------------------------------------------------------------------------

def normalize_labels(raw) -> np.ndarray:
    """Pixel-unit indices (px^2 areas, px lengths) -> normalized values in [0, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != NUM_INDICES:
        raise LabelError(f"last axis must hold {NUM_INDICES} indices, got {raw.shape}")
    norm = raw / NORMALIZER
    if np.any(norm < 0) or np.any(norm > 1) or not np.all(np.isfinite(norm)):
        raise LabelError("normalized label outside [0, 1]")
    return norm


def denormalize(labels, pixel_spacing) -> np.ndarray:
    """Normalized indices -> physical units (mm^2 areas, mm lengths).

    ``pixel_spacing`` may be a scalar or broadcast against the leading axes.
    """
    labels = np.asarray(labels, dtype=np.float64)
    spacing = np.asarray(pixel_spacing, dtype=np.float64)[..., None]
    scale = np.where(np.arange(NUM_INDICES) < 2, spacing ** 2, spacing)
    return labels * NORMALIZER * scale


def to_pixel_units(labels) -> np.ndarray:
    return np.asarray(labels, dtype=np.float64) * NORMALIZER


# --------------------------------------------------------------------------
# circular windowing
# --------------------------------------------------------------------------

def window_indices(center: int, kappa: int, length: int = NUM_FRAMES) -> tuple[int, ...]:
    if kappa < 1 or kappa % 2 == 0:
        raise ValueError(f"kappa must be a positive odd number, got {kappa}")
    if not 0 <= center < length:
        raise IndexError(f"center {center} outside [0, {length})")
    half = kappa // 2
    return tuple((center - half + i) % length for i in range(kappa))


def circular_window(seq: CardiacSequence, center: int, kappa: int) -> SliceWindow:
    idx = window_indices(center, kappa)
    return SliceWindow(seq.frames[list(idx)], seq.frame_labels(center), seq.subject_id, center, idx)


def expand_dataset(sequences: Iterable[CardiacSequence], kappa: int) -> list[SliceWindow]:
    return [circular_window(seq, c, kappa) for seq in sequences for c in range(NUM_FRAMES)]


class WindowSet:
    """Array-backed view of every circular window of a list of sequences.

    Frames are stored once per subject and gathered per batch, so memory does
    not grow with kappa.
    """

    def __init__(self, sequences: Sequence[CardiacSequence], kappa: int):
        if not sequences:
            self.frames = np.zeros((0, NUM_FRAMES, IMAGE_SIZE, IMAGE_SIZE), np.float32)
        else:
            self.frames = np.stack([s.frames for s in sequences]).astype(np.float32, copy=False)
        self.kappa = kappa
        self.subject_ids = np.array([s.subject_id for s in sequences], dtype=np.int64)
        self.spacing = np.array([s.pixel_spacing for s in sequences], dtype=np.float64)
        self._labels = np.array([s.labels for s in sequences], dtype=np.float32).reshape(-1, NUM_FRAMES, NUM_INDICES)
        self._phase = np.array([s.phase for s in sequences], dtype=np.int64).reshape(-1, NUM_FRAMES)
        self.subject_index = np.repeat(np.arange(len(sequences)), NUM_FRAMES)
        self.center = np.tile(np.arange(NUM_FRAMES), len(sequences))
        offsets = np.arange(kappa) - kappa // 2
        self.frame_index = (self.center[:, None] + offsets[None, :]) % NUM_FRAMES

    def __len__(self) -> int:
        return len(self.center)

    @property
    def labels(self) -> np.ndarray:
        return self._labels[self.subject_index, self.center]

    @property
    def phase(self) -> np.ndarray:
        return self._phase[self.subject_index, self.center]

    @property
    def window_spacing(self) -> np.ndarray:
        return self.spacing[self.subject_index]

    def inputs(self, rows) -> np.ndarray:
        rows = np.asarray(rows)
        return self.frames[self.subject_index[rows][:, None], self.frame_index[rows]]

    def batch(self, rows):
        rows = np.asarray(rows)
        return self.inputs(rows), self.labels[rows], self.phase[rows]


# --------------------------------------------------------------------------
# LVQD file format
# --------------------------------------------------------------------------

def encode_dataset(sequences: Sequence[CardiacSequence]) -> bytes:
    records = np.zeros(len(sequences), dtype=SUBJECT_DTYPE)
    for i, seq in enumerate(sequences):
        records["subject_id"][i] = seq.subject_id
        records["pixel_spacing"][i] = seq.pixel_spacing
        records["frames"]["image"][i] = seq.frames
        records["frames"]["labels"][i] = seq.labels
        records["frames"]["phase"][i] = seq.phase
    header = _HEADER.pack(MAGIC, VERSION, len(sequences), NUM_FRAMES, IMAGE_SIZE, IMAGE_SIZE)
    return header + records.tobytes()


def decode_dataset(blob: bytes) -> list[CardiacSequence]:
    if len(blob) < HEADER_SIZE:
        raise FormatError(f"file too short for LVQD header ({len(blob)} bytes)", len(blob))
    magic, version, count, frames, height, width = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported LVQD version {version}", 4)
    if (frames, height, width) != (NUM_FRAMES, IMAGE_SIZE, IMAGE_SIZE):
        raise FormatError(f"unsupported geometry frames={frames} size={height}x{width}", 12)
    expected = HEADER_SIZE + count * RECORD_SIZE
    if len(blob) < expected:
        full = (len(blob) - HEADER_SIZE) // RECORD_SIZE
        raise FormatError(f"truncated: {count} subjects declared, data ends inside record {full}", len(blob))
    if len(blob) > expected:
        raise FormatError(f"{len(blob) - expected} trailing bytes after the last record", expected)
    records = np.frombuffer(blob, dtype=SUBJECT_DTYPE, count=count, offset=HEADER_SIZE)
    pad_bad = np.nonzero(records["frames"]["pad"].reshape(count, -1).any(axis=1))[0]
    if pad_bad.size:
        raise FormatError("nonzero padding bytes", HEADER_SIZE + int(pad_bad[0]) * RECORD_SIZE)
    sequences = []
    for i, rec in enumerate(records):
        try:
            sequences.append(CardiacSequence(
                subject_id=int(rec["subject_id"]),
                pixel_spacing=float(rec["pixel_spacing"]),
                frames=np.array(rec["frames"]["image"], dtype=np.float32),
                labels=np.array(rec["frames"]["labels"], dtype=np.float32),
                phase=np.array(rec["frames"]["phase"], dtype=np.uint8),
            ))
        except ValueError as exc:
            raise FormatError(f"invalid subject record: {exc}", HEADER_SIZE + i * RECORD_SIZE) from None
    return sequences


def save_dataset(sequences: Sequence[CardiacSequence], path) -> None:
    Path(path).write_bytes(encode_dataset(sequences))


def load_dataset(path) -> list[CardiacSequence]:
    return decode_dataset(Path(path).read_bytes())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read(HEADER_SIZE)
    if len(blob) < HEADER_SIZE:
        raise FormatError("file too short for LVQD header", len(blob))
    magic, version, count, frames, height, width = _HEADER.unpack(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    return {"version": version, "subjects": count, "frames": frames, "height": height, "width": width}
