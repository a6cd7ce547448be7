"""Synthetic short-axis cine phantoms with analytic ground truth.

Each subject is an elliptical blood pool surrounded by a myocardial ring.
The ring's radial thickness is specified at the centres of the six sectors
(IS, I, IL, AL, A, AS, 60 degrees apart) and interpolated linearly in angle
between them. Over the 20-frame cycle the cavity contracts and relaxes while
the wall thickens and thins; the timing of end-diastole is random per
subject, so the phase of a single frame is ambiguous without its neighbours.

Geometry uses a y-up frame centred on the ventricle: angle 0 points along
the image columns (+x) and angles increase counter-clockwise on screen.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import (
    DIASTOLE,
    IMAGE_SIZE,
    NUM_FRAMES,
    SYSTOLE,
    CardiacSequence,
    normalize_labels,
)

BACKGROUND, MYOCARDIUM, CAVITY = 0.2, 0.6, 0.9
NOISE_SIGMA = 0.05
AREA_TOLERANCE = 0.02  # max relative gap between pixel-counted and analytic areas
SPACING_MM = (0.6836, 2.0833)
MIN_SEMI_AXIS = 10.0

#: sector centre angles in radians, in label order IS, I, IL, AL, A, AS
SECTOR_ANGLES = np.deg2rad(210.0 + 60.0 * np.arange(6)) % (2 * np.pi)
#: directions of the three cavity diameters: IS-AL, I-A, IL-AS axes
DIMENSION_ANGLES = np.deg2rad([30.0, 90.0, 150.0])

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(64)


@dataclass(frozen=True)
class SubjectParams:
    center: tuple[float, float]  # (x, y) in pixel coordinates, rows growing downwards
    semi_axes: tuple[float, float]  # cavity semi-axes at end-diastole (px)
    orientation: float  # rotation of the first semi-axis (rad)
    area_ratio: float  # end-diastolic / end-systolic cavity area
    thickness: tuple[float, ...]  # six end-diastolic sector thicknesses (px)
    thickening: float  # relative wall thickening at end-systole
    ed_time: float  # frame position of end-diastole
    systole_frames: float  # duration of contraction in frames
    pixel_spacing: float


def sample_params(rng: np.random.Generator) -> SubjectParams:
    # End-systolic minor semi-axis stays >= MIN_SEMI_AXIS so pixel counting
    # tracks the analytic areas closely at every frame.
    area_ratio = rng.uniform(1.5, 3.0)
    aspect = rng.uniform(0.75, 1.0)
    a_lo = max(12.0, MIN_SEMI_AXIS * np.sqrt(area_ratio) / aspect)
    a0 = rng.uniform(a_lo, max(a_lo, 24.0))
    return SubjectParams(
        center=(IMAGE_SIZE / 2 + rng.uniform(-2, 2), IMAGE_SIZE / 2 + rng.uniform(-2, 2)),
        semi_axes=(a0, a0 * aspect),
        orientation=rng.uniform(0, np.pi),
        area_ratio=area_ratio,
        thickness=tuple(rng.uniform(3.5, 6.5, size=6)),
        thickening=rng.uniform(0.3, 0.6),
        ed_time=rng.uniform(0, NUM_FRAMES),
        systole_frames=rng.uniform(6.0, 9.0),
        pixel_spacing=rng.uniform(*SPACING_MM),
    )


def contraction(t, p: SubjectParams) -> np.ndarray:
    """Contraction level in [0, 1]: 0 at end-diastole, 1 at end-systole."""
    u = np.mod(np.asarray(t, dtype=np.float64) - p.ed_time, NUM_FRAMES)
    ds = p.systole_frames
    rising = 0.5 * (1 - np.cos(np.pi * u / ds))
    falling = 0.5 * (1 + np.cos(np.pi * (u - ds) / (NUM_FRAMES - ds)))
    return np.where(u < ds, rising, falling)


def cavity_axes(c, p: SubjectParams) -> tuple[np.ndarray, np.ndarray]:
    scale = np.sqrt(1 - (1 - 1 / p.area_ratio) * np.asarray(c))
    return p.semi_axes[0] * scale, p.semi_axes[1] * scale


def cavity_radius(theta, a, b, orientation) -> np.ndarray:
    phi = np.asarray(theta) - orientation
    return a * b / np.sqrt((b * np.cos(phi)) ** 2 + (a * np.sin(phi)) ** 2)


def wall_thickness(theta, sector_thickness) -> np.ndarray:
    """Periodic piecewise-linear interpolation of the six sector values."""
    theta = np.mod(np.asarray(theta, dtype=np.float64), 2 * np.pi)
    order = np.argsort(SECTOR_ANGLES)
    xs = SECTOR_ANGLES[order]
    ys = np.asarray(sector_thickness, dtype=np.float64)[order]
    xs = np.concatenate([[xs[-1] - 2 * np.pi], xs, [xs[0] + 2 * np.pi]])
    ys = np.concatenate([[ys[-1]], ys, [ys[0]]])
    return np.interp(theta, xs, ys)


def frame_geometry(c: float, p: SubjectParams):
    a, b = cavity_axes(c, p)
    w = np.asarray(p.thickness) * (1 + p.thickening * c)
    return float(a), float(b), w


def _integrate_over_sectors(fn) -> float:
    """Integral over [0, 2pi) split at the sector centres (kinks of the wall profile)."""
    edges = np.sort(np.concatenate([SECTOR_ANGLES, [SECTOR_ANGLES.min() + 2 * np.pi]]))
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        half = 0.5 * (hi - lo)
        nodes = lo + half * (_GL_NODES + 1)
        total += half * float(np.sum(_GL_WEIGHTS * fn(nodes)))
    return total


def analytic_labels(c: float, p: SubjectParams) -> np.ndarray:
    """Pixel-unit indices: cavity area, myocardium area, 3 dims, 6 RWT."""
    a, b, w = frame_geometry(c, p)
    cavity_area = np.pi * a * b

    def outer_sq(theta):
        r = cavity_radius(theta, a, b, p.orientation) + wall_thickness(theta, w)
        return 0.5 * r * r

    outer_area = _integrate_over_sectors(outer_sq)
    dims = 2 * cavity_radius(DIMENSION_ANGLES, a, b, p.orientation)
    return np.concatenate([[cavity_area, outer_area - cavity_area], dims, w])


def pixel_polar(p: SubjectParams, size: int = IMAGE_SIZE):
    """Radius and angle of every pixel centre relative to the ventricle centre."""
    rows, cols = np.mgrid[0:size, 0:size]
    dx = cols + 0.5 - p.center[0]
    dy = -(rows + 0.5 - p.center[1])
    return np.hypot(dx, dy), np.arctan2(dy, dx)


def rasterize(c: float, p: SubjectParams, rho=None, theta=None):
    """Boolean (cavity, myocardium) masks sampled at pixel centres."""
    if rho is None:
        rho, theta = pixel_polar(p)
    a, b, w = frame_geometry(c, p)
    r_in = cavity_radius(theta, a, b, p.orientation)
    r_out = r_in + wall_thickness(theta, w)
    cavity = rho <= r_in
    myo = (rho > r_in) & (rho <= r_out)
    return cavity, myo


def phase_from_areas(areas) -> np.ndarray:
    """Systole where the cavity shrinks into the next frame (circularly).

    Frames with no change inherit the previous frame's phase.
    """
    areas = np.asarray(areas, dtype=np.float64)
    n = len(areas)
    diff = np.roll(areas, -1) - areas
    phase = np.full(n, -1, dtype=np.int64)
    phase[diff < 0] = SYSTOLE
    phase[diff > 0] = DIASTOLE
    if np.all(phase < 0):
        return np.full(n, DIASTOLE, dtype=np.uint8)
    start = int(np.nonzero(phase >= 0)[0][0])
    for k in range(1, n + 1):
        i = (start + k) % n
        if phase[i] < 0:
            phase[i] = phase[i - 1]
    return phase.astype(np.uint8)


def count_runs(phase) -> int:
    """Number of maximal circular runs of equal labels."""
    phase = np.asarray(phase)
    changes = int(np.count_nonzero(phase != np.roll(phase, 1)))
    return max(changes, 1)


def is_valid_cycle(phase, min_frames: int = 4) -> bool:
    phase = np.asarray(phase)
    n_sys = int(np.count_nonzero(phase == SYSTOLE))
    n_dia = len(phase) - n_sys
    return n_sys >= min_frames and n_dia >= min_frames and count_runs(phase) == 2


def render_subject(p: SubjectParams, subject_id: int, rng: np.random.Generator) -> CardiacSequence | None:
    """Render 20 noisy frames.

    Returns None if the cycle is degenerate or any frame's rasterized areas
    drift more than AREA_TOLERANCE from the analytic ones.
    """
    levels = contraction(np.arange(NUM_FRAMES), p)
    raw = np.array([analytic_labels(c, p) for c in levels])
    phase = phase_from_areas(raw[:, 0])
    if not is_valid_cycle(phase):
        return None
    rho, theta = pixel_polar(p)
    frames = np.empty((NUM_FRAMES, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    for t, c in enumerate(levels):
        cavity, myo = rasterize(c, p, rho, theta)
        counted = np.array([cavity.sum(), myo.sum()])
        if np.any(np.abs(counted - raw[t, :2]) > AREA_TOLERANCE * raw[t, :2]):
            return None
        img = np.full((IMAGE_SIZE, IMAGE_SIZE), BACKGROUND)
        img[myo] = MYOCARDIUM
        img[cavity] = CAVITY
        img += rng.normal(0.0, NOISE_SIGMA, size=img.shape)
        frames[t] = np.clip(img, 0.0, 1.0)
    return CardiacSequence(
        subject_id=subject_id,
        pixel_spacing=float(np.float32(p.pixel_spacing)),
        frames=frames,
        labels=normalize_labels(raw).astype(np.float32),
        phase=phase,
    )


def generate_subject(seed: int, subject_id: int, max_tries: int = 100) -> tuple[CardiacSequence, SubjectParams]:
    rng = np.random.default_rng(seed ^ subject_id)
    for _ in range(max_tries):
        params = sample_params(rng)
        seq = render_subject(params, subject_id, rng)
        if seq is not None:
            return seq, params
    raise RuntimeError(f"could not sample a valid cycle for subject {subject_id}")  # pragma: no cover


def generate_phantom(seed: int, num_subjects: int) -> list[CardiacSequence]:
    """``num_subjects`` synthetic subjects with ids 0..N-1.

    Subject ``i`` draws from its own stream seeded with ``seed ^ i``, so
    subjects can be generated independently and in any order.
    """
    if num_subjects < 1:
        raise ValueError("num_subjects must be >= 1")
    return [generate_subject(seed, i)[0] for i in range(num_subjects)]
