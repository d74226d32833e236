"""Probabilistic streamline tractography over SH FOD volumes ("iFOD2-lite").

First-order simplification of FOD-amplitude tractography: at each step a
direction is rejection-sampled from the clamped FOD amplitude restricted to
a cone around the previous direction, and the walk advances one fixed step.
Tracking is bidirectional from every seed and deterministic for a given
seed: every streamline draws from its own counter-based rng stream.

Coordinates are mm; the center of voxel (i, j, k) sits at
((i + 0.5) * voxel_size, ...).  SH coefficients are interpolated
trilinearly, which is exact for the amplitude because evaluation is linear
in the coefficients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import sh

TERMINATION_REASONS = ("cutoff", "angle", "mask-exit", "max-length")

MAX_REJECTIONS = 200
ENVELOPE_SAFETY = 1.5
_CHUNK = 32


@dataclass(frozen=True)
class TrackingConfig:
    step_size: float
    max_angle_deg: float = 45.0
    cutoff: float = 0.1
    min_length: float = 0.0
    max_length: float = 100.0
    seeds_per_voxel: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not 0 < self.max_angle_deg <= 90:
            raise ValueError("max_angle_deg must lie in (0, 90]")
        if self.cutoff < 0:
            raise ValueError("cutoff must be nonnegative")
        if self.min_length < 0 or self.max_length <= 0:
            raise ValueError("lengths must be nonnegative, max_length positive")
        if self.seeds_per_voxel < 1:
            raise ValueError("seeds_per_voxel must be at least 1")


def default_config(voxel_size: float = 1.0, **overrides) -> TrackingConfig:
    """Default configuration: step = half a voxel."""
    overrides.setdefault("step_size", 0.5 * voxel_size)
    return TrackingConfig(**overrides)


@dataclass
class Streamline:
    points: np.ndarray  # (n, 3) mm
    reason: str

    @property
    def length(self) -> float:
        if self.points.shape[0] < 2:
            return 0.0
        return float(np.sum(np.linalg.norm(np.diff(self.points, axis=0), axis=1)))


def trilinear_coeffs(volume: np.ndarray, pos_mm: np.ndarray,
                     voxel_size: float) -> np.ndarray:
    """Trilinear interpolation of a (X, Y, Z, K) volume at a point in mm.

    Samples live at voxel centers; everything outside the volume reads as
    zero.
    """
    u = np.asarray(pos_mm, dtype=np.float64) / voxel_size - 0.5
    base = np.floor(u).astype(int)
    frac = u - base
    out = np.zeros(volume.shape[3])
    shape = volume.shape[:3]
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = base + off
        if np.any(idx < 0) or np.any(idx >= shape):
            continue
        w = np.prod(np.where(off == 1, frac, 1.0 - frac))
        if w:
            out += w * volume[idx[0], idx[1], idx[2]]
    return out


def _orthobasis(u: np.ndarray):
    helper = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(u, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(u, e1)


def _cone_probes(prev: np.ndarray | None, cos_min: float) -> np.ndarray:
    if prev is None:
        return sh.antipodal_fibonacci(64)
    e1, e2 = _orthobasis(prev)
    angles = np.arccos(cos_min) * np.array([1 / 3, 2 / 3, 1.0])
    phis = np.linspace(0.0, 2 * np.pi, 8, endpoint=False)
    dirs = [prev]
    for a in angles:
        ring = (np.cos(a) * prev[None, :]
                + np.sin(a) * (np.cos(phis)[:, None] * e1
                               + np.sin(phis)[:, None] * e2))
        dirs.append(ring)
    return np.concatenate([dirs[0][None, :], *dirs[1:]], axis=0)


def _candidates(prev: np.ndarray | None, cos_min: float, n: int,
                rng: np.random.Generator) -> np.ndarray:
    c = rng.uniform(cos_min, 1.0, size=n)
    phi = rng.uniform(0.0, 2 * np.pi, size=n)
    s = np.sqrt(np.maximum(1.0 - c * c, 0.0))
    if prev is None:
        axis = np.array([0.0, 0.0, 1.0])
    else:
        axis = prev
    e1, e2 = _orthobasis(axis)
    return (c[:, None] * axis[None, :]
            + (s * np.cos(phi))[:, None] * e1[None, :]
            + (s * np.sin(phi))[:, None] * e2[None, :])


def _sample(coeffs: np.ndarray, prev: np.ndarray | None, cfg: TrackingConfig,
            rng: np.random.Generator):
    """Returns (direction, None) or (None, reason in {'cutoff', 'angle'})."""
    lmax = sh.lmax_for(coeffs.shape[0])
    cos_min = -1.0 if prev is None else float(np.cos(np.radians(cfg.max_angle_deg)))
    probes = _cone_probes(prev, cos_min)
    first = _candidates(prev, cos_min, _CHUNK, rng)
    amps = sh.sh_basis(np.concatenate([probes, first]), lmax) @ coeffs
    cone_max = float(np.max(amps[:probes.shape[0]]))
    if cone_max < cfg.cutoff:
        return None, "cutoff"
    envelope = ENVELOPE_SAFETY * cone_max
    cand_amps = np.maximum(amps[probes.shape[0]:], 0.0)
    cand = first
    rejected = 0
    while True:
        # sub-cutoff amplitudes are never accepted, so the sampled density
        # is the FOD restricted to its supra-threshold support in the cone
        accept = ((cand_amps >= cfg.cutoff)
                  & (rng.uniform(0.0, envelope, size=cand.shape[0]) < cand_amps))
        for i in range(cand.shape[0]):
            if accept[i]:
                return cand[i], None
            rejected += 1
            if rejected >= MAX_REJECTIONS:
                return None, "angle"
        cand = _candidates(prev, cos_min, _CHUNK, rng)
        cand_amps = np.maximum(sh.sh_basis(cand, lmax) @ coeffs, 0.0)


def sample_direction(coeffs: np.ndarray, prev: np.ndarray | None,
                     cfg: TrackingConfig,
                     rng: np.random.Generator) -> np.ndarray | None:
    """Draw one direction from the clamped FOD restricted to the turn cone.

    The density is the FOD amplitude over the part of the cone where it
    clears the cutoff; sub-threshold directions are never accepted.  None
    signals termination: the cone's amplitude maximum fell below the
    cutoff, or 200 candidates were rejected.  With prev None the whole
    sphere is admissible (used for the seed direction).
    """
    direction, _ = _sample(coeffs, prev, cfg, rng)
    return direction


def _inside(mask: np.ndarray, pos_mm: np.ndarray, voxel_size: float) -> bool:
    idx = np.floor(np.asarray(pos_mm) / voxel_size).astype(int)
    if np.any(idx < 0) or np.any(idx >= mask.shape):
        return False
    return bool(mask[idx[0], idx[1], idx[2]])


def _walk(volume, mask, start, first_dir, cfg, voxel_size, max_steps, rng):
    """One branch: returns (points after the seed, termination reason)."""
    points = []
    pos = np.asarray(start, dtype=np.float64)
    direction = first_dir
    while True:
        if len(points) >= max_steps:
            return points, "max-length"
        nxt = pos + cfg.step_size * direction
        if not _inside(mask, nxt, voxel_size):
            return points, "mask-exit"
        points.append(nxt)
        pos = nxt
        coeffs = trilinear_coeffs(volume, pos, voxel_size)
        direction, reason = _sample(coeffs, direction, cfg, rng)
        if direction is None:
            return points, reason


def track(volume: np.ndarray, mask: np.ndarray, cfg: TrackingConfig,
          voxel_size: float = 1.0) -> list:
    """Bidirectional tracking from uniform random seeds in every masked voxel.

    Each seed's streamline is the reverse branch reversed, the seed point,
    then the forward branch; the recorded reason is the forward branch's.
    Each branch may run to half the length budget so the merged streamline
    respects max_length.  Streamlines shorter than min_length are dropped.
    """
    volume = np.asarray(volume, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if volume.ndim != 4 or volume.shape[:3] != mask.shape:
        raise ValueError("volume must be (X, Y, Z, K) matching the mask")
    sh.lmax_for(volume.shape[3])
    if not mask.any():
        raise ValueError("empty mask")

    voxels = np.argwhere(mask)
    seed_rng = np.random.default_rng([cfg.seed, 0x5EED])
    jitter = seed_rng.random((voxels.shape[0], cfg.seeds_per_voxel, 3))
    seeds = (voxels[:, None, :] + jitter) * voxel_size
    seeds = seeds.reshape(-1, 3)

    branch_steps = max(int(np.floor(cfg.max_length / cfg.step_size / 2.0)), 1)
    out = []
    for i, seed in enumerate(seeds):
        rng = np.random.default_rng([cfg.seed, i])
        coeffs = trilinear_coeffs(volume, seed, voxel_size)
        first, reason = _sample(coeffs, None, cfg, rng)
        if first is None:
            line = Streamline(points=seed[None, :].copy(), reason=reason)
        else:
            fwd, fwd_reason = _walk(volume, mask, seed, first, cfg,
                                    voxel_size, branch_steps, rng)
            bwd, _ = _walk(volume, mask, seed, -first, cfg,
                           voxel_size, branch_steps, rng)
            pts = np.array(bwd[::-1] + [seed] + fwd)
            line = Streamline(points=pts, reason=fwd_reason)
        if line.length >= cfg.min_length:
            out.append(line)
    return out


@dataclass
class TractogramStats:
    count: int
    mean_length: float
    median_length: float
    coverage: float
    terminations: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "count": self.count,
            "mean_length": self.mean_length,
            "median_length": self.median_length,
            "coverage": self.coverage,
            "terminations": self.terminations,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=2) + "\n"


def tract_stats(tracts: list, mask: np.ndarray,
                voxel_size: float = 1.0) -> TractogramStats:
    """Counts, length moments, masked-voxel coverage, termination histogram."""
    mask = np.asarray(mask, dtype=bool)
    n_masked = int(mask.sum())
    terminations = {r: 0 for r in TERMINATION_REASONS}
    visited = set()
    lengths = []
    for line in tracts:
        terminations[line.reason] += 1
        lengths.append(line.length)
        idx = np.floor(line.points / voxel_size).astype(int)
        ok = np.all((idx >= 0) & (idx < np.array(mask.shape)), axis=1)
        for i, j, k in idx[ok]:
            if mask[i, j, k]:
                visited.add((int(i), int(j), int(k)))
    if lengths:
        mean_len, median_len = float(np.mean(lengths)), float(np.median(lengths))
    else:
        mean_len = median_len = 0.0
    coverage = len(visited) / n_masked if n_masked else 0.0
    return TractogramStats(count=len(tracts), mean_length=mean_len,
                           median_length=median_len, coverage=coverage,
                           terminations=terminations)
