"""Synthetic multi-shell diffusion data with matching ground-truth FODs.

Signals follow a multi-tensor model: each fiber compartment is an
axially symmetric tensor, an optional isotropic compartment models free
water, and Rician noise is applied at a configurable SNR (defined against
the unit b0 amplitude).

Ground-truth FODs place a rotationally symmetric kernel at each fiber
orientation.  The kernel is the square of a band-limited zonal polynomial
fitted to a unit-mass Watson distribution profile, so the truth is
simultaneously band-limited to the working degree, nonnegative everywhere,
and close to the Watson shape; per-degree responses come from the
Funk-Hecke theorem.  Kernel fits are cached per concentration.
"""

from __future__ import annotations

import functools
import hashlib
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import legendre as npleg
from scipy.optimize import minimize

from . import sh

ADULT_TISSUE = {"axial_d": 1.7e-3, "radial_d": 0.3e-3, "iso_d": 3.0e-3}
NEONATAL_TISSUE = {"axial_d": 1.7e-3, "radial_d": 0.6e-3, "iso_d": 3.0e-3}
TISSUE_PRESETS = {"adult": ADULT_TISSUE, "neonatal": NEONATAL_TISSUE}

DEFAULT_KAPPA = 50.0


def substream(seed: int, label: str) -> np.random.Generator:
    """Independent, reproducible random stream named by a label.

    The label is hashed with sha256 (stable across processes, unlike the
    builtin hash) and mixed with the master seed.
    """
    digest = hashlib.sha256(label.encode()).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng([int(seed)] + words)


# ---------------------------------------------------------------------------
# acquisition protocols


@dataclass(frozen=True)
class Shell:
    b: float
    directions: np.ndarray  # (K, 3) unit vectors

    @property
    def n_dirs(self) -> int:
        return self.directions.shape[0]


@dataclass(frozen=True)
class AcquisitionProtocol:
    name: str
    shells: tuple
    n_b0: int

    @property
    def n_dwi(self) -> int:
        return sum(s.n_dirs for s in self.shells)

    @property
    def n_columns(self) -> int:
        return self.n_b0 + self.n_dwi

    def bvals(self) -> np.ndarray:
        parts = [np.zeros(self.n_b0)]
        parts += [np.full(s.n_dirs, s.b) for s in self.shells]
        return np.concatenate(parts)

    def bvecs(self) -> np.ndarray:
        parts = [np.zeros((self.n_b0, 3))]
        parts += [s.directions for s in self.shells]
        return np.concatenate(parts, axis=0)

    def shell_columns(self) -> list:
        """Column index arrays into the flat signal layout, one per shell."""
        out = []
        start = self.n_b0
        for s in self.shells:
            out.append(np.arange(start, start + s.n_dirs))
            start += s.n_dirs
        return out

    def b0_columns(self) -> np.ndarray:
        return np.arange(self.n_b0)


def spread_order(dirs: np.ndarray) -> np.ndarray:
    """Greedy farthest-point ordering under the antipodal angle metric.

    Any prefix of the returned permutation is a well-spread subset, which is
    what makes truncated protocols usable.
    """
    n = dirs.shape[0]
    cos = np.abs(dirs @ dirs.T)
    np.clip(cos, -1.0, 1.0, out=cos)
    start = int(np.argmax(dirs[:, 2]))
    order = [start]
    # min angle to the selected set == max |cos|
    best = cos[start].copy()
    best[start] = np.inf
    for _ in range(n - 1):
        nxt = int(np.argmin(best))
        order.append(nxt)
        np.maximum(best, cos[nxt], out=best)
        best[nxt] = np.inf
    return np.asarray(order)


def shell_directions(count: int, shell_index: int) -> np.ndarray:
    """Hemisphere direction set for one shell, farthest-point ordered.

    Points come from the unique half of an antipodal fibonacci set (twice the
    count), so the antipodal minimum pairwise angle stays large, then each
    shell is given its own fixed rotation so shells do not share directions.
    """
    pts = sh.antipodal_fibonacci(2 * count)[:count]
    rot = sh.rotation_from_axis_angle([1.0, 2.0, 3.0], 0.41 * (shell_index + 1))
    pts = pts @ rot.T
    return pts[spread_order(pts)]


FULL_SHELL_SPEC = ((400.0, 64), (1000.0, 88), (2600.0, 128))
REDUCED30_COUNTS = (19, 26, 38)


@functools.lru_cache(maxsize=4)
def make_protocol(kind: str = "full") -> AcquisitionProtocol:
    """Built-in protocols.

    ``full``: 20 b0 plus shells b = 400 / 1000 / 2600 s/mm^2 with
    64 / 88 / 128 directions.  ``reduced30``: 6 b0 plus the first
    19 / 26 / 38 directions of the same shells (~30% of the full protocol,
    83 weighted columns); prefixes of the spread ordering stay well spread.
    """
    if kind == "full":
        shells = tuple(Shell(b, shell_directions(n, i))
                       for i, (b, n) in enumerate(FULL_SHELL_SPEC))
        return AcquisitionProtocol("full", shells, n_b0=20)
    if kind == "reduced30":
        full = make_protocol("full")
        shells = tuple(Shell(s.b, s.directions[:k])
                       for s, k in zip(full.shells, REDUCED30_COUNTS))
        return AcquisitionProtocol("reduced30", shells, n_b0=6)
    raise ValueError(f"unknown protocol kind: {kind!r}")


# ---------------------------------------------------------------------------
# fiber configurations and signals


@dataclass
class Compartment:
    orientation: np.ndarray
    fraction: float
    axial_d: float = ADULT_TISSUE["axial_d"]
    radial_d: float = ADULT_TISSUE["radial_d"]


@dataclass
class FiberConfig:
    """Per-voxel mixture: fiber compartments plus an isotropic fraction."""

    compartments: list
    iso_fraction: float = 0.0
    iso_d: float = ADULT_TISSUE["iso_d"]

    def validate(self):
        total = self.iso_fraction
        for comp in self.compartments:
            o = np.asarray(comp.orientation, dtype=np.float64)
            if abs(np.linalg.norm(o) - 1.0) > 1e-8:
                raise ValueError("compartment orientations must be unit vectors")
            if comp.fraction < 0:
                raise ValueError("fractions must be nonnegative")
            total += comp.fraction
        if self.iso_fraction < 0:
            raise ValueError("fractions must be nonnegative")
        if abs(total - 1.0) > 1e-8:
            raise ValueError(f"fractions must sum to 1, got {total}")
        return self

    @property
    def fiber_fraction(self) -> float:
        return sum(c.fraction for c in self.compartments)


def _tensor_signal(bval, gdirs, orientation, axial_d, radial_d):
    # g^T D g = rd + (ad - rd) (g . mu)^2 for an axially symmetric tensor
    dot = gdirs @ np.asarray(orientation)
    return np.exp(-bval * (radial_d + (axial_d - radial_d) * dot * dot))


def simulate_signal(fibers: FiberConfig, protocol: AcquisitionProtocol,
                    snr: float | None = None,
                    rng: np.random.Generator | None = None) -> np.ndarray:
    """Noise-free or Rician-noised signal row for one voxel.

    Returns shape (protocol.n_columns,), b0 columns first with unit
    amplitude.  ``snr`` is the b0 signal-to-noise ratio; noise needs ``rng``.
    """
    fibers.validate()
    out = np.empty(protocol.n_columns)
    out[: protocol.n_b0] = 1.0
    for cols, shell in zip(protocol.shell_columns(), protocol.shells):
        acc = np.zeros(shell.n_dirs)
        for comp in fibers.compartments:
            acc += comp.fraction * _tensor_signal(shell.b, shell.directions,
                                                  comp.orientation,
                                                  comp.axial_d, comp.radial_d)
        acc += fibers.iso_fraction * np.exp(-shell.b * fibers.iso_d)
        out[cols] = acc
    if snr is not None:
        if rng is None:
            raise ValueError("rician noise requires an rng")
        out = add_rician_noise(out, snr, rng)
    return out


def add_rician_noise(signal: np.ndarray, snr: float, rng: np.random.Generator) -> np.ndarray:
    """Magnitude of the signal after complex Gaussian noise, sigma = 1/snr."""
    if snr <= 0:
        raise ValueError("snr must be positive")
    sigma = 1.0 / snr
    re = signal + sigma * rng.standard_normal(signal.shape)
    im = sigma * rng.standard_normal(signal.shape)
    return np.sqrt(re * re + im * im)


def rician_mean(signal, sigma: float):
    """Exact expectation of the Rician magnitude.

    E|s + n| = sigma * sqrt(pi/2) * 1F1(-1/2; 1; -s^2 / (2 sigma^2)).
    """
    from scipy.special import hyp1f1

    s = np.asarray(signal, dtype=np.float64)
    return sigma * np.sqrt(np.pi / 2.0) * hyp1f1(-0.5, 1.0, -s * s / (2.0 * sigma * sigma))


# ---------------------------------------------------------------------------
# ground-truth FOD kernel


@dataclass(frozen=True)
class FiberKernel:
    kappa: float
    lmax: int
    root_coeffs: np.ndarray  # Legendre coeffs (even degrees) of the root h
    lambdas: np.ndarray      # Funk-Hecke response per even degree

    def profile(self, t) -> np.ndarray:
        """Kernel value as a function of cos(angle to the fiber axis)."""
        return self._root(t) ** 2

    def _root(self, t):
        full = np.zeros(self.lmax // 2 + 1)
        full[::2] = self.root_coeffs
        return npleg.legval(np.asarray(t, dtype=np.float64), full)


@functools.lru_cache(maxsize=16)
def fiber_kernel(kappa: float = DEFAULT_KAPPA, lmax: int = sh.LMAX_DEFAULT) -> FiberKernel:
    """Nonnegative band-limited zonal kernel matched to Watson(kappa).

    The kernel g = h^2 where h is a zonal polynomial of half the band limit
    whose coefficients minimize the L2 distance between g and the unit-mass
    Watson profile.  Squaring guarantees g >= 0 while keeping g exactly
    band-limited, which a direct SH truncation of the Watson profile would
    not be (it rings negative at practical concentrations).
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    half = lmax // 2
    if half % 2 != 0:
        raise ValueError("lmax must be a multiple of 4 so the root is even")
    tq, wq = np.polynomial.legendre.leggauss(96)

    raw = np.exp(kappa * (tq * tq - 1.0))
    watson = raw / (2.0 * np.pi * np.sum(wq * raw))

    # init: Legendre projection of the normalized sqrt-profile
    f = np.exp(0.5 * kappa * (tq * tq - 1.0))
    f = f / np.sqrt(2.0 * np.pi * np.sum(wq * f * f))
    degrees = np.arange(0, half + 1, 2)
    x0 = np.array([(2 * l + 1) / 2.0 * np.sum(wq * f * npleg.legval(tq, _unit(l)))
                   for l in degrees])

    pl = np.stack([npleg.legval(tq, _unit(l)) for l in degrees])

    def objective(b):
        h = b @ pl
        return float(np.sum(wq * (h * h - watson) ** 2))

    res = minimize(objective, x0, method="Nelder-Mead",
                   options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 4000})
    root = res.x

    h = root @ pl
    g = h * h
    mass = 2.0 * np.pi * np.sum(wq * g)
    g = g / mass
    root = root / np.sqrt(mass)
    lambdas = np.array([2.0 * np.pi * np.sum(wq * g * npleg.legval(tq, _unit(l)))
                        for l in sh.even_degrees(lmax)])
    return FiberKernel(kappa=kappa, lmax=lmax, root_coeffs=root, lambdas=lambdas)


def _unit(l: int) -> np.ndarray:
    out = np.zeros(l + 1)
    out[l] = 1.0
    return out


def ground_truth_fod(fibers: FiberConfig, kappa: float = DEFAULT_KAPPA,
                     lmax: int = sh.LMAX_DEFAULT) -> np.ndarray:
    """SH coefficients of the mixture FOD (fiber compartments only)."""
    fibers.validate()
    kernel = fiber_kernel(kappa, lmax)
    lam = kernel.lambdas[sh.degree_of_coeff(lmax)]
    out = np.zeros(sh.n_coeffs(lmax))
    for comp in fibers.compartments:
        basis = sh.sh_basis(np.asarray(comp.orientation)[None, :], lmax)[0]
        out += comp.fraction * lam * basis
    return out


def ground_truth_fods(orientations, fractions, kappa: float = DEFAULT_KAPPA,
                      lmax: int = sh.LMAX_DEFAULT) -> np.ndarray:
    """Vectorized ground truth: (V, C, 3) orientations, (V, C) fractions
    (zero-padded where a voxel has fewer compartments)."""
    kernel = fiber_kernel(kappa, lmax)
    lam = kernel.lambdas[sh.degree_of_coeff(lmax)]
    v, c, _ = orientations.shape
    out = np.zeros((v, sh.n_coeffs(lmax)))
    for j in range(c):
        active = fractions[:, j] > 0
        if not np.any(active):
            continue
        basis = sh.sh_basis(orientations[active, j], lmax)
        out[active] += fractions[active, j, None] * (lam * basis)
    return out


def fod_volume(phantom, lmax: int = sh.LMAX_DEFAULT) -> np.ndarray:
    """Ground-truth FOD coefficients scattered into an (X, Y, Z, K) volume."""
    fods = ground_truth_fods(phantom.orientations, phantom.fractions,
                             kappa=phantom.kappa, lmax=lmax)
    out = np.zeros(phantom.shape + (sh.n_coeffs(lmax),))
    ix, iy, iz = phantom.voxel_indices.T
    out[ix, iy, iz] = fods
    return out


# ---------------------------------------------------------------------------
# phantoms


@dataclass
class Phantom:
    """Voxel lattice with per-voxel fiber mixtures inside a mask.

    Per-voxel arrays are aligned with ``voxel_indices`` (the masked voxels in
    C order).  ``orientations`` and ``fractions`` are zero-padded to three
    compartments.
    """

    shape: tuple
    voxel_size: float
    mask: np.ndarray
    voxel_indices: np.ndarray   # (V, 3) int
    n_fibers: np.ndarray        # (V,)
    orientations: np.ndarray    # (V, 3, 3)
    fractions: np.ndarray       # (V, 3)
    iso_fractions: np.ndarray   # (V,)
    tissue: str = "adult"
    kappa: float = DEFAULT_KAPPA

    @property
    def n_voxels(self) -> int:
        return self.voxel_indices.shape[0]

    def fiber_config(self, i: int) -> FiberConfig:
        tissue = TISSUE_PRESETS[self.tissue]
        comps = [Compartment(self.orientations[i, j].copy(), float(self.fractions[i, j]),
                             tissue["axial_d"], tissue["radial_d"])
                 for j in range(int(self.n_fibers[i]))]
        return FiberConfig(comps, float(self.iso_fractions[i]), tissue["iso_d"])


def _uniform_direction(rng, n=None):
    size = (n, 3) if n is not None else 3
    v = rng.standard_normal(size)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _rotate_about(axis, v, angle):
    """Rodrigues rotation of v about axis."""
    axis = axis / np.linalg.norm(axis)
    return (v * np.cos(angle) + np.cross(axis, v) * np.sin(angle)
            + axis * (axis @ v) * (1.0 - np.cos(angle)))


def _direction_at_angle(rng, mu, angle):
    """Unit vector at a fixed angle from mu, uniform in azimuth."""
    helper = _uniform_direction(rng)
    while abs(helper @ mu) > 0.999:
        helper = _uniform_direction(rng)
    perp = np.cross(mu, helper)
    perp /= np.linalg.norm(perp)
    tilted = _rotate_about(perp, mu, angle)
    return _rotate_about(mu, tilted, rng.uniform(0.0, 2.0 * np.pi))


def make_phantom(shape=(24, 24, 24), voxel_size: float = 2.0, seed: int = 0,
                 tissue: str = "adult", kappa: float = DEFAULT_KAPPA,
                 n_fiber_probs=(0.35, 0.45, 0.2), fraction_range=(0.3, 1.0),
                 crossing_range_deg=(45.0, 90.0), iso_range=(0.05, 0.25)) -> Phantom:
    """Random phantom: ellipsoidal mask, 1 to 3 fibers per voxel.

    Relative fiber weights are drawn from ``fraction_range`` and normalized
    against the isotropic fraction; crossing fibers sit at angles drawn from
    ``crossing_range_deg``.  At the default 24^3 shape the mask holds about
    10^4 voxels.
    """
    if tissue not in TISSUE_PRESETS:
        raise ValueError(f"unknown tissue preset: {tissue!r}")
    shape = tuple(int(s) for s in shape)
    rng = substream(seed, "phantom")
    center = (np.asarray(shape) - 1.0) / 2.0
    radius = 0.57 * min(shape)  # ~10^4 masked voxels at the 24^3 default
    ii, jj, kk = np.meshgrid(*[np.arange(s) for s in shape], indexing="ij")
    dist2 = ((ii - center[0]) ** 2 + (jj - center[1]) ** 2 + (kk - center[2]) ** 2)
    mask = dist2 <= radius * radius
    voxel_indices = np.argwhere(mask)
    v = voxel_indices.shape[0]

    n_fibers = rng.choice([1, 2, 3], size=v, p=np.asarray(n_fiber_probs))
    orientations = np.zeros((v, 3, 3))
    fractions = np.zeros((v, 3))
    iso_fractions = rng.uniform(*iso_range, size=v)
    lo, hi = np.deg2rad(crossing_range_deg[0]), np.deg2rad(crossing_range_deg[1])
    for i in range(v):
        k = int(n_fibers[i])
        mus = [_uniform_direction(rng)]
        for j in range(1, k):
            for _ in range(20):
                cand = _direction_at_angle(rng, mus[0], rng.uniform(lo, hi))
                angles = [np.degrees(np.arccos(min(abs(cand @ m), 1.0))) for m in mus]
                if min(angles) >= crossing_range_deg[0] - 1e-9:
                    break
            mus.append(cand)
        raw = rng.uniform(*fraction_range, size=k)
        fractions[i, :k] = raw / raw.sum() * (1.0 - iso_fractions[i])
        orientations[i, :k] = np.stack(mus)
    return Phantom(shape, float(voxel_size), mask, voxel_indices, n_fibers,
                   orientations, fractions, iso_fractions, tissue, kappa)


def _coherent_phantom(shape, voxel_size, mask, fiber_dirs, fiber_fracs, iso,
                      tissue, kappa):
    voxel_indices = np.argwhere(mask)
    v = voxel_indices.shape[0]
    orientations = np.zeros((v, 3, 3))
    fractions = np.zeros((v, 3))
    n_fibers = np.zeros(v, dtype=int)
    for i, idx in enumerate(voxel_indices):
        dirs = fiber_dirs(tuple(idx))
        n_fibers[i] = len(dirs)
        for j, d in enumerate(dirs):
            orientations[i, j] = d
        fr = fiber_fracs(tuple(idx))
        fractions[i, : len(fr)] = fr
    return Phantom(tuple(shape), float(voxel_size), mask, voxel_indices,
                   n_fibers, orientations, fractions,
                   np.full(v, iso), tissue, kappa)


def make_tube_phantom(shape=(15, 15, 8), voxel_size: float = 2.0,
                      radius_vox: float = 5.5, fiber_fraction: float = 1.0,
                      tissue: str = "adult", kappa: float = DEFAULT_KAPPA) -> Phantom:
    """Straight tube along z with a single coherent fiber population."""
    shape = tuple(int(s) for s in shape)
    cx, cy = (shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0
    ii, jj, kk = np.meshgrid(*[np.arange(s) for s in shape], indexing="ij")
    mask = (ii - cx) ** 2 + (jj - cy) ** 2 <= radius_vox ** 2
    z = np.array([0.0, 0.0, 1.0])
    return _coherent_phantom(shape, voxel_size, mask,
                             lambda idx: [z], lambda idx: [fiber_fraction],
                             1.0 - fiber_fraction, tissue, kappa)


# tracking settings matched to the tube pair below (mm units, 2 mm voxels):
# quarter-voxel steps and a tight cone keep walks aligned with the fiber,
# the raised cutoff rejects kernel side lobes, and the length floor drops
# spurious short tracks from seeds in the outermost voxel shell
TUBE_TRACKING = {"step_size": 0.5, "max_angle_deg": 15.0, "cutoff": 0.3,
                 "min_length": 12.0, "max_length": 150.0}


def make_tube_tracking_pair(shape=(15, 15, 8), voxel_size: float = 2.0,
                            radius_vox: float = 5.5,
                            support_margin_vox: float = 1.5,
                            fiber_fraction: float = 1.0, tissue: str = "adult",
                            kappa: float = DEFAULT_KAPPA) -> tuple:
    """Support and core tube phantoms for tractography.

    The support tube carries fibers ``support_margin_vox`` beyond the core
    radius so trilinear interpolation sees full-strength FODs everywhere
    inside the core mask; seeding and termination use the core mask only,
    mirroring a white-matter mask that sits strictly inside the FOD field.
    """
    support = make_tube_phantom(shape, voxel_size,
                                radius_vox + support_margin_vox,
                                fiber_fraction, tissue, kappa)
    core = make_tube_phantom(shape, voxel_size, radius_vox,
                             fiber_fraction, tissue, kappa)
    return support, core


def make_crossing_phantom(shape=(21, 21, 5), voxel_size: float = 2.0,
                          bar_halfwidth: int = 2, fiber_fraction: float = 0.85,
                          tissue: str = "adult", kappa: float = DEFAULT_KAPPA) -> Phantom:
    """Two orthogonal bars crossing in the volume center."""
    shape = tuple(int(s) for s in shape)
    cx, cy = (shape[0] - 1) // 2, (shape[1] - 1) // 2
    ii, jj, _ = np.meshgrid(*[np.arange(s) for s in shape], indexing="ij")
    in_x_bar = np.abs(jj - cy) <= bar_halfwidth   # bar running along x
    in_y_bar = np.abs(ii - cx) <= bar_halfwidth   # bar running along y
    mask = in_x_bar | in_y_bar
    ex = np.array([1.0, 0.0, 0.0])
    ey = np.array([0.0, 1.0, 0.0])

    def dirs(idx):
        out = []
        if abs(idx[1] - cy) <= bar_halfwidth:
            out.append(ex)
        if abs(idx[0] - cx) <= bar_halfwidth:
            out.append(ey)
        return out

    def fracs(idx):
        k = len(dirs(idx))
        return [fiber_fraction / k] * k

    return _coherent_phantom(shape, voxel_size, mask, dirs, fracs,
                             1.0 - fiber_fraction, tissue, kappa)


# ---------------------------------------------------------------------------
# dataset assembly


def simulate_phantom_signals(phantom: Phantom, protocol: AcquisitionProtocol,
                             snr: float | None = None, seed: int = 0) -> np.ndarray:
    """Signals for every masked voxel, shape (V, protocol.n_columns)."""
    tissue = TISSUE_PRESETS[phantom.tissue]
    v = phantom.n_voxels
    out = np.empty((v, protocol.n_columns))
    out[:, : protocol.n_b0] = 1.0
    for cols, shell in zip(protocol.shell_columns(), protocol.shells):
        acc = np.zeros((v, shell.n_dirs))
        for j in range(3):
            active = phantom.fractions[:, j] > 0
            if not np.any(active):
                continue
            dots = phantom.orientations[active, j] @ shell.directions.T
            att = np.exp(-shell.b * (tissue["radial_d"]
                                     + (tissue["axial_d"] - tissue["radial_d"]) * dots * dots))
            acc[active] += phantom.fractions[active, j, None] * att
        acc += phantom.iso_fractions[:, None] * np.exp(-shell.b * tissue["iso_d"])
        out[:, cols] = acc
    if snr is not None:
        rng = substream(seed, "rician-noise")
        out = add_rician_noise(out, snr, rng)
    return out


def normalize_signals(dwi: np.ndarray, b0: np.ndarray):
    """b0-normalize, clamp negatives, clip above the 95th percentile.

    Returns (normalized, clip_value).  The percentile is taken over the
    array being normalized, so call once per dataset.
    """
    dwi = np.asarray(dwi, dtype=np.float64)
    mean_b0 = np.mean(np.asarray(b0, dtype=np.float64), axis=-1, keepdims=True)
    if np.any(mean_b0 <= 0):
        raise ValueError("mean b0 must be positive")
    out = dwi / mean_b0
    np.clip(out, 0.0, None, out=out)
    clip = float(np.percentile(out, 95.0))
    np.clip(out, None, clip, out=out)
    return out, clip


@dataclass
class Dataset:
    """Per-voxel training data derived from a phantom and a protocol."""

    protocol: AcquisitionProtocol
    signals: np.ndarray        # (V, n_columns) raw simulated signals
    norm_signals: np.ndarray   # (V, n_dwi) normalized weighted columns
    shell_coeffs: np.ndarray   # (V, n_shells, n_coeffs) per-shell SH fits
    targets: np.ndarray        # (V, n_coeffs) ground-truth FODs
    voxel_indices: np.ndarray  # (V, 3)
    n_fibers: np.ndarray       # (V,)
    split: np.ndarray          # (V,) 0 train / 1 val / 2 test
    groups: np.ndarray         # (V,) subject-like group id
    shape: tuple
    voxel_size: float
    mask: np.ndarray
    meta: dict = field(default_factory=dict)

    def indices_for(self, part: str) -> np.ndarray:
        code = {"train": 0, "val": 1, "test": 2}[part]
        return np.flatnonzero(self.split == code)


SPLIT_GROUPS = (35, 4, 4)


def assign_groups(voxel_indices: np.ndarray, n_groups: int = sum(SPLIT_GROUPS)) -> np.ndarray:
    """Partition masked voxels into contiguous spatial slabs of near-equal
    size (ordered by z, then y, then x), mimicking per-subject grouping."""
    v = voxel_indices.shape[0]
    if v < n_groups:
        raise ValueError("fewer voxels than groups")
    order = np.lexsort((voxel_indices[:, 0], voxel_indices[:, 1], voxel_indices[:, 2]))
    groups = np.empty(v, dtype=int)
    bounds = np.linspace(0, v, n_groups + 1).astype(int)
    for g in range(n_groups):
        groups[order[bounds[g] : bounds[g + 1]]] = g
    return groups


def split_by_group(groups: np.ndarray, seed: int,
                   counts=SPLIT_GROUPS) -> np.ndarray:
    """Disjoint group-level split: whole groups go to train/val/test."""
    ids = np.unique(groups)
    if ids.size != sum(counts):
        raise ValueError(f"expected {sum(counts)} groups, got {ids.size}")
    rng = substream(seed, "split")
    perm = rng.permutation(ids)
    train = set(perm[: counts[0]].tolist())
    val = set(perm[counts[0] : counts[0] + counts[1]].tolist())
    out = np.full(groups.shape, 2, dtype=int)
    for i, g in enumerate(groups):
        if g in train:
            out[i] = 0
        elif g in val:
            out[i] = 1
    return out


def build_dataset(phantom: Phantom, protocol: AcquisitionProtocol,
                  snr: float | None = 20.0, seed: int = 0,
                  lam: float = 0.006, lmax: int = sh.LMAX_DEFAULT) -> Dataset:
    """Simulate, normalize, fit per-shell SH, attach targets and splits."""
    signals = simulate_phantom_signals(phantom, protocol, snr=snr, seed=seed)
    dwi = signals[:, protocol.n_b0 :]
    b0 = signals[:, : protocol.n_b0]
    norm, clip = normalize_signals(dwi, b0)
    shell_cols = protocol.shell_columns()
    coeffs = np.stack(
        [sh.fit_sh_regularized(norm[:, cols - protocol.n_b0], shell.directions,
                               lmax=lmax, lam=lam)
         for cols, shell in zip(shell_cols, protocol.shells)], axis=1)
    targets = ground_truth_fods(phantom.orientations, phantom.fractions,
                                kappa=phantom.kappa, lmax=lmax)
    groups = assign_groups(phantom.voxel_indices)
    split = split_by_group(groups, seed)
    meta = {"snr": snr, "seed": seed, "lam": lam, "lmax": lmax,
            "kappa": phantom.kappa, "tissue": phantom.tissue,
            "protocol": protocol.name, "clip_value": clip}
    return Dataset(protocol=protocol, signals=signals, norm_signals=norm,
                   shell_coeffs=coeffs, targets=targets,
                   voxel_indices=phantom.voxel_indices,
                   n_fibers=phantom.n_fibers, split=split, groups=groups,
                   shape=phantom.shape, voxel_size=phantom.voxel_size,
                   mask=phantom.mask, meta=meta)
