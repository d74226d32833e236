"""Real even-degree spherical harmonics: basis, grids, transforms, rotations.

Conventions used throughout the package (see docs/sh-conventions.md):

* Only even degrees l = 0, 2, ..., lmax are kept (antipodally symmetric
  functions).  lmax = 8 gives 45 coefficients.
* Coefficients are ordered by ascending degree, and within a degree by
  ascending order m = -l ... +l.  Negative orders are sin terms, positive
  orders cos terms, m = 0 is the zonal term.
* The basis is orthonormal on the unit sphere with the Condon-Shortley
  phase convention of the associated Legendre functions (scipy.special.lpmv
  already includes the phase).
* ``wigner_rotate(c, R)`` returns the coefficients of the rotated function
  f'(x) = f(R^{-1} x), i.e. the function whose features move *with* the
  rotation.  Hence wigner_rotate(wigner_rotate(c, R1), R2) equals
  wigner_rotate(c, R2 @ R1).
"""

from __future__ import annotations

import functools

import numpy as np
from scipy.special import gammaln, lpmv

LMAX_DEFAULT = 8
DEFAULT_GRID_N = 724
GOLDEN_RATIO = (1.0 + np.sqrt(5.0)) / 2.0


def even_degrees(lmax: int) -> list[int]:
    if lmax < 0 or lmax % 2 != 0:
        raise ValueError(f"lmax must be even and >= 0, got {lmax}")
    return list(range(0, lmax + 1, 2))


def n_coeffs(lmax: int) -> int:
    """Number of even-degree coefficients up to lmax: (lmax+1)(lmax+2)/2."""
    even_degrees(lmax)
    return (lmax + 1) * (lmax + 2) // 2


def lmax_for(n: int) -> int:
    """Inverse of n_coeffs.  Errors if n is not a valid coefficient count."""
    lmax = 0
    while n_coeffs(lmax) < n:
        lmax += 2
    if n_coeffs(lmax) != n:
        raise ValueError(f"{n} is not a valid even-degree coefficient count")
    return lmax


def coeff_index(l: int, m: int) -> int:
    """Flat index of (l, m) in the coefficient ordering."""
    if l % 2 != 0 or abs(m) > l:
        raise ValueError(f"invalid (l, m) = ({l}, {m})")
    return l * (l + 1) // 2 + m


def degree_of_coeff(lmax: int) -> np.ndarray:
    """Per-slot degree *position* (0 for l=0, 1 for l=2, ...), shape (n_coeffs,)."""
    out = np.empty(n_coeffs(lmax), dtype=np.intp)
    for i, l in enumerate(even_degrees(lmax)):
        out[l * (l + 1) // 2 - l : l * (l + 1) // 2 + l + 1] = i
    return out


def _check_unit(dirs: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    dirs = np.asarray(dirs, dtype=np.float64)
    if dirs.ndim == 1:
        dirs = dirs[None, :]
    if dirs.ndim != 2 or dirs.shape[1] != 3:
        raise ValueError(f"directions must have shape (N, 3), got {dirs.shape}")
    norms = np.linalg.norm(dirs, axis=1)
    if not np.allclose(norms, 1.0, atol=tol):
        raise ValueError("directions must be unit vectors")
    return dirs


def sh_basis(dirs, lmax: int = LMAX_DEFAULT) -> np.ndarray:
    """Evaluate the real even-degree SH basis at unit directions.

    Parameters
    ----------
    dirs : (N, 3) array of unit vectors.
    lmax : even band limit.

    Returns
    -------
    (N, n_coeffs(lmax)) matrix B with B[i, k] = Y_k(dirs[i]).
    """
    dirs = _check_unit(dirs)
    ct = np.clip(dirs[:, 2], -1.0, 1.0)
    phi = np.arctan2(dirs[:, 1], dirs[:, 0])
    out = np.empty((dirs.shape[0], n_coeffs(lmax)), dtype=np.float64)
    for l in even_degrees(lmax):
        for m in range(0, l + 1):
            plm = lpmv(m, l, ct)
            norm = np.sqrt(
                (2 * l + 1)
                / (4.0 * np.pi)
                * np.exp(gammaln(l - m + 1) - gammaln(l + m + 1))
            )
            if m == 0:
                out[:, coeff_index(l, 0)] = norm * plm
            else:
                out[:, coeff_index(l, m)] = np.sqrt(2.0) * norm * plm * np.cos(m * phi)
                out[:, coeff_index(l, -m)] = np.sqrt(2.0) * norm * plm * np.sin(m * phi)
    return out


def eval_real_sh(l: int, m: int, d) -> float:
    """Single real SH value Y_l^m(d).  Scalar convenience wrapper."""
    if l % 2 != 0:
        raise ValueError("only even degrees are supported")
    b = sh_basis(np.asarray(d, dtype=np.float64)[None, :], lmax=l)
    return float(b[0, coeff_index(l, m)])


def laplace_beltrami_diag(lmax: int = LMAX_DEFAULT) -> np.ndarray:
    """Diagonal of the Laplace-Beltrami penalty, l^2 (l+1)^2 per coefficient."""
    degs = np.asarray(even_degrees(lmax), dtype=np.float64)
    vals = (degs * (degs + 1.0)) ** 2
    return vals[degree_of_coeff(lmax)]


# ---------------------------------------------------------------------------
# point sets


def fibonacci_sphere(n: int) -> np.ndarray:
    """Fibonacci spiral point set on the full sphere, shape (n, 3)."""
    if n < 1:
        raise ValueError("n must be positive")
    i = np.arange(n, dtype=np.float64) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = 2.0 * np.pi * i / GOLDEN_RATIO
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


def antipodal_fibonacci(n: int) -> np.ndarray:
    """Antipodally symmetric point set: n/2 hemisphere points and their exact
    negations, ordered [P; -P].  n must be even."""
    if n % 2 != 0:
        raise ValueError("antipodal point count must be even")
    half = n // 2
    cand = fibonacci_sphere(n)
    upper = cand[cand[:, 2] > 0.0]
    if upper.shape[0] < half:  # equator ties; fall back to top-half slice
        upper = cand[np.argsort(-cand[:, 2])][:half]
    upper = upper[:half]
    return np.concatenate([upper, -upper], axis=0)


def octahedral_sphere(n: int) -> np.ndarray:
    """Octahedron subdivision grid with at least n vertices (returned count may
    exceed n; it is the smallest subdivision level with >= n unique vertices)."""
    if n < 6:
        raise ValueError("octahedral grid needs n >= 6")
    verts = np.array(
        [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
        dtype=np.float64,
    )
    faces = [
        (0, 2, 4), (2, 1, 4), (1, 3, 4), (3, 0, 4),
        (2, 0, 5), (1, 2, 5), (3, 1, 5), (0, 3, 5),
    ]
    while verts.shape[0] < n:
        verts, faces = _subdivide(verts, faces)
    return verts


def _subdivide(verts, faces):
    verts = list(map(tuple, verts))
    index = {v: i for i, v in enumerate(verts)}

    def midpoint(i, j):
        p = np.asarray(verts[i]) + np.asarray(verts[j])
        p = tuple(p / np.linalg.norm(p))
        if p not in index:
            index[p] = len(verts)
            verts.append(p)
        return index[p]

    new_faces = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        new_faces += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
    return np.asarray(verts, dtype=np.float64), new_faces


def gl_quadrature(n_theta: int = 32, n_phi: int = 64):
    """Gauss-Legendre x uniform-phi product quadrature on the sphere.

    Returns (points (n_theta*n_phi, 3), weights) with sum(weights) = 4*pi.
    Exact for spherical polynomials of degree < 2*n_theta (and azimuthal
    order < n_phi), so degree-16 basis products integrate exactly at the
    defaults.
    """
    x, w = np.polynomial.legendre.leggauss(n_theta)
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    ct = np.repeat(x, n_phi)
    st = np.sqrt(1.0 - ct * ct)
    ph = np.tile(phi, n_theta)
    pts = np.column_stack([st * np.cos(ph), st * np.sin(ph), ct])
    wts = np.repeat(w, n_phi) * (2.0 * np.pi / n_phi)
    return pts, wts


# ---------------------------------------------------------------------------
# grids and transforms


class SphericalGrid:
    """A spherical sampling grid together with its forward/inverse transforms.

    Attributes
    ----------
    points : (N, 3) unit directions.
    weights : (N,) quadrature weights summing to 4*pi (uniform for point sets
        without an exact quadrature rule).
    isft : (N, n_coeffs) matrix taking coefficients to grid samples.
    sft : (n_coeffs, N) Moore-Penrose pseudoinverse of ``isft``.
    condition_number : spectral condition number of ``isft``.
    antipodal : True when points are ordered [P; -P]; even-degree functions
        then only need evaluation on the first half.
    """

    def __init__(self, points: np.ndarray, lmax: int = LMAX_DEFAULT,
                 kind: str = "custom", weights=None, antipodal: bool = False,
                 max_condition: float | None = 10.0):
        self.points = _check_unit(points)
        self.lmax = lmax
        self.kind = kind
        self.antipodal = bool(antipodal)
        n = self.points.shape[0]
        if weights is None:
            weights = np.full(n, 4.0 * np.pi / n)
        self.weights = np.asarray(weights, dtype=np.float64)
        if self.antipodal:
            if n % 2 != 0 or not np.allclose(self.points[: n // 2], -self.points[n // 2 :]):
                raise ValueError("antipodal grid must be ordered [P; -P]")
        self.isft = sh_basis(self.points, lmax)
        if n < n_coeffs(lmax):
            raise ValueError(
                f"grid with {n} points cannot resolve lmax={lmax} "
                f"({n_coeffs(lmax)} coefficients)"
            )
        self.sft = np.linalg.pinv(self.isft)
        sv = np.linalg.svd(self.isft, compute_uv=False)
        self.condition_number = float(sv[0] / sv[-1])
        if max_condition is not None and self.condition_number > max_condition:
            raise ValueError(
                f"grid is too ill-conditioned for lmax={lmax}: "
                f"cond={self.condition_number:.3g} > {max_condition}"
            )
        if self.antipodal:
            self._half_isft = np.ascontiguousarray(self.isft[: n // 2])
            self._half_sft = np.linalg.pinv(self._half_isft)
        else:
            self._half_isft = self.isft
            self._half_sft = self.sft

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def nl_isft(self) -> np.ndarray:
        """Evaluation matrix over the unique half of an antipodal grid (the
        full matrix otherwise).  For even-degree functions the discarded
        half is an exact mirror, so round trips and means are unchanged."""
        return self._half_isft

    @property
    def nl_sft(self) -> np.ndarray:
        return self._half_sft

    def to_grid(self, coeffs: np.ndarray) -> np.ndarray:
        """Coefficients (..., n_coeffs) -> samples (..., N)."""
        return np.matmul(coeffs, self.isft.T)

    def to_coeffs(self, samples: np.ndarray) -> np.ndarray:
        """Samples (..., N) -> least-squares coefficients (..., n_coeffs)."""
        return np.matmul(samples, self.sft.T)


def build_grid(kind: str, n: int, lmax: int = LMAX_DEFAULT,
               max_condition: float = 10.0) -> SphericalGrid:
    """Construct a named sampling grid.

    kind is one of ``fibonacci`` or ``octahedral-subdivision``.  Errors if
    the resulting inverse transform has condition number above
    ``max_condition``.
    """
    if kind == "fibonacci":
        pts = fibonacci_sphere(n)
        return SphericalGrid(pts, lmax, kind=kind, max_condition=max_condition)
    if kind == "octahedral-subdivision":
        pts = octahedral_sphere(n)
        return SphericalGrid(pts, lmax, kind=kind, max_condition=max_condition)
    raise ValueError(f"unknown grid kind: {kind!r}")


def antipodal_grid(n: int, lmax: int = LMAX_DEFAULT,
                   max_condition: float = 10.0) -> SphericalGrid:
    """Antipodally symmetric fibonacci grid (n total points, n/2 unique)."""
    return SphericalGrid(antipodal_fibonacci(n), lmax, kind="fibonacci-antipodal",
                         antipodal=True, max_condition=max_condition)


def quadrature_grid(n_theta: int = 32, n_phi: int = 64,
                    lmax: int = LMAX_DEFAULT) -> SphericalGrid:
    """Gauss-Legendre product grid carrying exact quadrature weights."""
    pts, wts = gl_quadrature(n_theta, n_phi)
    return SphericalGrid(pts, lmax, kind="gauss-legendre", weights=wts,
                         max_condition=None)


@functools.lru_cache(maxsize=8)
def default_grid(lmax: int = LMAX_DEFAULT) -> SphericalGrid:
    """The package-default dense grid: fibonacci with 724 points."""
    return build_grid("fibonacci", DEFAULT_GRID_N, lmax)


def sft(grid: SphericalGrid, samples: np.ndarray) -> np.ndarray:
    return grid.to_coeffs(samples)


def isft(grid: SphericalGrid, coeffs: np.ndarray) -> np.ndarray:
    return grid.to_grid(coeffs)


def fit_sh_regularized(signals, dirs, lmax: int = LMAX_DEFAULT,
                       lam: float = 0.006) -> np.ndarray:
    """Laplace-Beltrami regularized least-squares SH fit.

    Solves (B^T B + lam * diag(l^2 (l+1)^2)) c = B^T s for each signal row.

    Parameters
    ----------
    signals : (..., K) samples at ``dirs``.
    dirs : (K, 3) unit directions.
    lam : penalty weight; lam = 0 requires K >= n_coeffs(lmax).
    """
    dirs = _check_unit(dirs)
    signals = np.asarray(signals, dtype=np.float64)
    if signals.shape[-1] != dirs.shape[0]:
        raise ValueError("last signal axis must match direction count")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    if lam == 0 and dirs.shape[0] < n_coeffs(lmax):
        raise ValueError("underdetermined fit; regularization required")
    basis = sh_basis(dirs, lmax)
    gram = basis.T @ basis + lam * np.diag(laplace_beltrami_diag(lmax))
    solver = np.linalg.solve(gram, basis.T)
    return np.matmul(signals, solver.T)


# ---------------------------------------------------------------------------
# rotations


def check_rotation(rotation) -> np.ndarray:
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape != (3, 3):
        raise ValueError("rotation must be a 3x3 matrix")
    if not np.allclose(rotation.T @ rotation, np.eye(3), atol=1e-10):
        raise ValueError("rotation must be orthogonal")
    if np.linalg.det(rotation) < 0:
        raise ValueError("rotation must be proper (det +1)")
    return rotation


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation via QR of a Gaussian matrix."""
    m = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


@functools.lru_cache(maxsize=4)
def _wigner_fit_basis(lmax: int, n: int):
    pts = fibonacci_sphere(n)
    return pts, sh_basis(pts, lmax)


class WignerRotation:
    """Block-diagonal rotation of even-degree SH coefficients.

    Blocks are built numerically per degree: with B_l the degree-l basis
    evaluated on a dense point set P, the block D_l solves
    B_l(P) D_l = B_l(P R) in the least-squares sense, where row i of P R is
    R^{-1} applied to point i (for row vectors, p R equals R^T p as a
    column).  The fit encodes the identity Y_k(R^{-1} x) =
    sum_j D_l[j, k] Y_j(x), so f'(x) = f(R^{-1} x) has coefficients
    c' = D_l c per degree (columns), i.e. c' = matrix @ c for the full
    vector.
    """

    def __init__(self, rotation, lmax: int = LMAX_DEFAULT, grid_n: int = DEFAULT_GRID_N):
        rotation = check_rotation(rotation)
        self.lmax = lmax
        self.rotation = rotation
        pts, basis = _wigner_fit_basis(lmax, grid_n)
        rotated = sh_basis(pts @ rotation, lmax)
        self.blocks = []
        for l in even_degrees(lmax):
            lo, hi = coeff_index(l, -l), coeff_index(l, l) + 1
            block, *_ = np.linalg.lstsq(basis[:, lo:hi], rotated[:, lo:hi], rcond=None)
            self.blocks.append(block)

    @property
    def matrix(self) -> np.ndarray:
        """Full (n_coeffs, n_coeffs) block-diagonal matrix acting on column
        coefficient vectors: c' = matrix @ c."""
        k = n_coeffs(self.lmax)
        out = np.zeros((k, k))
        for l, block in zip(even_degrees(self.lmax), self.blocks):
            lo, hi = coeff_index(l, -l), coeff_index(l, l) + 1
            out[lo:hi, lo:hi] = block
        return out

    def apply(self, coeffs: np.ndarray) -> np.ndarray:
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if coeffs.shape[-1] != n_coeffs(self.lmax):
            raise ValueError("coefficient count does not match lmax")
        out = np.empty_like(coeffs)
        for l, block in zip(even_degrees(self.lmax), self.blocks):
            lo, hi = coeff_index(l, -l), coeff_index(l, l) + 1
            out[..., lo:hi] = np.matmul(coeffs[..., lo:hi], block.T)
        return out


def wigner_blocks(rotation, lmax: int = LMAX_DEFAULT) -> WignerRotation:
    return WignerRotation(rotation, lmax)


def wigner_rotate(coeffs, rotation, lmax: int | None = None) -> np.ndarray:
    """Rotate SH coefficients: result represents f'(x) = f(R^{-1} x)."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if lmax is None:
        lmax = lmax_for(coeffs.shape[-1])
    return WignerRotation(rotation, lmax).apply(coeffs)
