import numpy as np
import pytest

from equisphere import metrics, sh
from equisphere.synth import Compartment, FiberConfig, ground_truth_fod, make_phantom

K = sh.n_coeffs(8)


def random_coeffs(rng, n=None):
    if n is None:
        return rng.standard_normal(K)
    return rng.standard_normal((n, K))


# ---------------------------------------------------------------------------
# mse


def test_mse_basics():
    rng = np.random.default_rng(0)
    c = random_coeffs(rng, 6)
    assert metrics.mse_sh(c, c) == 0.0
    shifted = c.copy()
    shifted[:, 7] += 1.0
    per_voxel = metrics.sh_squared_error(shifted, c)
    np.testing.assert_allclose(per_voxel, 1.0, atol=1e-12)
    assert metrics.mse_sh(shifted, c) == pytest.approx(1.0, abs=1e-12)


def test_mse_matches_double_loop_oracle():
    rng = np.random.default_rng(1)
    pred, gt = random_coeffs(rng, 11), random_coeffs(rng, 11)
    total = 0.0
    for v in range(11):
        for k in range(K):
            total += (pred[v, k] - gt[v, k]) ** 2
    assert metrics.mse_sh(pred, gt) == pytest.approx(total / 11, rel=1e-12)


def test_mse_invariant_under_joint_rotation():
    rng = np.random.default_rng(2)
    pred, gt = random_coeffs(rng, 5), random_coeffs(rng, 5)
    base = metrics.mse_sh(pred, gt)
    for _ in range(3):
        rot = sh.random_rotation(rng)
        rotated = metrics.mse_sh(sh.wigner_rotate(pred, rot),
                                 sh.wigner_rotate(gt, rot))
        assert rotated == pytest.approx(base, rel=1e-10)


def test_mse_shape_mismatch():
    with pytest.raises(ValueError, match="differ"):
        metrics.mse_sh(np.zeros((2, K)), np.zeros((3, K)))
    with pytest.raises(ValueError, match="even-degree"):
        metrics.mse_sh(np.zeros(44), np.zeros(44))


# ---------------------------------------------------------------------------
# acc


def test_acc_endpoints():
    rng = np.random.default_rng(3)
    c = random_coeffs(rng)
    assert metrics.acc(c, c) == pytest.approx(1.0, abs=1e-12)
    assert metrics.acc(c, -c) == pytest.approx(-1.0, abs=1e-12)
    assert metrics.acc(c, 2.5 * c) == pytest.approx(1.0, abs=1e-12)


def test_acc_matches_plain_dot_product_oracle():
    # on the equal-weight default grid the quadrature weights cancel,
    # so the value must equal the bare cosine of the sample vectors
    gt = ground_truth_fod(FiberConfig(
        compartments=(Compartment(np.array([0.0, 0.0, 1.0]), 1.0),),
        iso_fraction=0.0))
    rot = sh.rotation_from_axis_angle(np.array([1.0, 0.0, 0.0]), np.pi / 2)
    pred = sh.wigner_rotate(gt, rot)
    grid = sh.default_grid()
    p = grid.isft @ pred
    t = grid.isft @ gt
    oracle = float(p @ t / (np.linalg.norm(p) * np.linalg.norm(t)))
    assert metrics.acc(pred, gt, grid) == pytest.approx(oracle, abs=1e-13)
    assert -1.0 <= metrics.acc(pred, gt, grid) <= 1.0


def test_acc_rotation_invariant_on_quadrature_grid():
    grid = sh.quadrature_grid()
    rng = np.random.default_rng(4)
    pred, gt = random_coeffs(rng), random_coeffs(rng)
    base = metrics.acc(pred, gt, grid)
    for _ in range(5):
        rot = sh.random_rotation(rng)
        rotated = metrics.acc(sh.wigner_rotate(pred, rot),
                              sh.wigner_rotate(gt, rot), grid)
        assert abs(rotated - base) < 1e-8


def test_acc_zero_norm_sentinel():
    rng = np.random.default_rng(5)
    c = random_coeffs(rng)
    assert np.isnan(metrics.acc(np.zeros(K), c))
    batch = np.stack([c, np.zeros(K)])
    out = metrics.acc(batch, batch)
    assert out[0] == pytest.approx(1.0)
    assert np.isnan(out[1])


# ---------------------------------------------------------------------------
# ssim


def _ssim_oracle(pred, gt, mask, sigma=1.5, k1=0.01, k2=0.03):
    """Windowed-sum reference: explicit 7-wide Gaussian kernel, symmetric pad."""
    r = 3
    xs = np.arange(-r, r + 1, dtype=np.float64)
    k1d = np.exp(-0.5 * (xs / sigma) ** 2)
    k1d /= k1d.sum()
    kern = k1d[:, None, None] * k1d[None, :, None] * k1d[None, None, :]

    def smooth(v):
        vp = np.pad(v, r, mode="symmetric")
        out = np.zeros_like(v)
        for i in range(v.shape[0]):
            for j in range(v.shape[1]):
                for l in range(v.shape[2]):
                    out[i, j, l] = np.sum(kern * vp[i:i + 7, j:j + 7, l:l + 7])
        return out

    span = gt[mask].max() - gt[mask].min()
    c1, c2 = (k1 * span) ** 2, (k2 * span) ** 2
    mu_p, mu_g = smooth(pred), smooth(gt)
    var_p = smooth(pred * pred) - mu_p ** 2
    var_g = smooth(gt * gt) - mu_g ** 2
    cov = smooth(pred * gt) - mu_p * mu_g
    num = (2 * mu_p * mu_g + c1) * (2 * cov + c2)
    den = (mu_p ** 2 + mu_g ** 2 + c1) * (var_p + var_g + c2)
    return float(np.mean(num[mask] / den[mask]))


def test_ssim_identity_is_exactly_one():
    rng = np.random.default_rng(6)
    vol = rng.standard_normal((6, 5, 4))
    mask = np.ones(vol.shape, dtype=bool)
    assert metrics.ssim_sh0(vol, vol, mask) == 1.0


def test_ssim_matches_windowed_oracle_on_toy():
    gt = np.zeros((3, 1, 1))
    gt[:, 0, 0] = [0.0, 1.0, 2.0]
    pred = gt + np.array([0.3, -0.1, 0.2])[:, None, None]
    mask = np.ones(gt.shape, dtype=bool)
    assert metrics.ssim_sh0(pred, gt, mask) == pytest.approx(
        _ssim_oracle(pred, gt, mask), abs=1e-12)


def test_ssim_matches_windowed_oracle_on_random_volume():
    rng = np.random.default_rng(7)
    gt = rng.standard_normal((5, 4, 3))
    pred = gt + 0.4 * rng.standard_normal((5, 4, 3))
    mask = rng.random((5, 4, 3)) > 0.3
    assert metrics.ssim_sh0(pred, gt, mask) == pytest.approx(
        _ssim_oracle(pred, gt, mask), abs=1e-12)


def test_ssim_constant_offset_below_one():
    rng = np.random.default_rng(8)
    gt = rng.standard_normal((6, 6, 6))
    mask = np.ones(gt.shape, dtype=bool)
    val = metrics.ssim_sh0(gt + 5.0, gt, mask)
    assert val < 0.5


def test_ssim_shuffled_phantom_near_zero():
    ph = make_phantom(shape=(24, 24, 24), seed=0)
    sh0 = np.zeros(ph.shape)
    ix, iy, iz = ph.voxel_indices.T
    sh0[ix, iy, iz] = (1.0 - ph.iso_fractions) / (2.0 * np.sqrt(np.pi))
    rng = np.random.default_rng(9)
    flat = sh0.ravel()
    shuffled = flat[rng.permutation(flat.size)].reshape(sh0.shape)
    assert metrics.ssim_sh0(shuffled, sh0, ph.mask) < 0.2


def test_ssim_errors():
    vol = np.random.default_rng(0).standard_normal((4, 4, 4))
    with pytest.raises(ValueError, match="empty mask"):
        metrics.ssim_sh0(vol, vol, np.zeros((4, 4, 4), dtype=bool))
    with pytest.raises(ValueError, match="dynamic range"):
        metrics.ssim_sh0(vol, np.ones((4, 4, 4)), np.ones((4, 4, 4), dtype=bool))
    with pytest.raises(ValueError, match="share"):
        metrics.ssim_sh0(vol, vol, np.ones((4, 4, 5), dtype=bool))


# ---------------------------------------------------------------------------
# peaks


def single_fiber(direction):
    direction = np.asarray(direction, dtype=np.float64)
    direction = direction / np.linalg.norm(direction)
    return ground_truth_fod(FiberConfig(
        compartments=(Compartment(direction, 1.0),), iso_fraction=0.0))


def test_peak_identity_and_symmetry():
    c = single_fiber([0.0, 0.0, 1.0])
    assert metrics.peak_angular_error(c, c) == pytest.approx(0.0, abs=1e-9)
    rng = np.random.default_rng(10)
    a = single_fiber(rng.standard_normal(3))
    b = single_fiber(rng.standard_normal(3))
    assert metrics.peak_angular_error(a, b) == pytest.approx(
        metrics.peak_angular_error(b, a), abs=1e-9)


def test_peak_known_rotation_recovered():
    gt = single_fiber([0.0, 0.0, 1.0])
    rot = sh.rotation_from_axis_angle(np.array([1.0, 0.0, 0.0]),
                                      np.radians(10.0))
    pred = sh.wigner_rotate(gt, rot)
    coarse = metrics.peak_angular_error(pred, gt, refine=False)
    assert abs(coarse - 10.0) < 4.5
    refined = metrics.peak_angular_error(pred, gt)
    assert abs(refined - 10.0) < 1.0


def test_peak_refinement_beats_grid_resolution():
    rng = np.random.default_rng(11)
    errors = []
    for _ in range(10):
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        c = single_fiber(u)
        found = metrics.peak_direction(c)
        errors.append(metrics.angle_between_deg(found, u))
    assert max(errors) < 1.0


def test_peak_antipodal_fold():
    c = single_fiber([0.0, 0.0, 1.0])
    flipped = sh.wigner_rotate(c, sh.rotation_from_axis_angle(
        np.array([1.0, 0.0, 0.0]), np.pi))
    assert metrics.peak_angular_error(c, flipped) < 1.0


def test_peak_degenerate_inputs():
    c = single_fiber([0.0, 1.0, 0.0])
    assert metrics.peak_direction(np.zeros(K)) is None
    assert np.isnan(metrics.peak_angular_error(np.zeros(K), c))
    negative = np.zeros(K)
    negative[0] = -1.0
    assert metrics.peak_direction(negative) is None
    isotropic = np.zeros(K)
    isotropic[0] = 1.0
    err = metrics.peak_angular_error(isotropic, c)
    assert np.isnan(err) or 0.0 <= err <= 90.0


# ---------------------------------------------------------------------------
# report


def test_evaluation_report_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    shape = (6, 6, 6)
    mask = np.zeros(shape, dtype=bool)
    mask[1:5, 1:5, 1:5] = True
    idx = np.argwhere(mask)
    gt = np.stack([rng.uniform(0.5, 1.5) * single_fiber(rng.standard_normal(3))
                   for _ in range(len(idx))])
    pred = gt + 0.01 * rng.standard_normal(gt.shape)
    pred[0] = 0.0  # one degenerate voxel exercises the sentinels
    report = metrics.evaluate_fods(pred, gt, voxel_indices=idx, shape=shape,
                                   mask=mask, subject_id="toy")
    s = report.summary()
    assert s["n_voxels"] == len(idx)
    assert s["acc_excluded"] == 1
    assert s["peak_excluded"] == 1
    assert s["acc"]["n"] == len(idx) - 1
    assert 0.0 <= s["acc"]["mean"] <= 1.0
    assert s["mse"]["mean"] > 0.0
    assert -1.0 <= s["ssim_sh0"] <= 1.0

    j1, c1 = tmp_path / "r.json", tmp_path / "r.csv"
    report.write(j1, c1)
    j2, c2 = tmp_path / "r2.json", tmp_path / "r2.csv"
    report.write(j2, c2)
    assert j1.read_bytes() == j2.read_bytes()
    assert c1.read_bytes() == c2.read_bytes()
    lines = c1.read_text().splitlines()
    assert lines[0] == "x,y,z,mse,acc,peak_error_deg"
    assert len(lines) == len(idx) + 1
    assert "nan" in lines[1]
    import json
    doc = json.loads(j1.read_text())
    assert doc["subject_id"] == "toy"
    assert "wall" not in j1.read_text() and "time" not in doc
