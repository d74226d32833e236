import json

import numpy as np
import pytest

from equisphere import io, sh
from equisphere.model import MLP, MLPConfig, SCNN, SCNNConfig
from equisphere.synth import make_protocol


# ---------------------------------------------------------------------------
# volumes


def test_volume_round_trip_f64(tmp_path):
    rng = np.random.default_rng(3)
    data = rng.standard_normal((4, 3, 5, 7))
    path = tmp_path / "vol.eqsv"
    io.write_volume(path, data, voxel_size=2.0, semantics="sh",
                    extra={"note": "unit test", "lmax": 8})
    back, header = io.read_volume(path)
    assert back.dtype == np.float64
    np.testing.assert_array_equal(back, data)
    assert header["voxel_size"] == 2.0
    assert header["semantics"] == "sh"
    assert header["note"] == "unit test"
    assert header["lmax"] == 8


def test_volume_3d_input_gains_channel_axis(tmp_path):
    data = np.arange(24.0).reshape(2, 3, 4)
    path = tmp_path / "vol.eqsv"
    io.write_volume(path, data, voxel_size=1.0, semantics="mask", dtype="u8")
    back, header = io.read_volume(path)
    assert back.shape == (2, 3, 4, 1)
    assert back.dtype == np.uint8
    np.testing.assert_array_equal(back[..., 0], data.astype(np.uint8))


def test_volume_payload_is_channel_major_x_fastest(tmp_path):
    # Byte-level contract: flat index ((c * nz + z) * ny + y) * nx + x.
    rng = np.random.default_rng(5)
    nx, ny, nz, nc = 3, 4, 2, 2
    data = rng.standard_normal((nx, ny, nz, nc))
    path = tmp_path / "vol.eqsv"
    io.write_volume(path, data, voxel_size=1.0, semantics="signal")
    raw = path.read_bytes()
    payload = raw[raw.index(b"\n") + 1:]
    flat = np.frombuffer(payload, dtype="<f8")
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                for c in range(nc):
                    idx = ((c * nz + z) * ny + y) * nx + x
                    assert flat[idx] == data[x, y, z, c]


def test_volume_header_is_deterministic(tmp_path):
    data = np.ones((2, 2, 2, 1))
    a, b = tmp_path / "a.eqsv", tmp_path / "b.eqsv"
    io.write_volume(a, data, voxel_size=1.5, semantics="sh", extra={"z": 1, "a": 2})
    io.write_volume(b, data, voxel_size=1.5, semantics="sh", extra={"a": 2, "z": 1})
    assert a.read_bytes() == b.read_bytes()


def test_volume_errors(tmp_path):
    path = tmp_path / "vol.eqsv"
    with pytest.raises(ValueError, match="3-D or 4-D"):
        io.write_volume(path, np.ones((2, 2)), voxel_size=1.0, semantics="x")
    with pytest.raises(ValueError, match="unsupported dtype"):
        io.write_volume(path, np.ones((2, 2, 2)), voxel_size=1.0,
                        semantics="x", dtype="i2")
    io.write_volume(path, np.ones((2, 2, 2)), voxel_size=1.0, semantics="x")
    raw = path.read_bytes()
    truncated = tmp_path / "short.eqsv"
    truncated.write_bytes(raw[:-8])
    with pytest.raises(io.FormatError, match="payload holds"):
        io.read_volume(truncated)
    bad_magic = tmp_path / "magic.eqsv"
    bad_magic.write_bytes(raw.replace(b"EQSV1", b"XXXX1", 1))
    with pytest.raises(io.FormatError, match="magic"):
        io.read_volume(bad_magic)
    no_newline = tmp_path / "nohdr.eqsv"
    no_newline.write_bytes(b"{}")
    with pytest.raises(io.FormatError, match="missing header line"):
        io.read_volume(no_newline)
    not_json = tmp_path / "notjson.eqsv"
    not_json.write_bytes(b"hello\n")
    with pytest.raises(io.FormatError, match="unreadable header"):
        io.read_volume(not_json)


# ---------------------------------------------------------------------------
# gradient tables


def test_gradient_table_round_trip(tmp_path):
    protocol = make_protocol("full")
    bval, bvec = tmp_path / "dwi.bval", tmp_path / "dwi.bvec"
    io.write_gradient_table(bval, bvec, protocol.bvals(), protocol.bvecs())
    back, shell_cols, b0_cols = io.read_gradient_table(bval, bvec)
    np.testing.assert_array_equal(b0_cols, protocol.b0_columns())
    assert back.n_b0 == protocol.n_b0
    assert len(back.shells) == len(protocol.shells)
    for shell, ref, cols, ref_cols in zip(back.shells, protocol.shells,
                                          shell_cols, protocol.shell_columns()):
        assert shell.b == pytest.approx(ref.b)
        np.testing.assert_array_equal(cols, ref_cols)
        np.testing.assert_allclose(shell.directions, ref.directions,
                                   atol=1e-12, rtol=0)


def test_gradient_shell_grouping_with_jitter(tmp_path):
    bvals = np.array([0.0, 49.0, 995.0, 1005.0, 1045.0, 400.0, 2600.0, 5.0])
    rng = np.random.default_rng(0)
    bvecs = rng.standard_normal((8, 3))
    bvecs /= np.linalg.norm(bvecs, axis=1, keepdims=True)
    bvecs[[0, 1, 7]] = 0.0
    bval, bvec = tmp_path / "a.bval", tmp_path / "a.bvec"
    io.write_gradient_table(bval, bvec, bvals, bvecs)
    protocol, shell_cols, b0_cols = io.read_gradient_table(bval, bvec)
    np.testing.assert_array_equal(sorted(b0_cols), [0, 1, 7])
    assert [s.b for s in protocol.shells] == pytest.approx([400.0, 1015.0, 2600.0])
    np.testing.assert_array_equal(shell_cols[0], [5])
    np.testing.assert_array_equal(sorted(shell_cols[1]), [2, 3, 4])
    np.testing.assert_array_equal(shell_cols[2], [6])


def test_gradient_table_normalizes_directions(tmp_path):
    bvals = np.array([0.0, 1000.0])
    bvecs = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 2.0]])
    bval, bvec = tmp_path / "a.bval", tmp_path / "a.bvec"
    io.write_gradient_table(bval, bvec, bvals, bvecs)
    protocol, _, _ = io.read_gradient_table(bval, bvec)
    np.testing.assert_allclose(protocol.shells[0].directions, [[0, 0, 1.0]])


def test_gradient_table_errors(tmp_path):
    bval, bvec = tmp_path / "a.bval", tmp_path / "a.bvec"
    bval.write_text("0 1000 oops\n")
    bvec.write_text("0 1 0\n0 0 0\n1 0 0\n")
    with pytest.raises(io.FormatError, match=r"a\.bval:1: column 3"):
        io.read_gradient_table(bval, bvec)
    bval.write_text("0 1000\n2600\n")
    with pytest.raises(io.FormatError, match="single line"):
        io.read_gradient_table(bval, bvec)
    bval.write_text("0 1000 2600\n")
    bvec.write_text("0 1\n0 0\n1 0\n")
    with pytest.raises(io.FormatError, match="component counts"):
        io.read_gradient_table(bval, bvec)
    bvec.write_text("0 1 0\n0 0 1\n")
    with pytest.raises(io.FormatError, match="expected 3 lines"):
        io.read_gradient_table(bval, bvec)
    bvec.write_text("0 0 0\n0 0 0\n0 1 0\n")
    bval.write_text("0 1000 2600\n")
    with pytest.raises(io.FormatError, match="zero direction"):
        io.read_gradient_table(bval, bvec)


# ---------------------------------------------------------------------------
# streamlines


def test_streamline_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    lines = [rng.standard_normal((n, 3)).astype(np.float32)
             for n in (5, 1, 17)]
    path = tmp_path / "bundle.eqtr"
    io.write_streamlines(path, lines, step_size=0.5, voxel_size=1.0,
                         extra={"space": "mm"})
    back, header = io.read_streamlines(path)
    assert header["count"] == 3
    assert header["step_size"] == 0.5
    assert header["space"] == "mm"
    assert len(back) == 3
    for got, ref in zip(back, lines):
        assert got.dtype == np.float32
        np.testing.assert_array_equal(got, ref)


def test_streamline_empty_bundle(tmp_path):
    path = tmp_path / "empty.eqtr"
    io.write_streamlines(path, [], step_size=0.5, voxel_size=1.0)
    back, header = io.read_streamlines(path)
    assert back == []
    assert header["count"] == 0


def test_streamline_separator_layout(tmp_path):
    # Payload contract: NaN triplet between lines, +Inf triplet at the end.
    lines = [np.zeros((2, 3), np.float32), np.ones((1, 3), np.float32)]
    path = tmp_path / "b.eqtr"
    io.write_streamlines(path, lines, step_size=1.0, voxel_size=1.0)
    raw = path.read_bytes()
    pts = np.frombuffer(raw[raw.index(b"\n") + 1:], dtype="<f4").reshape(-1, 3)
    assert pts.shape[0] == 5
    assert np.all(np.isnan(pts[2]))
    assert np.all(np.isinf(pts[4])) and np.all(pts[4] > 0)


def test_streamline_errors(tmp_path):
    path = tmp_path / "b.eqtr"
    io.write_streamlines(path, [np.zeros((2, 3), np.float32)],
                         step_size=1.0, voxel_size=1.0)
    raw = path.read_bytes()
    no_term = tmp_path / "noterm.eqtr"
    no_term.write_bytes(raw[:-12])
    with pytest.raises(io.FormatError, match="terminator"):
        io.read_streamlines(no_term)
    ragged = tmp_path / "ragged.eqtr"
    ragged.write_bytes(raw[:-5])
    with pytest.raises(io.FormatError, match="triplets"):
        io.read_streamlines(ragged)
    head = raw[:raw.index(b"\n") + 1].replace(b'"count":1', b'"count":2')
    wrong_count = tmp_path / "count.eqtr"
    wrong_count.write_bytes(head + raw[raw.index(b"\n") + 1:])
    with pytest.raises(io.FormatError, match="header count 2"):
        io.read_streamlines(wrong_count)
    with pytest.raises(ValueError, match="shape"):
        io.write_streamlines(path, [np.zeros((2, 2))], step_size=1.0,
                             voxel_size=1.0)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    arrays = {
        "w": rng.standard_normal((4, 5)),
        "b": rng.standard_normal(5),
        "scalar": np.float64(3.25),
    }
    path = tmp_path / "model.eqck"
    io.write_checkpoint(path, "mlp", {"in_width": 4}, arrays,
                        extra={"epoch": 12})
    kind, config, back = io.read_checkpoint(path)
    assert kind == "mlp"
    assert config == {"in_width": 4}
    assert list(back) == ["w", "b", "scalar"]
    for name in arrays:
        np.testing.assert_array_equal(back[name], np.asarray(arrays[name]))


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "model.eqck"
    io.write_checkpoint(path, "mlp", {}, {"w": np.ones((2, 2))})
    raw = path.read_bytes()
    short = tmp_path / "short.eqck"
    short.write_bytes(raw[:-8])
    with pytest.raises(io.FormatError, match="truncated at array 'w'"):
        io.read_checkpoint(short)
    long = tmp_path / "long.eqck"
    long.write_bytes(raw + b"\x00" * 8)
    with pytest.raises(io.FormatError, match="trailing payload"):
        io.read_checkpoint(long)


def test_save_load_scnn_preserves_predictions(tmp_path):
    cfg = SCNNConfig(shell_channels=4, attention_hidden=6,
                     trunk_channels=(4, 4), fc_hidden=16, grid_n=200)
    model = SCNN(cfg, seed=3)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, sh.n_coeffs(cfg.lmax)))
    want = model.forward(x).data
    path = tmp_path / "scnn.eqck"
    io.save_model(path, model, extra={"val_loss": 0.25})
    back, header = io.load_model(path)
    assert isinstance(back, SCNN)
    assert back.config == cfg
    assert header["val_loss"] == 0.25
    np.testing.assert_array_equal(back.forward(x).data, want)


def test_save_load_mlp_preserves_predictions(tmp_path):
    cfg = MLPConfig(in_width=10, hidden=(8, 8), out_width=6)
    model = MLP(cfg, seed=5)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 10))
    want = model.forward(x).data
    path = tmp_path / "mlp.eqck"
    io.save_model(path, model)
    back, _ = io.load_model(path)
    assert isinstance(back, MLP)
    assert back.config == cfg
    np.testing.assert_array_equal(back.forward(x).data, want)


def test_save_model_rejects_unknown(tmp_path):
    with pytest.raises(ValueError, match="cannot checkpoint"):
        io.save_model(tmp_path / "x.eqck", object())


def test_load_model_rejects_unknown_kind(tmp_path):
    path = tmp_path / "x.eqck"
    io.write_checkpoint(path, "transformer", {}, {})
    with pytest.raises(io.FormatError, match="unknown model kind"):
        io.load_model(path)
