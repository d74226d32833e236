"""File formats: volume container, FSL-style gradient tables, streamline
bundles, and model checkpoints.

The binary containers share one layout: a single-line JSON header (UTF-8,
terminated by a newline) followed by a raw little-endian payload.  Headers
are serialized with sorted keys and fixed separators so identical content
produces identical bytes; unknown header keys survive a read/write round
trip.  See docs/formats.md for the byte-level contracts.
"""

from __future__ import annotations

import json

import numpy as np

from .synth import AcquisitionProtocol, Shell

VOLUME_MAGIC = "EQSV1"
TRACT_MAGIC = "EQTR1"
CHECKPOINT_MAGIC = "EQCK1"

_DTYPES = {"f64le": "<f8", "f32le": "<f4", "u8": "u1"}
_DTYPE_NAMES = {np.dtype("<f8"): "f64le", np.dtype("<f4"): "f32le",
                np.dtype("u1"): "u8"}

B0_THRESHOLD = 50.0
SHELL_TOLERANCE = 50.0


class FormatError(ValueError):
    """Malformed file content (bad magic, truncated payload, parse failure)."""


def _dump_header(header: dict) -> bytes:
    return (json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n").encode()


def _read_header(fh, path, magic: str) -> dict:
    line = fh.readline()
    if not line.endswith(b"\n"):
        raise FormatError(f"{path}: missing header line")
    try:
        header = json.loads(line.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from None
    if header.get("magic") != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, "
                          f"got {header.get('magic')!r}")
    return header


# ---------------------------------------------------------------------------
# volumes


def write_volume(path, data: np.ndarray, voxel_size: float, semantics: str,
                 dtype: str = "f64le", extra: dict | None = None):
    """Write a volume (X, Y, Z) or (X, Y, Z, C).

    The payload is channel-major with x fastest: flat index
    ((c * nz + z) * ny + y) * nx + x.  ``semantics`` names the content
    (``signal``, ``sh``, ``mask``, ...); ``extra`` keys are stored verbatim.
    """
    data = np.asarray(data)
    if data.ndim == 3:
        data = data[..., None]
    if data.ndim != 4:
        raise ValueError(f"volume must be 3-D or 4-D, got shape {data.shape}")
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}; use one of {sorted(_DTYPES)}")
    header = dict(extra or {})
    header.update({
        "magic": VOLUME_MAGIC,
        "shape": list(data.shape[:3]),
        "channels": int(data.shape[3]),
        "dtype": dtype,
        "voxel_size": float(voxel_size),
        "semantics": str(semantics),
    })
    payload = np.ascontiguousarray(data.transpose(3, 2, 1, 0)).astype(
        _DTYPES[dtype], copy=False)
    with open(path, "wb") as fh:
        fh.write(_dump_header(header))
        fh.write(payload.tobytes())


def read_volume(path):
    """Read a volume; returns (data (X, Y, Z, C) in the stored dtype, header)."""
    with open(path, "rb") as fh:
        header = _read_header(fh, path, VOLUME_MAGIC)
        raw = fh.read()
    try:
        nx, ny, nz = (int(v) for v in header["shape"])
        channels = int(header["channels"])
        dt = np.dtype(_DTYPES[header["dtype"]])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad header fields: {exc}") from None
    expect = nx * ny * nz * channels * dt.itemsize
    if len(raw) != expect:
        raise FormatError(f"{path}: payload holds {len(raw)} bytes, "
                          f"header implies {expect}")
    data = np.frombuffer(raw, dtype=dt).reshape(channels, nz, ny, nx)
    return np.ascontiguousarray(data.transpose(3, 2, 1, 0)), header


# ---------------------------------------------------------------------------
# gradient tables


def write_gradient_table(bval_path, bvec_path, bvals: np.ndarray, bvecs: np.ndarray):
    """FSL-style pair: one line of b-values; three lines of x, y, z components."""
    bvals = np.asarray(bvals, dtype=np.float64)
    bvecs = np.asarray(bvecs, dtype=np.float64)
    if bvecs.shape != (bvals.size, 3):
        raise ValueError("bvecs must have shape (n, 3) matching bvals")
    with open(bval_path, "w") as fh:
        fh.write(" ".join(_fmt(v) for v in bvals) + "\n")
    with open(bvec_path, "w") as fh:
        for axis in range(3):
            fh.write(" ".join(_fmt(v) for v in bvecs[:, axis]) + "\n")


def _fmt(v: float) -> str:
    return repr(float(v))


def _parse_numbers(path, text: str, line_no: int) -> np.ndarray:
    out = []
    for col, token in enumerate(text.split()):
        try:
            out.append(float(token))
        except ValueError:
            raise FormatError(f"{path}:{line_no}: column {col + 1}: "
                              f"not a number: {token!r}") from None
    return np.asarray(out)


def read_gradient_table(bval_path, bvec_path):
    """Parse an FSL pair and group shells.

    Nonzero b-values within +-50 s/mm^2 of each other share a shell; values
    below 50 count as b0.  Returns (protocol, shell_columns, b0_columns)
    where the column arrays index into the file's column order and the
    protocol lists shells by ascending b with their direction sets.
    """
    with open(bval_path) as fh:
        lines = [l for l in fh.read().splitlines() if l.strip()]
    if len(lines) != 1:
        raise FormatError(f"{bval_path}: expected a single line of b-values, "
                          f"got {len(lines)} lines")
    bvals = _parse_numbers(bval_path, lines[0], 1)
    with open(bvec_path) as fh:
        vlines = [l for l in fh.read().splitlines() if l.strip()]
    if len(vlines) != 3:
        raise FormatError(f"{bvec_path}: expected 3 lines, got {len(vlines)}")
    rows = [_parse_numbers(bvec_path, l, i + 1) for i, l in enumerate(vlines)]
    if any(r.size != bvals.size for r in rows):
        raise FormatError(f"{bvec_path}: component counts do not match "
                          f"{bval_path} ({bvals.size} b-values)")
    bvecs = np.stack(rows, axis=1)

    b0_columns = np.flatnonzero(bvals < B0_THRESHOLD)
    weighted = np.flatnonzero(bvals >= B0_THRESHOLD)
    shells = []
    remaining = weighted[np.argsort(bvals[weighted], kind="stable")]
    while remaining.size:
        ref = bvals[remaining[0]]
        member = bvals[remaining] <= ref + SHELL_TOLERANCE
        cols = remaining[member]
        dirs = bvecs[cols]
        norms = np.linalg.norm(dirs, axis=1)
        if np.any(norms < 1e-12):
            raise FormatError(f"{bvec_path}: zero direction in a weighted column")
        shells.append((float(np.mean(bvals[cols])), dirs / norms[:, None], cols))
        remaining = remaining[~member]
    protocol = AcquisitionProtocol(
        name="from-file",
        shells=tuple(Shell(b, d) for b, d, _ in shells),
        n_b0=int(b0_columns.size))
    return protocol, [cols for *_, cols in shells], b0_columns


# ---------------------------------------------------------------------------
# streamlines


def write_streamlines(path, streamlines, step_size: float, voxel_size: float,
                      extra: dict | None = None):
    """Write a bundle of polylines in mm coordinates.

    Points are float32 little-endian x, y, z triplets.  Streamlines are
    separated by a NaN triplet; a +Inf triplet terminates the payload.
    """
    parts = []
    for i, line in enumerate(streamlines):
        arr = np.asarray(line, dtype="<f4")
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError(f"streamline {i} must have shape (n, 3)")
        if i:
            parts.append(np.full((1, 3), np.nan, dtype="<f4"))
        parts.append(arr)
    parts.append(np.full((1, 3), np.inf, dtype="<f4"))
    header = dict(extra or {})
    header.update({
        "magic": TRACT_MAGIC,
        "count": len(streamlines),
        "step_size": float(step_size),
        "voxel_size": float(voxel_size),
    })
    with open(path, "wb") as fh:
        fh.write(_dump_header(header))
        fh.write(np.concatenate(parts, axis=0).tobytes())


def read_streamlines(path):
    """Read a streamline bundle; returns (list of (n, 3) float32 arrays, header)."""
    with open(path, "rb") as fh:
        header = _read_header(fh, path, TRACT_MAGIC)
        raw = fh.read()
    if len(raw) % 12 != 0:
        raise FormatError(f"{path}: payload is not a whole number of xyz triplets")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 3)
    if pts.shape[0] == 0 or not np.all(np.isinf(pts[-1])):
        raise FormatError(f"{path}: missing terminator triplet")
    pts = pts[:-1]
    breaks = np.flatnonzero(np.isnan(pts[:, 0]))
    streamlines = []
    start = 0
    for brk in breaks:
        streamlines.append(pts[start:brk].copy())
        start = brk + 1
    streamlines.append(pts[start:].copy())
    if len(streamlines) == 1 and streamlines[0].shape[0] == 0:
        streamlines = []
    expect = int(header.get("count", -1))
    if expect != len(streamlines):
        raise FormatError(f"{path}: header count {expect} but payload holds "
                          f"{len(streamlines)} streamlines")
    return streamlines, header


# ---------------------------------------------------------------------------
# checkpoints


def write_checkpoint(path, model_kind: str, config: dict, arrays: dict,
                     extra: dict | None = None):
    """Serialize named float64 arrays with a model kind and its config."""
    names = list(arrays)
    header = dict(extra or {})
    header.update({
        "magic": CHECKPOINT_MAGIC,
        "model": str(model_kind),
        "config": config,
        "arrays": [{"name": n, "shape": list(np.asarray(arrays[n]).shape)}
                   for n in names],
    })
    with open(path, "wb") as fh:
        fh.write(_dump_header(header))
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def save_model(path, model, extra: dict | None = None):
    """Checkpoint an SCNN or MLP with its config and all state arrays."""
    from .model import MLP, SCNN
    from dataclasses import asdict
    if isinstance(model, SCNN):
        kind = "scnn"
    elif isinstance(model, MLP):
        kind = "mlp"
    else:
        raise ValueError(f"cannot checkpoint {type(model).__name__}")
    write_checkpoint(path, kind, asdict(model.config), model.state(), extra=extra)


def load_model(path):
    """Rebuild a model from a checkpoint; returns (model, header)."""
    from .model import MLP, MLPConfig, SCNN, SCNNConfig
    with open(path, "rb") as fh:
        header = _read_header(fh, path, CHECKPOINT_MAGIC)
    kind, config, arrays = read_checkpoint(path)
    if kind == "scnn":
        config["trunk_channels"] = tuple(config["trunk_channels"])
        model = SCNN(SCNNConfig(**config))
    elif kind == "mlp":
        config["hidden"] = tuple(config["hidden"])
        model = MLP(MLPConfig(**config))
    else:
        raise FormatError(f"{path}: unknown model kind {kind!r}")
    model.load_state(arrays)
    return model, header


def read_checkpoint(path):
    """Returns (model_kind, config dict, ordered name->array dict)."""
    with open(path, "rb") as fh:
        header = _read_header(fh, path, CHECKPOINT_MAGIC)
        raw = fh.read()
    arrays = {}
    offset = 0
    try:
        entries = [(e["name"], tuple(int(s) for s in e["shape"]))
                   for e in header["arrays"]]
        kind = header["model"]
        config = header["config"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: bad header fields: {exc}") from None
    for name, shape in entries:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: payload truncated at array {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count,
                                     offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing payload bytes")
    return kind, config, arrays
