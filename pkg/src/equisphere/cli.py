"""Command line: synthesis, SH fitting, training, prediction, evaluation,
tracking, and an equivariance self-test behind one executable.

Handlers import the numeric stack lazily so argument and config errors stay
fast and so the EQUISPHERE_THREADS cap can land in the BLAS environment
variables before numpy loads.  Every failure prints a single ``error:`` line
to stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import ConfigError, DEFAULTS, load_config, write_resolved

CONV_TOL = 1e-10
ROUNDTRIP_TOL = 1e-10
SIMPLEX_TOL = 1e-12
GRAD_TOL = 1e-4
FD_STEP = 1e-5


def _apply_thread_cap() -> None:
    cap = os.environ.get("EQUISPHERE_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, cap)


# ---------------------------------------------------------------------------
# shared plumbing


def _scatter(values, indices, shape, fill=0.0, dtype=None):
    """Per-voxel rows (V, C) into a dense (X, Y, Z, C) volume."""
    import numpy as np
    values = np.asarray(values)
    if values.ndim == 1:
        values = values[:, None]
    out = np.full(tuple(shape) + (values.shape[1],), fill,
                  dtype=dtype or values.dtype)
    ix, iy, iz = np.asarray(indices).T
    out[ix, iy, iz] = values
    return out


def _read_mask(path):
    from . import io
    vol, header = io.read_volume(path)
    return vol[..., 0] > 0, header


def _grad_prefix(path: str) -> str:
    for ext in (".bval", ".bvec"):
        if path.endswith(ext):
            return path[: -len(ext)]
    return path


def _read_table(prefix: str):
    from . import io
    return io.read_gradient_table(prefix + ".bval", prefix + ".bvec")


def _data_config(data: Path, explicit: str | None) -> dict:
    """Config for a dataset directory: explicit file, else the resolved
    config written by synth, else pure defaults."""
    if explicit:
        return load_config(explicit)
    resolved = data / DEFAULTS["paths"]["resolved"]
    return load_config(str(resolved) if resolved.exists() else None)


def _load_inputs(data: Path, paths: dict, kind: str):
    """Model inputs for every masked voxel of a dataset directory.

    Returns (inputs, mask, mask_header, data_lmax); data_lmax is None for
    signal-space (mlp) inputs.
    """
    import numpy as np
    from . import io, sh, synth

    mask, header = _read_mask(data / paths["mask"])
    proto, shell_cols, b0_cols = _read_table(str(data / paths["grad"]))
    if kind == "scnn":
        vol, _ = io.read_volume(data / paths["features"])
        if vol.shape[:3] != mask.shape:
            raise ValueError("features and mask shapes differ")
        feats = vol[mask]
        n_shells = len(proto.shells)
        if feats.shape[1] % n_shells:
            raise ValueError(f"feature volume has {feats.shape[1]} channels, "
                             f"not divisible by {n_shells} shells")
        k_in = feats.shape[1] // n_shells
        inputs = feats.reshape(-1, n_shells, k_in)
        return inputs, mask, header, sh.lmax_for(k_in)
    vol, _ = io.read_volume(data / paths["signal"])
    if vol.shape[:3] != mask.shape:
        raise ValueError("signal and mask shapes differ")
    sig = vol[mask]
    n_cols = len(b0_cols) + sum(len(c) for c in shell_cols)
    if sig.shape[1] != n_cols:
        raise ValueError(f"signal volume has {sig.shape[1]} columns, "
                         f"gradient table describes {n_cols}")
    b0_set = set(b0_cols)
    dwi_cols = [c for c in range(sig.shape[1]) if c not in b0_set]
    norm, _ = synth.normalize_signals(sig[:, dwi_cols], sig[:, list(b0_cols)])
    return norm, mask, header, None


def _build_model(cfg: dict, kind: str, n_shells: int, lmax: int,
                 in_width: int, out_width: int, seed: int):
    from .model import MLP, MLPConfig, SCNN, SCNNConfig
    if kind == "scnn":
        mc = cfg["model"]["scnn"]
        return SCNN(SCNNConfig(
            lmax=lmax, n_shells=n_shells,
            shell_channels=mc["shell_channels"],
            attention_hidden=mc["attention_hidden"],
            trunk_channels=tuple(mc["trunk_channels"]),
            fc_hidden=mc["fc_hidden"], leaky_slope=mc["leaky_slope"],
            residual=mc["residual"], grid_kind=mc["grid_kind"],
            grid_n=mc["grid_n"]), seed=seed)
    return MLP(MLPConfig(in_width=in_width,
                         hidden=tuple(cfg["model"]["mlp"]["hidden"]),
                         out_width=out_width), seed=seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from . import io, synth
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = cfg["paths"]
    write_resolved(cfg, out / paths["resolved"])

    master = cfg["seeds"]["master"]
    p, ph = cfg["protocol"], cfg["phantom"]
    protocol = synth.make_protocol(p["name"])
    phantom = synth.make_phantom(
        shape=tuple(ph["shape"]), voxel_size=ph["voxel_size"], seed=master,
        tissue=ph["tissue"], kappa=ph["kappa"],
        n_fiber_probs=tuple(ph["n_fiber_probs"]),
        fraction_range=tuple(ph["fraction_range"]),
        crossing_range_deg=tuple(ph["crossing_range_deg"]),
        iso_range=tuple(ph["iso_range"]))
    ds = synth.build_dataset(phantom, protocol, snr=p["snr"], seed=master,
                             lam=p["sh_lambda"], lmax=p["lmax"])

    vs = phantom.voxel_size
    idx, shape = ds.voxel_indices, ds.shape
    n_shells = len(protocol.shells)
    io.write_volume(out / paths["signal"], _scatter(ds.signals, idx, shape),
                    vs, "dwi-signal")
    io.write_volume(out / paths["features"],
                    _scatter(ds.shell_coeffs.reshape(len(idx), -1), idx, shape),
                    vs, "shell-sh",
                    extra={"lmax": p["lmax"], "n_shells": n_shells})
    io.write_volume(out / paths["mask"],
                    phantom.mask[..., None].astype("u1"), vs, "mask",
                    dtype="u8")
    io.write_volume(out / paths["gt_fod"], _scatter(ds.targets, idx, shape),
                    vs, "fod-sh", extra={"lmax": p["lmax"]})
    # split labels: 0 train / 1 val / 2 test, 255 outside the mask
    io.write_volume(out / paths["split"],
                    _scatter(ds.split.astype("u1"), idx, shape, fill=255,
                             dtype="u1"),
                    vs, "split-labels", dtype="u8")
    io.write_gradient_table(out / (paths["grad"] + ".bval"),
                            out / (paths["grad"] + ".bvec"),
                            protocol.bvals(), protocol.bvecs())
    print(f"synth: {len(idx)} voxels, protocol {protocol.name}, "
          f"snr {p['snr']}, lmax {p['lmax']} -> {out}")
    return 0


def cmd_fit_sh(args) -> int:
    import numpy as np
    from . import io, sh, synth
    vol, header = io.read_volume(args.dwi)
    proto, shell_cols, b0_cols = _read_table(_grad_prefix(args.grad))
    n_cols = len(b0_cols) + sum(len(c) for c in shell_cols)
    if vol.shape[3] != n_cols:
        raise ValueError(f"dwi volume has {vol.shape[3]} columns, "
                         f"gradient table describes {n_cols}")
    flat = vol.reshape(-1, vol.shape[3])
    b0 = flat[:, list(b0_cols)]
    live = b0.mean(axis=1) > 0
    b0_set = set(b0_cols)
    dwi_cols = [c for c in range(flat.shape[1]) if c not in b0_set]
    norm, _ = synth.normalize_signals(flat[live][:, dwi_cols], b0[live])
    col_pos = {c: i for i, c in enumerate(dwi_cols)}
    k = sh.n_coeffs(args.lmax)
    coeffs = np.zeros((flat.shape[0], len(proto.shells) * k))
    for s, (cols, shell) in enumerate(zip(shell_cols, proto.shells)):
        pos = [col_pos[c] for c in cols]
        coeffs[live, s * k:(s + 1) * k] = sh.fit_sh_regularized(
            norm[:, pos], shell.directions, lmax=args.lmax, lam=args.lam)
    io.write_volume(args.out, coeffs.reshape(vol.shape[:3] + (-1,)),
                    float(header["voxel_size"]), "shell-sh",
                    extra={"lmax": args.lmax, "n_shells": len(proto.shells),
                           "sh_lambda": args.lam})
    print(f"fit-sh: {int(live.sum())} voxels, {len(proto.shells)} shells, "
          f"lmax {args.lmax} -> {args.out}")
    return 0


def cmd_train(args) -> int:
    from . import io, sh, train
    data = Path(args.data)
    cfg = _data_config(data, args.config)
    paths = cfg["paths"]
    kind = args.model or cfg["model"]["kind"]
    master = cfg["seeds"]["master"]

    inputs, mask, header, _ = _load_inputs(data, paths, kind)
    gt, _ = io.read_volume(data / paths["gt_fod"])
    targets = gt[mask]
    split_vol, _ = io.read_volume(data / paths["split"])
    split = split_vol[..., 0][mask].astype(int)
    tr = split == 0
    va = split == 1
    if not tr.any() or not va.any():
        raise ValueError("dataset needs nonempty train and val splits")

    lmax = sh.lmax_for(targets.shape[1])
    n_shells = inputs.shape[1] if kind == "scnn" else 0
    model = _build_model(cfg, kind, n_shells, lmax,
                         inputs.shape[1] if kind == "mlp" else 0,
                         targets.shape[1], master)
    t = cfg["training"]
    result = train.train_model(
        model, inputs[tr], targets[tr], inputs[va], targets[va],
        epochs=t["epochs"], batch_size=t["batch_size"], base_lr=t["base_lr"],
        weight_decay=t["weight_decay"], clip_norm=t["clip_norm"],
        lr_step_epochs=t["lr_step_epochs"], lr_factor=t["lr_factor"],
        seed=master, log_path=str(args.out) + ".log.csv")
    io.save_model(args.out, model,
                  extra={"lmax": lmax, "best_epoch": result.best_epoch,
                         "best_val_loss": result.best_val_loss, "train_seed": master})
    print(f"train[{kind}]: {int(tr.sum())} train / {int(va.sum())} val voxels, "
          f"best val {result.best_val_loss:.6e} at epoch {result.best_epoch} "
          f"-> {args.out}")
    return 0


def cmd_predict(args) -> int:
    from . import io, sh, train
    from .model import SCNN
    model, header = io.load_model(args.ckpt)
    data = Path(args.data)
    cfg = _data_config(data, None)
    kind = "scnn" if isinstance(model, SCNN) else "mlp"

    inputs, mask, mh, data_lmax = _load_inputs(data, cfg["paths"], kind)
    if kind == "scnn":
        if data_lmax != model.config.lmax:
            raise ValueError(f"checkpoint lmax {model.config.lmax}, "
                             f"data lmax {data_lmax}")
        if inputs.shape[1] != model.config.n_shells:
            raise ValueError(f"checkpoint expects {model.config.n_shells} "
                             f"shells, data has {inputs.shape[1]}")
        out_lmax = model.config.lmax
    else:
        if inputs.shape[1] != model.config.in_width:
            raise ValueError(f"checkpoint expects {model.config.in_width} "
                             f"weighted columns, data has {inputs.shape[1]}")
        out_lmax = sh.lmax_for(model.config.out_width)

    import numpy as np
    preds = train.predict(model, inputs)
    vol = _scatter(preds, np.argwhere(mask), mask.shape)
    io.write_volume(args.out, vol, float(mh["voxel_size"]), "fod-sh",
                    extra={"lmax": out_lmax, "model": kind})
    print(f"predict[{kind}]: {preds.shape[0]} voxels -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    import numpy as np
    from . import io, metrics, sh
    pred, _ = io.read_volume(args.pred)
    gt, _ = io.read_volume(args.gt)
    mask, mh = _read_mask(args.mask)
    if pred.shape != gt.shape or pred.shape[:3] != mask.shape:
        raise ValueError("pred, gt, and mask shapes differ")
    idx = np.argwhere(mask)
    p, g = pred[mask], gt[mask]
    grid = sh.build_grid("fibonacci", args.grid_n, sh.lmax_for(g.shape[1])) \
        if args.grid_n else None
    # constant predictor (mean ground-truth FOD) as the trivial baseline
    base = np.broadcast_to(g.mean(axis=0), g.shape)
    report = metrics.evaluate_fods(
        p, g, voxel_indices=idx, shape=mask.shape, mask=mask, grid=grid,
        meta={"constant_baseline_mse": metrics.mse_sh(base, g)})
    csv_path = args.csv or os.path.splitext(args.out)[0] + ".csv"
    report.write(args.out, csv_path)
    s = report.summary()
    print(f"evaluate: {s['n_voxels']} voxels, mse {s['mse']['mean']:.6e}, "
          f"acc {s['acc']['mean']:.4f}, ssim {s['ssim_sh0']:.4f} -> {args.out}")
    return 0


def cmd_track(args) -> int:
    from . import io, tracking
    vol, vh = io.read_volume(args.fod)
    mask, mh = _read_mask(args.mask)
    cfg = load_config(args.config)
    t = cfg["tracking"]
    vs = float(vh["voxel_size"])
    tcfg = tracking.TrackingConfig(
        step_size=t["step_vox"] * vs, max_angle_deg=t["max_angle_deg"],
        cutoff=t["cutoff"], min_length=t["min_length"],
        max_length=t["max_length"], seeds_per_voxel=t["seeds_per_voxel"],
        seed=cfg["seeds"]["master"])
    lines = tracking.track(vol, mask, tcfg, voxel_size=vs)
    stats = tracking.tract_stats(lines, mask, vs)
    io.write_streamlines(args.out, [l.points for l in lines],
                         step_size=tcfg.step_size, voxel_size=vs,
                         extra={"terminations": stats.terminations})
    with open(str(args.out) + ".stats.json", "w") as fh:
        fh.write(stats.to_json())
    print(f"track: {stats.count} streamlines, mean length "
          f"{stats.mean_length:.2f} mm, coverage {stats.coverage:.3f} "
          f"-> {args.out}")
    return 0


def _fd_max_rel(model, inputs, targets, grid, rng, n_entries: int = 3) -> float:
    """Max relative error of tape gradients against central differences on
    a few sampled entries of every parameter tensor."""
    import numpy as np
    from . import autodiff as ad
    from .model import spatial_mse_loss

    def loss_value() -> float:
        return spatial_mse_loss(model.forward(inputs, training=True),
                                ad.tensor(targets), grid).item()

    params = model.parameters()
    for p in params:
        p.grad = None
    with ad.Tape() as tape:
        loss = spatial_mse_loss(model.forward(inputs, training=True),
                                ad.tensor(targets), grid)
        tape.backward(loss)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        for j in rng.choice(flat.size, size=min(n_entries, flat.size),
                            replace=False):
            keep = flat[j]
            flat[j] = keep + FD_STEP
            up = loss_value()
            flat[j] = keep - FD_STEP
            down = loss_value()
            flat[j] = keep
            fd = (up - down) / (2 * FD_STEP)
            worst = max(worst, abs(gflat[j] - fd) / max(abs(fd), 1.0))
    return worst


def cmd_equiv_test(args) -> int:
    import numpy as np
    from . import autodiff as ad
    from . import sh
    from .model import (MLP, MLPConfig, SCNN, SCNNConfig, ShellAttention,
                        spatial_mse_loss)

    rng = np.random.default_rng(args.seed)
    k = sh.n_coeffs(sh.LMAX_DEFAULT)
    ok = True

    model = SCNN(seed=args.seed)
    layers = [("shell-conv", model.shell_convs[0])]
    layers += [(f"trunk-conv-{i}", c) for i, c in enumerate(model.trunk)]
    worst = 0.0
    for _, layer in layers:
        for _ in range(args.trials):
            x = rng.standard_normal((1, layer.c_in, k))
            rot = sh.random_rotation(rng)
            direct = layer(ad.tensor(x)).data
            rot_then = layer(ad.tensor(
                sh.wigner_rotate(x.reshape(-1, k), rot).reshape(x.shape))).data
            then_rot = sh.wigner_rotate(direct.reshape(-1, k),
                                        rot).reshape(direct.shape)
            worst = max(worst, float(np.abs(rot_then - then_rot).max()))
    good = worst < CONV_TOL
    ok &= good
    print(f"conv equivariance: {len(layers)} layer configs x {args.trials} "
          f"pairs, max residual {worst:.3e} "
          f"{'PASS' if good else f'FAIL (tol {CONV_TOL:g})'}")

    grid = sh.default_grid()
    coeffs = rng.standard_normal((max(args.trials, 1), k))
    resid = float(np.abs(grid.to_coeffs(grid.to_grid(coeffs)) - coeffs).max())
    good = resid < ROUNDTRIP_TOL
    ok &= good
    print(f"sft/isft round trip: {grid.n_points} points, condition "
          f"{grid.condition_number:.4f}, max residual {resid:.3e} "
          f"{'PASS' if good else f'FAIL (tol {ROUNDTRIP_TOL:g})'}")

    sum_err, min_w = 0.0, np.inf
    for _ in range(args.trials):
        att = ShellAttention(3, 4, 6, 0.1, rng)
        feats = [ad.tensor(rng.standard_normal((2, 4, k))) for _ in range(3)]
        w = att(feats)[0].data
        sum_err = max(sum_err, float(np.abs(w.sum(axis=1) - 1.0).max()))
        min_w = min(min_w, float(w.min()))
    good = sum_err < SIMPLEX_TOL and min_w >= 0.0
    ok &= good
    print(f"attention simplex: {args.trials} trials, |sum-1| {sum_err:.3e}, "
          f"min weight {min_w:.3e} "
          f"{'PASS' if good else f'FAIL (tol {SIMPLEX_TOL:g})'}")

    small = SCNN(SCNNConfig(shell_channels=4, attention_hidden=6,
                            trunk_channels=(4, 4), fc_hidden=16, grid_n=200),
                 seed=args.seed)
    x = rng.standard_normal((2, 3, k))
    y = rng.standard_normal((2, k))
    rel = _fd_max_rel(small, x, y, small.grid, rng)
    mlp = MLP(MLPConfig(in_width=20, hidden=(16, 16)), seed=args.seed)
    xm = rng.standard_normal((2, 20))
    rel = max(rel, _fd_max_rel(mlp, xm, y, small.grid, rng))
    good = rel < GRAD_TOL
    ok &= good
    print(f"gradient check: central differences h={FD_STEP:g}, max relative "
          f"error {rel:.3e} {'PASS' if good else f'FAIL (tol {GRAD_TOL:g})'}")

    if not ok:
        raise ValueError("equiv-test failed")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="equisphere",
        description="Rotationally equivariant FOD estimation on synthetic "
                    "multi-shell diffusion data.")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", formatter_class=fmt,
                       help="simulate a phantom dataset into a directory")
    p.add_argument("--config", default=None,
                   help="run-config JSON; omitted keys take defaults")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit-sh", formatter_class=fmt,
                       help="fit per-shell SH coefficients to a DWI volume")
    p.add_argument("--dwi", required=True, help="signal volume (.eqsv)")
    p.add_argument("--grad", required=True,
                   help="gradient table prefix or .bval/.bvec path")
    p.add_argument("--lmax", type=int, default=8, help="band limit")
    p.add_argument("--lambda", dest="lam", type=float, default=0.006,
                   help="Laplace-Beltrami regularization weight")
    p.add_argument("--out", required=True, help="output SH volume (.eqsv)")
    p.set_defaults(func=cmd_fit_sh)

    p = sub.add_parser("train", formatter_class=fmt,
                       help="train a model on a synthesized dataset")
    p.add_argument("--config", default=None,
                   help="run-config JSON; default: the dataset's resolved config")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--model", choices=("scnn", "mlp"), default=None,
                   help="override the configured model kind")
    p.add_argument("--out", required=True,
                   help="checkpoint path (.eqck); log goes to <out>.log.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", formatter_class=fmt,
                       help="predict an FOD volume from a checkpoint")
    p.add_argument("--ckpt", required=True, help="model checkpoint (.eqck)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output FOD volume (.eqsv)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", formatter_class=fmt,
                       help="compare predicted and reference FOD volumes")
    p.add_argument("--pred", required=True, help="predicted FOD volume")
    p.add_argument("--gt", required=True, help="reference FOD volume")
    p.add_argument("--mask", required=True, help="mask volume")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--csv", default=None,
                   help="per-voxel CSV path (default: report path with .csv)")
    p.add_argument("--grid-n", type=int, default=0,
                   help="dense grid size; 0 uses the package default (724)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("track", formatter_class=fmt,
                       help="probabilistic tractography (iFOD2-lite) on an "
                            "FOD volume")
    p.add_argument("--fod", required=True, help="FOD SH volume (.eqsv)")
    p.add_argument("--mask", required=True, help="seed/termination mask")
    p.add_argument("--config", default=None,
                   help="run-config JSON (tracking + seeds sections)")
    p.add_argument("--out", required=True,
                   help="streamline path (.eqtr); stats go to <out>.stats.json")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("equiv-test", formatter_class=fmt,
                       help="equivariance / gradient / round-trip self-test")
    p.add_argument("--trials", type=int, default=100,
                   help="random trials per property")
    p.add_argument("--seed", type=int, default=0, help="rng seed")
    p.set_defaults(func=cmd_equiv_test)

    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except (ConfigError, ValueError, RuntimeError, OSError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
