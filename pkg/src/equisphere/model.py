"""Rotationally equivariant spherical CNN and the MLP baseline.

Features live in the even-degree SH coefficient domain (45 slots at the
default band limit).  Spherical convolution multiplies each coefficient by a
learned per-degree weight and mixes channels, which commutes with rotations
exactly.  Pointwise nonlinearities are applied by projecting onto a spherical
grid, applying leaky ReLU there, and projecting back; this is where strict
equivariance is traded for expressiveness.  A soft attention over the three
acquisition shells weights shell feature maps before the trunk fuses them.

For antipodal grids only the unique hemisphere points are evaluated: even
functions take identical values at d and -d, so means, losses and the grid
nonlinearity are unchanged while costing half as much.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import sh


def degree_expander(lmax: int) -> np.ndarray:
    """0/1 matrix E (n_degrees, n_coeffs) scattering per-degree weights onto
    coefficient slots."""
    degs = sh.degree_of_coeff(lmax)
    n_deg = len(sh.even_degrees(lmax))
    out = np.zeros((n_deg, sh.n_coeffs(lmax)))
    out[degs, np.arange(sh.n_coeffs(lmax))] = 1.0
    return out


def degree_slices(lmax: int) -> list[slice]:
    """Contiguous coefficient ranges per even degree."""
    return [slice(sh.coeff_index(l, -l), sh.coeff_index(l, l) + 1)
            for l in sh.even_degrees(lmax)]


def degree_conv(weights: ad.Tensor, x: ad.Tensor, slices: list[slice]) -> ad.Tensor:
    """Fused spherical convolution: out[b,o,k] = sum_i w[o,i,deg(k)] x[b,i,k].

    Semantically identical to expanding the per-degree weights across their
    coefficient slots and contracting einsum("oik,bik->bok"); implemented
    degree-by-degree so each contraction is a dense matrix product.
    """
    w, xd = weights.data, x.data
    b, _, k = xd.shape
    out = np.empty((b, w.shape[0], k))
    for l, sl in enumerate(slices):
        np.einsum("oi,bik->bok", w[:, :, l], xd[:, :, sl], out=out[:, :, sl],
                  optimize=True)

    def bwd(g):
        gw = gx = None
        if weights.requires_grad:
            gw = np.empty_like(w)
            for l, sl in enumerate(slices):
                gw[:, :, l] = np.tensordot(g[:, :, sl], xd[:, :, sl],
                                           axes=([0, 2], [0, 2]))
        if x.requires_grad:
            gx = np.empty_like(xd)
            for l, sl in enumerate(slices):
                np.einsum("oi,bok->bik", w[:, :, l], g[:, :, sl],
                          out=gx[:, :, sl], optimize=True)
        return (gw, gx)

    return ad.make_op(out, (weights, x), bwd)


class SphericalConvLayer:
    """Channel-mixing spherical convolution with degree-shared weights.

    weights has shape (c_out, c_in, n_degrees); the output is
    out[b, o, k] = sum_i weights[o, i, degree(k)] * x[b, i, k],
    which is exactly equivariant because it never mixes orders within a
    degree.  When ``residual`` is set and channel counts match, the input is
    added to the output.
    """

    def __init__(self, c_in: int, c_out: int, lmax: int = sh.LMAX_DEFAULT,
                 residual: bool = False, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(0)
        n_deg = len(sh.even_degrees(lmax))
        self.c_in, self.c_out, self.lmax = c_in, c_out, lmax
        self.weights = ad.parameter(rng.normal(0.0, 1.0 / np.sqrt(c_in),
                                               size=(c_out, c_in, n_deg)))
        self.residual = bool(residual) and c_in == c_out
        self._slices = degree_slices(lmax)

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        y = degree_conv(self.weights, ad._as_tensor(x), self._slices)
        if self.residual:
            y = ad.add(y, x)
        return y


def sh_nonlinearity(x: ad.Tensor, grid: sh.SphericalGrid, slope: float = 0.1) -> ad.Tensor:
    """Grid-domain leaky ReLU: project to grid samples, rectify, project back.

    x has shape (batch, channels, n_coeffs).  Channels are flattened into the
    batch so each projection is a single large matrix product.
    """
    b, c, k = x.shape
    flat = ad.reshape(x, (b * c, k))
    vals = ad.matmul(flat, ad.tensor(grid.nl_isft.T))
    rect = ad.leaky_relu(vals, slope)
    back = ad.matmul(rect, ad.tensor(grid.nl_sft.T))
    return ad.reshape(back, (b, c, k))


class ShellAttention:
    """Soft attention over acquisition shells.

    Pools each shell feature map over the coefficient axis, concatenates the
    pooled vectors, and maps them through a one-hidden-layer network to a
    softmax over shells.  Each shell map is scaled by its weight and the maps
    are concatenated along channels.
    """

    def __init__(self, n_shells: int, channels: int, hidden: int,
                 slope: float = 0.1, rng: np.random.Generator | None = None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.n_shells = n_shells
        self.slope = slope
        d_in = n_shells * channels
        s1 = 1.0 / np.sqrt(d_in)
        s2 = 1.0 / np.sqrt(hidden)
        self.w1 = ad.parameter(rng.uniform(-s1, s1, size=(hidden, d_in)))
        self.b1 = ad.parameter(rng.uniform(-s1, s1, size=hidden))
        self.w2 = ad.parameter(rng.uniform(-s2, s2, size=(n_shells, hidden)))
        self.b2 = ad.parameter(rng.uniform(-s2, s2, size=n_shells))

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, feats):
        pooled = [ad.mean(f, axis=2) for f in feats]
        z = ad.concat(pooled, axis=1)
        h = ad.leaky_relu(ad.linear(z, self.w1, self.b1), self.slope)
        weights = ad.softmax(ad.linear(h, self.w2, self.b2), axis=1)
        scaled = [ad.mul(f, ad.reshape(weights[:, i], (-1, 1, 1)))
                  for i, f in enumerate(feats)]
        return weights, ad.concat(scaled, axis=1)


@dataclass
class SCNNConfig:
    lmax: int = sh.LMAX_DEFAULT
    n_shells: int = 3
    shell_channels: int = 16
    attention_hidden: int = 24
    trunk_channels: tuple = (16, 32, 64, 32, 16)
    fc_hidden: int = 512
    leaky_slope: float = 0.1
    residual: bool = True
    grid_kind: str = "fibonacci-antipodal"
    grid_n: int = 290

    def n_coeffs(self) -> int:
        return sh.n_coeffs(self.lmax)

    def parameter_count(self) -> int:
        """Closed-form count of trainable scalars."""
        n_deg = len(sh.even_degrees(self.lmax))
        k = self.n_coeffs()
        total = self.n_shells * self.shell_channels * 1 * n_deg
        d_in = self.n_shells * self.shell_channels
        total += self.attention_hidden * d_in + self.attention_hidden
        total += self.n_shells * self.attention_hidden + self.n_shells
        c_prev = d_in
        for c in self.trunk_channels:
            total += c * c_prev * n_deg
            c_prev = c
        flat = c_prev * k
        total += self.fc_hidden * flat + self.fc_hidden
        total += 2 * self.fc_hidden  # batch-norm affine
        total += k * self.fc_hidden + k
        return total


def make_model_grid(kind: str, n: int, lmax: int = sh.LMAX_DEFAULT) -> sh.SphericalGrid:
    """Grid used inside the model for nonlinearities and the spatial loss."""
    if kind == "fibonacci-antipodal":
        return sh.antipodal_grid(n, lmax)
    return sh.build_grid(kind, n, lmax)


class SCNN:
    """Spherical CNN mapping per-shell SH signal coefficients to FOD
    coefficients.

    Input is (batch, n_shells, n_coeffs); output (batch, n_coeffs).
    """

    def __init__(self, config: SCNNConfig | None = None, seed: int = 0,
                 grid: sh.SphericalGrid | None = None):
        self.config = config or SCNNConfig()
        cfg = self.config
        self.grid = grid if grid is not None else make_model_grid(cfg.grid_kind, cfg.grid_n, cfg.lmax)
        if self.grid.lmax != cfg.lmax:
            raise ValueError("model grid band limit does not match config")
        rng = np.random.default_rng(seed)
        self.shell_convs = [SphericalConvLayer(1, cfg.shell_channels, cfg.lmax, rng=rng)
                            for _ in range(cfg.n_shells)]
        self.attention = ShellAttention(cfg.n_shells, cfg.shell_channels,
                                        cfg.attention_hidden, cfg.leaky_slope, rng)
        self.trunk = []
        c_prev = cfg.n_shells * cfg.shell_channels
        for c in cfg.trunk_channels:
            self.trunk.append(SphericalConvLayer(c_prev, c, cfg.lmax,
                                                 residual=cfg.residual, rng=rng))
            c_prev = c
        flat = c_prev * cfg.n_coeffs()
        s1 = 1.0 / np.sqrt(flat)
        s2 = 1.0 / np.sqrt(cfg.fc_hidden)
        self.fc1_w = ad.parameter(rng.uniform(-s1, s1, size=(cfg.fc_hidden, flat)))
        self.fc1_b = ad.parameter(rng.uniform(-s1, s1, size=cfg.fc_hidden))
        self.bn_gamma = ad.parameter(np.ones(cfg.fc_hidden))
        self.bn_beta = ad.parameter(np.zeros(cfg.fc_hidden))
        self.bn_state = ad.BatchNormState(cfg.fc_hidden)
        self.fc2_w = ad.parameter(rng.uniform(-s2, s2, size=(cfg.n_coeffs(), cfg.fc_hidden)))
        self.fc2_b = ad.parameter(rng.uniform(-s2, s2, size=cfg.n_coeffs()))

    # -- parameter plumbing ------------------------------------------------

    def named_parameters(self) -> dict:
        out = {}
        for i, conv in enumerate(self.shell_convs):
            out[f"shell_conv.{i}.weights"] = conv.weights
        out["attention.w1"] = self.attention.w1
        out["attention.b1"] = self.attention.b1
        out["attention.w2"] = self.attention.w2
        out["attention.b2"] = self.attention.b2
        for i, conv in enumerate(self.trunk):
            out[f"trunk.{i}.weights"] = conv.weights
        out.update({"fc1.weight": self.fc1_w, "fc1.bias": self.fc1_b,
                    "bn.gamma": self.bn_gamma, "bn.beta": self.bn_beta,
                    "fc2.weight": self.fc2_w, "fc2.bias": self.fc2_b})
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state(self) -> dict:
        arrays = {k: v.data.copy() for k, v in self.named_parameters().items()}
        arrays["bn.running_mean"] = self.bn_state.mean.copy()
        arrays["bn.running_var"] = self.bn_state.var.copy()
        return arrays

    def load_state(self, arrays: dict):
        for k, v in self.named_parameters().items():
            v.data = np.array(arrays[k], dtype=np.float64)
        self.bn_state.mean = np.array(arrays["bn.running_mean"], dtype=np.float64)
        self.bn_state.var = np.array(arrays["bn.running_var"], dtype=np.float64)

    # -- forward -----------------------------------------------------------

    def forward(self, x, training: bool = False, return_attention: bool = False):
        x = ad._as_tensor(x)
        if x.ndim != 3 or x.shape[1] != self.config.n_shells \
                or x.shape[2] != self.config.n_coeffs():
            raise ValueError(
                f"expected input (batch, {self.config.n_shells}, "
                f"{self.config.n_coeffs()}), got {x.shape}")
        slope = self.config.leaky_slope
        feats = []
        for i, conv in enumerate(self.shell_convs):
            xi = x[:, i : i + 1, :]
            feats.append(sh_nonlinearity(conv(xi), self.grid, slope))
        attn, t = self.attention(feats)
        for conv in self.trunk:
            t = sh_nonlinearity(conv(t), self.grid, slope)
        flat = ad.reshape(t, (x.shape[0], -1))
        h = ad.linear(flat, self.fc1_w, self.fc1_b)
        h = ad.batch_norm(h, self.bn_gamma, self.bn_beta, self.bn_state, training)
        h = ad.relu(h)
        out = ad.linear(h, self.fc2_w, self.fc2_b)
        if return_attention:
            return out, attn
        return out

    __call__ = forward


@dataclass
class MLPConfig:
    in_width: int = 83
    hidden: tuple = (256, 256, 256, 256)
    out_width: int = sh.n_coeffs(sh.LMAX_DEFAULT)


class MLP:
    """Voxelwise baseline: raw normalized signals to FOD coefficients."""

    def __init__(self, config: MLPConfig | None = None, seed: int = 0):
        self.config = config or MLPConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.layers = []
        d_prev = cfg.in_width
        for width in cfg.hidden:
            s = 1.0 / np.sqrt(d_prev)
            self.layers.append({
                "weight": ad.parameter(rng.uniform(-s, s, size=(width, d_prev))),
                "bias": ad.parameter(rng.uniform(-s, s, size=width)),
                "gamma": ad.parameter(np.ones(width)),
                "beta": ad.parameter(np.zeros(width)),
                "state": ad.BatchNormState(width),
            })
            d_prev = width
        s = 1.0 / np.sqrt(d_prev)
        self.out_w = ad.parameter(rng.uniform(-s, s, size=(cfg.out_width, d_prev)))
        self.out_b = ad.parameter(rng.uniform(-s, s, size=cfg.out_width))

    def named_parameters(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for key in ("weight", "bias", "gamma", "beta"):
                out[f"layer.{i}.{key}"] = layer[key]
        out["out.weight"] = self.out_w
        out["out.bias"] = self.out_b
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state(self) -> dict:
        arrays = {k: v.data.copy() for k, v in self.named_parameters().items()}
        for i, layer in enumerate(self.layers):
            arrays[f"layer.{i}.running_mean"] = layer["state"].mean.copy()
            arrays[f"layer.{i}.running_var"] = layer["state"].var.copy()
        return arrays

    def load_state(self, arrays: dict):
        for k, v in self.named_parameters().items():
            v.data = np.array(arrays[k], dtype=np.float64)
        for i, layer in enumerate(self.layers):
            layer["state"].mean = np.array(arrays[f"layer.{i}.running_mean"])
            layer["state"].var = np.array(arrays[f"layer.{i}.running_var"])

    def forward(self, x, training: bool = False):
        x = ad._as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.config.in_width:
            raise ValueError(f"expected input (batch, {self.config.in_width}), got {x.shape}")
        h = x
        for layer in self.layers:
            h = ad.linear(h, layer["weight"], layer["bias"])
            h = ad.batch_norm(h, layer["gamma"], layer["beta"], layer["state"], training)
            h = ad.relu(h)
        return ad.linear(h, self.out_w, self.out_b)

    __call__ = forward


def spatial_mse_loss(pred, target, grid: sh.SphericalGrid) -> ad.Tensor:
    """Mean squared difference of the two functions sampled on the grid.

    Equals (1 / (N * B)) * ||U (p - t)||_F^2 with U the grid evaluation
    matrix.  On antipodal grids the unique hemisphere stands in for the full
    point set; the value is identical because samples repeat exactly.
    """
    pred = ad._as_tensor(pred)
    target = ad._as_tensor(target)
    u_t = ad.tensor(grid.nl_isft.T)
    return ad.mse(ad.matmul(pred, u_t), ad.matmul(target, u_t))
