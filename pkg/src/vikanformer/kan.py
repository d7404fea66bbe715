"""
Dimension-wise KAN feed-forward blocks.

Every block maps Tensor[n, d] -> Tensor[n, d] as

    y = W [phi_1(x_1) (+) ... (+) phi_d(x_d)]

where each phi_j is a learnable scalar -> scalar function built from a sine,
Fourier, Gaussian RBF or B-spline expansion. The MLP variant is the usual
linear -> GELU -> linear block and shares the same interface.
"""
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from vikanformer.entity import ExpansionConfig
from vikanformer.errors import ConfigError, ShapeError
from vikanformer.nn import LinearParams, init_linear, linear
from vikanformer.tensor import Tensor, concat, matmul, parameter


@dataclass
class SineKanParams:
    alpha: Tensor  # [d, M]
    omega: Tensor
    b: Tensor


@dataclass
class FourierKanParams:
    a_sin: Tensor  # [d, M], harmonic k = 1..M
    a_cos: Tensor


@dataclass
class FastKanParams:
    centers: Tensor  # [d, C]
    log_widths: Tensor
    weights: Tensor

    @property
    def widths(self) -> Tensor:
        return self.log_widths.exp()


@dataclass
class SplineKanParams:
    grid: np.ndarray  # [d, knots + 2 * order], fixed
    coef: Tensor  # [d, B]
    order: int
    base_weight: Tensor | None = None  # [d], VanillaKAN only


# W in y = W[phi_1(x_1) (+) ... (+) phi_d(x_d)]
MixerParams = LinearParams
PhiParams = SineKanParams | FourierKanParams | FastKanParams | SplineKanParams


@dataclass
class KanFfnParams:
    phi: PhiParams
    mixer: MixerParams


@dataclass
class MlpFfnParams:
    fc1: LinearParams
    fc2: LinearParams


ExpansionParams = KanFfnParams | MlpFfnParams


# *** B-spline basis ***
def bspline_grid(knots: int, order: int, grid_range: tuple[float, float]) -> np.ndarray:
    """`knots` uniform points over grid_range, extended by `order` points on each side."""
    lo, hi = grid_range
    h = (hi - lo) / (knots - 1)
    return np.arange(-order, knots + order, dtype=np.float64) * h + lo


def bspline_basis(grid: np.ndarray, order: int, x: float) -> np.ndarray:
    """
    Cox–de Boor recursion at a single point. `order` is the polynomial degree;
    the result has len(grid) - 1 - order entries and sums to one on the
    un-extended part of the grid.
    """
    grid = np.asarray(grid, dtype=np.float64)
    bases = ((x >= grid[:-1]) & (x < grid[1:])).astype(np.float64)
    for k in range(1, order + 1):
        left = (x - grid[:-(k + 1)]) / (grid[k:-1] - grid[:-(k + 1)]) * bases[:-1]
        right = (grid[k + 1:] - x) / (grid[k + 1:] - grid[1:-k]) * bases[1:]
        bases = left + right
    return bases


def spline_bases(x: Tensor, grid: np.ndarray, order: int) -> Tensor:
    """Batched, differentiable Cox–de Boor: x [n, c] with grid [c, G] -> [n, c, G - 1 - order]."""
    x3 = x.reshape(*x.shape, 1)
    xv = x3.data
    bases = Tensor(((xv >= grid[:, :-1]) & (xv < grid[:, 1:])), dtype=x.dtype)
    for k in range(1, order + 1):
        left = (x3 - grid[:, :-(k + 1)]) / (grid[:, k:-1] - grid[:, :-(k + 1)]) * bases[:, :, :-1]
        right = (grid[:, k + 1:] - x3) / (grid[:, k + 1:] - grid[:, 1:-k]) * bases[:, :, 1:]
        bases = left + right
    return bases


@lru_cache(maxsize=None)
def blending_polynomials(order: int) -> np.ndarray:
    """
    [order + 1 powers, order + 1 bases]: on one span of a uniform grid the
    order + 1 non-zero B-splines are fixed polynomials of the local coordinate
    u in [0, 1). Row e holds the coefficients of u**e.
    """
    reference = np.arange(2 * order + 2, dtype=np.float64)
    u = np.arange(order + 1, dtype=np.float64) / (order + 1)
    values = np.array([bspline_basis(reference, order, order + t) for t in u])
    return np.linalg.solve(np.vander(u, order + 1, increasing=True), values)


def spline_local(p: SplineKanParams, x: Tensor) -> Tensor:
    """
    sum_i coef[j, i] B_i(x[n, j]) touching only the order + 1 bases that are
    non-zero on the span holding x. Requires the uniform grid of `bspline_grid`.
    """
    n, d = x.shape
    order = p.order
    grid = p.grid[0]
    lo, h = grid[0], grid[1] - grid[0]
    span = np.clip(np.floor((x.data - lo) / h), 0, len(grid) - 2).astype(np.int64)
    inside = ((x.data >= grid[0]) & (x.data < grid[-1])).astype(x.dtype)

    # Horner 法で u の多項式を評価
    u = ((x - lo) * (1.0 / h) - span).reshape(n, d, 1)
    poly = blending_polynomials(order)
    weights = u * poly[order] + poly[order - 1]
    for e in range(order - 2, -1, -1):
        weights = weights * u + poly[e]

    # span s の非ゼロ基底は i = s - order .. s; 両端をゼロ埋めして i + order で引く
    pad = Tensor(np.zeros((d, order)), dtype=p.coef.dtype)
    padded = concat([pad, p.coef, pad], axis=1)
    cols = span[:, :, None] + np.arange(order + 1)
    rows = np.broadcast_to(np.arange(d)[None, :, None], cols.shape)
    return (weights * padded[rows, cols]).sum(axis=-1) * inside


# *** dimension-wise expansions phi ***
def _check_input(x: Tensor, channels: int):
    if x.ndim != 2 or x.shape[1] != channels:
        raise ShapeError(f"expansion expects [n, {channels}], got {x.shape}")


def phi_sine(p: SineKanParams, x: Tensor) -> Tensor:
    """out[i,j] = sum_m alpha[j,m] sin(omega[j,m] x[i,j] + b[j,m])"""
    _check_input(x, p.alpha.shape[0])
    x3 = x.reshape(*x.shape, 1)
    return (p.alpha * (x3 * p.omega + p.b).sin()).sum(axis=-1)


def phi_fourier(p: FourierKanParams, x: Tensor) -> Tensor:
    """out[i,j] = sum_k a_sin[j,k] sin(k x[i,j]) + a_cos[j,k] cos(k x[i,j])"""
    _check_input(x, p.a_sin.shape[0])
    harmonics = np.arange(1, p.a_sin.shape[1] + 1, dtype=np.float64)
    kx = x.reshape(*x.shape, 1) * harmonics
    return (p.a_sin * kx.sin() + p.a_cos * kx.cos()).sum(axis=-1)


def phi_rbf(p: FastKanParams, x: Tensor) -> Tensor:
    """out[i,j] = sum_c w[j,c] exp(-((x[i,j] - c[j,c]) / sigma[j,c])^2)"""
    _check_input(x, p.centers.shape[0])
    z = (x.reshape(*x.shape, 1) - p.centers) / p.widths
    return (p.weights * (-(z * z)).exp()).sum(axis=-1)


def phi_spline(p: SplineKanParams, x: Tensor, with_base: bool) -> Tensor:
    """
    with_base=True is the VanillaKAN form: per dimension, only the order + 1
    bases alive on the span of x are evaluated, plus base_weight * silu(x).
    with_base=False is the EfficientKAN form: the full [n, d*B] basis matrix
    from the batched recursion times a block-diagonal [d*B, d] coefficient matrix.
    Both evaluate the same spline family.
    """
    d, n_basis = p.coef.shape
    _check_input(x, d)
    if with_base:
        out = spline_local(p, x)
        if p.base_weight is not None:
            out = out + p.base_weight * x.silu()
        return out
    bases = spline_bases(x, p.grid, p.order)
    block_mask = np.kron(np.eye(d), np.ones((n_basis, 1)))
    block_coef = p.coef.reshape(d * n_basis, 1) * block_mask
    return matmul(bases.reshape(x.shape[0], d * n_basis), block_coef)


def apply_phi(cfg: ExpansionConfig, phi: PhiParams, x: Tensor) -> Tensor:
    match cfg.variant:
        case "sinekan":
            return phi_sine(phi, x)
        case "fourierkan":
            return phi_fourier(phi, x)
        case "fastkan":
            return phi_rbf(phi, x)
        case "vanillakan":
            return phi_spline(phi, x, with_base=True)
        case "efficientkan":
            return phi_spline(phi, x, with_base=False)
    raise ConfigError(f"unknown KAN variant {cfg.variant!r}")


def kan_ffn(cfg: ExpansionConfig, params: ExpansionParams, x: Tensor) -> Tensor:
    """Feed-forward sub-layer: Tensor[..., d] -> Tensor[..., d]."""
    lead, d = x.shape[:-1], x.shape[-1]
    rows = x.reshape(-1, d)
    if cfg.variant == "mlp":
        out = linear(params.fc2, linear(params.fc1, rows).gelu())
    elif cfg.variant in ("sinekan", "fourierkan", "fastkan", "vanillakan", "efficientkan"):
        if cfg.hidden_multiplier > 1:
            rows = concat([rows] * cfg.hidden_multiplier, axis=-1)
        out = linear(params.mixer, apply_phi(cfg, params.phi, rows))
    else:
        raise ConfigError(f"unknown variant {cfg.variant!r}")
    return out.reshape(*lead, d)


# *** initialization ***
def init_phi(cfg: ExpansionConfig, channels: int, rng: np.random.Generator) -> PhiParams:
    shape_m = (channels, cfg.M)
    match cfg.variant:
        case "sinekan":
            # omega, b ~ U[-1, 1]; amplitudes scaled by 1/M
            omega = rng.uniform(-1.0, 1.0, size=shape_m)
            b = rng.uniform(-1.0, 1.0, size=shape_m)
            alpha = rng.uniform(-1.0, 1.0, size=shape_m) / cfg.M
            return SineKanParams(alpha=parameter(alpha), omega=parameter(omega), b=parameter(b))
        case "fourierkan":
            a_sin = rng.uniform(-1.0, 1.0, size=shape_m) / cfg.M
            a_cos = rng.uniform(-1.0, 1.0, size=shape_m) / cfg.M
            return FourierKanParams(a_sin=parameter(a_sin), a_cos=parameter(a_cos))
        case "fastkan":
            shape_c = (channels, cfg.centers)
            centers = rng.uniform(0.0, 1.0, size=shape_c)
            # U[0,1) の下限を切って log を有限に保つ
            widths = np.maximum(rng.uniform(0.0, 1.0, size=shape_c), 1e-3)
            weights = rng.uniform(-1.0, 1.0, size=shape_c) / math.sqrt(cfg.centers)
            return FastKanParams(
                centers=parameter(centers), log_widths=parameter(np.log(widths)), weights=parameter(weights)
            )
        case "vanillakan" | "efficientkan":
            grid = np.tile(bspline_grid(cfg.knots, cfg.order, cfg.grid_range), (channels, 1))
            coef = rng.uniform(-1.0, 1.0, size=(channels, cfg.n_basis)) / math.sqrt(cfg.n_basis)
            base_weight = parameter(np.ones(channels)) if cfg.variant == "vanillakan" else None
            return SplineKanParams(grid=grid, coef=parameter(coef), order=cfg.order, base_weight=base_weight)
    raise ConfigError(f"unknown KAN variant {cfg.variant!r}")


def init_expansion(cfg: ExpansionConfig, d: int, rng: np.random.Generator) -> ExpansionParams:
    if cfg.variant == "mlp":
        return MlpFfnParams(fc1=init_linear(d, cfg.hidden, rng), fc2=init_linear(cfg.hidden, d, rng))
    channels = d * cfg.hidden_multiplier
    phi = init_phi(cfg, channels, rng)
    return KanFfnParams(phi=phi, mixer=init_linear(channels, d, rng))


def expansion_param_count(cfg: ExpansionConfig, d: int) -> int:
    """Closed-form learnable scalar count of one feed-forward block."""
    if cfg.variant == "mlp":
        return d * cfg.hidden + cfg.hidden + cfg.hidden * d + d
    c = d * cfg.hidden_multiplier
    mixer = c * d + d
    match cfg.variant:
        case "sinekan":
            return 3 * c * cfg.M + mixer
        case "fourierkan":
            return 2 * c * cfg.M + mixer
        case "fastkan":
            return 3 * c * cfg.centers + mixer
        case "efficientkan":
            return c * cfg.n_basis + mixer
        case "vanillakan":
            return c * cfg.n_basis + c + mixer
    raise ConfigError(f"unknown variant {cfg.variant!r}")
