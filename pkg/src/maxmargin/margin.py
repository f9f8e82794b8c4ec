"""Margin estimation and exact low-dimensional oracles.

The margin of (x, y) is the smallest perturbation norm that makes the
logit-margin loss reach 0 (prediction leaves class y). The adaptive-radius
attack estimates it in any dimension; the grid oracles certify it (up to
grid resolution) for inputs of dimension <= 3; the analytic oracle covers
binary linear models exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import attacks, losses, nn
from .attacks import Norm, PgdConfig
from .errors import DegenerateDirectionError
from .losses import LossKind
from .rng import derive_seed

_CHUNK = 1 << 17


@dataclass
class MarginEstimate:
    """Approximate shortest-successful-perturbation magnitude.

    value is measured in the budget norm and clamped to eps_max;
    successful is False when no successful perturbation was found within
    eps_max (the value then reports eps_max). The direction is a unit
    vector in the budget norm, zero for misclassified inputs.
    """

    value: float
    successful: bool
    direction: np.ndarray


def estimate_margin(
    model: nn.DenseModel,
    x,
    y: int,
    eps_init: float,
    eps_max: float,
    pgd_cfg: PgdConfig,
    *,
    norm: Norm,
    box: tuple[float, float] | None = None,
    bisect_loss: LossKind = LossKind.LM,
    bisect_iters: int = 10,
    seed: int = 0,
) -> MarginEstimate:
    """Margin of one example via the adaptive-radius attack.

    Misclassified inputs have margin 0 by definition. The zero-crossing is
    located on the logit-margin loss by default so the measurement matches
    the margin definition; pass the soft variant for the training-time
    estimate.
    """
    xv = np.asarray(x, dtype=np.float64)
    values, successful, directions = _measure(
        model, xv[None, :], np.asarray([y]), eps_init, eps_max, pgd_cfg,
        norm=norm, box=box, bisect_loss=bisect_loss, bisect_iters=bisect_iters,
        seeds=[seed],
    )
    return MarginEstimate(float(values[0]), bool(successful[0]), directions[0])


def measure_margins(
    model: nn.DenseModel,
    x: np.ndarray,
    y: np.ndarray,
    eps_init,
    eps_max: float,
    pgd_cfg: PgdConfig,
    *,
    norm: Norm,
    box: tuple[float, float] | None = None,
    bisect_loss: LossKind = LossKind.LM,
    bisect_iters: int = 10,
    seeds=None,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized estimate_margin over a dataset.

    Returns (values, successful). Rows the model already misclassifies get
    margin 0. pgd_cfg.restarts controls how many independent adaptive
    attacks run per example; the smallest successful magnitude wins (the
    search direction of a single run can be poor on ReLU nets). Rows where
    every restart fails get (eps_max, False).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    if seeds is None:
        seeds = [derive_seed(seed, "margin", i) for i in range(n)]
    values, successful, _ = _measure(
        model, x, y, eps_init, eps_max, pgd_cfg, norm=norm, box=box,
        bisect_loss=bisect_loss, bisect_iters=bisect_iters, seeds=seeds,
    )
    return values, successful


def _measure(model, x, y, eps_init, eps_max, pgd_cfg, *, norm, box,
             bisect_loss, bisect_iters, seeds):
    n = x.shape[0]
    values = np.full(n, float(eps_max))
    successful = np.zeros(n, dtype=bool)
    directions = np.zeros_like(x)
    pred = np.atleast_2d(nn.forward(model, x)).argmax(axis=1)
    correct = pred == y
    values[~correct] = 0.0
    successful[~correct] = True
    idx = np.flatnonzero(correct)
    if idx.size == 0:
        return values, successful, directions
    eps_init_v = np.broadcast_to(np.asarray(eps_init, dtype=np.float64), (n,))
    # Restarts cycle through widened/narrowed search radii: the radius-
    # constrained ascent can face a different part of the boundary than
    # the nearest crossing, and a different starting radius escapes that.
    scales = (1.0, 2.0, 0.5, 4.0)
    for r in range(pgd_cfg.restarts):
        eps_r = np.clip(eps_init_v[idx] * scales[r % len(scales)], 1e-12, eps_max)
        res = attacks.an_pgd_batch(
            model, x[idx], y[idx], eps_r, eps_max, pgd_cfg,
            norm, box, [derive_seed(seeds[i], "restart", r) for i in idx],
            bisect_loss=bisect_loss, bisect_iters=bisect_iters,
        )
        found = res.successful & res.ok
        mags = np.minimum(res.magnitude, eps_max)
        better = found & (~successful[idx] | (mags < values[idx]))
        rows = idx[better]
        values[rows] = mags[better]
        successful[rows] = True
        directions[rows] = res.direction[better]
    return values, successful, directions


def linear_margin_analytic(w, b: float, x, norm: Norm) -> float:
    """Point-to-hyperplane distance |w.x + b| / dual-norm(w) for a binary
    linear decision function w.x + b (L2 budget -> dual L2, Linf -> L1)."""
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    dual = np.sqrt(w @ w) if norm is Norm.L2 else np.abs(w).sum()
    if dual <= 0.0:
        raise ValueError("w must be nonzero")
    return float(abs(w @ x + b) / dual)


def _grid_scan(
    model: nn.DenseModel,
    x: np.ndarray,
    y: int,
    norm: Norm,
    radius: float,
    grid_n: int,
):
    """Yield (delta_chunk, lm_chunk, norm_chunk) over the grid of the
    radius-ball around x (full box for Linf, mask for L2)."""
    dim = x.size
    axes = np.linspace(-radius, radius, grid_n)
    total = grid_n**dim
    yb_cache: dict[int, np.ndarray] = {}
    for start in range(0, total, _CHUNK):
        flat = np.arange(start, min(start + _CHUNK, total))
        idx = np.unravel_index(flat, (grid_n,) * dim)
        delta = np.stack([axes[ix] for ix in idx], axis=1)
        norms = attacks.batch_norms(delta, norm)
        if norm is Norm.L2:
            keep = norms <= radius + 1e-12
            delta, norms = delta[keep], norms[keep]
        if delta.shape[0] == 0:
            continue
        logits = nn.forward(model, x + delta)
        m = delta.shape[0]
        if m not in yb_cache:
            yb_cache[m] = np.full(m, y, dtype=np.int64)
        lm = losses.loss_value(LossKind.LM, logits, yb_cache[m])
        yield delta, lm, norms


def eps_star_of_rho(
    model: nn.DenseModel,
    x,
    y: int,
    rho: float,
    norm: Norm,
    radius: float,
    grid_n: int,
) -> float:
    """Brute-force min perturbation norm reaching logit-margin loss >= rho.

    Scans a grid_n^d grid of the radius-ball, then sharpens the best point
    with a bisection along its ray. Returns inf when no grid point
    reaches rho. Input dimension must be <= 3.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size > 3:
        raise ValueError("grid oracle supports single inputs of dimension <= 3")
    if grid_n < 16:
        raise ValueError("grid_n must be >= 16")
    lm0 = losses.loss_value(LossKind.LM, nn.forward(model, x), y)
    if lm0 >= rho:
        return 0.0
    # Collect every successful grid point within a band of two cells above
    # the running minimum norm; the band is re-filtered as the minimum
    # drops. Refining along a whole band of rays (instead of the single
    # best point) keeps the oracle smooth under parameter perturbations.
    cell = 2.0 * radius / (grid_n - 1)
    slack = 2.0 * cell
    best_norm = math.inf
    cand_delta: list[np.ndarray] = []
    cand_norm: list[float] = []
    for delta, lm, norms in _grid_scan(model, x, y, norm, radius, grid_n):
        hit = lm >= rho
        if not np.any(hit):
            continue
        keep = hit & (norms <= best_norm + slack)
        if not np.any(keep):
            continue
        chunk_best = float(norms[keep].min())
        if chunk_best < best_norm:
            best_norm = chunk_best
        keep &= norms <= best_norm + slack
        cand_delta.extend(delta[keep])
        cand_norm.extend(norms[keep])
    if not cand_delta:
        return math.inf
    deltas = np.asarray(cand_delta)
    norms_arr = np.asarray(cand_norm)
    band = norms_arr <= best_norm + slack
    deltas, norms_arr = deltas[band], norms_arr[band]
    if deltas.shape[0] > 128:
        order = np.argsort(norms_arr)[:128]
        deltas, norms_arr = deltas[order], norms_arr[order]
    units = deltas / np.maximum(norms_arr, 1e-300)[:, None]
    yb = np.full(deltas.shape[0], y, dtype=np.int64)

    def g(eta: np.ndarray) -> np.ndarray:
        logits = nn.forward(model, x[None, :] + eta[:, None] * units)
        return np.atleast_1d(losses.loss_value(LossKind.LM, logits, yb)) - rho

    lo = np.zeros(deltas.shape[0])
    g_lo = np.full(deltas.shape[0], lm0 - rho)
    hi = norms_arr.copy()
    g_hi = g(hi)
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        g_mid = g(mid)
        left = (g_mid < 0.0) == (g_lo < 0.0)
        lo = np.where(left, mid, lo)
        g_lo = np.where(left, g_mid, g_lo)
        hi = np.where(~left, mid, hi)
        g_hi = np.where(~left, g_mid, g_hi)
    return float(np.min(0.5 * (lo + hi)))


def brute_force_margin(
    model: nn.DenseModel,
    x,
    y: int,
    norm: Norm,
    radius: float,
    grid_n: int,
) -> float:
    """Grid-certified margin: eps_star_of_rho at rho = 0."""
    return eps_star_of_rho(model, x, y, 0.0, norm, radius, grid_n)


def ball_max_loss(
    model: nn.DenseModel,
    x,
    y: int,
    norm: Norm,
    radius: float,
    grid_n: int,
) -> float:
    """Grid maximum of the logit-margin loss over the radius-ball."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size > 3:
        raise ValueError("grid oracle supports single inputs of dimension <= 3")
    best = float(losses.loss_value(LossKind.LM, nn.forward(model, x), y))
    for _, lm, _ in _grid_scan(model, x, y, norm, radius, grid_n):
        best = max(best, float(lm.max()))
    return best


def margin_grad_scalar(
    model: nn.DenseModel,
    x,
    y: int,
    *,
    eps_init: float,
    eps_max: float,
    pgd_cfg: PgdConfig | None = None,
    seed: int = 0,
) -> float:
    """The scalar tying the margin's parameter gradient to the loss
    gradient at the shortest successful perturbation:

        C = <d|delta|/d delta, dL/d delta> / |dL/d delta|_2^2

    evaluated with the smooth soft-logit-margin loss under the L2 norm
    (d|delta|/d delta = delta*/|delta*|). The margin gradient itself is
    -C dL/d theta: the first-order conditions attach the minus sign, so a
    parameter step along -C dL/d theta (loss descent) grows the margin.
    """
    c, _, _ = _margin_grad(model, x, y, eps_init=eps_init, eps_max=eps_max,
                           pgd_cfg=pgd_cfg, seed=seed)
    return c


def margin_param_grad(
    model: nn.DenseModel,
    x,
    y: int,
    *,
    eps_init: float,
    eps_max: float,
    pgd_cfg: PgdConfig | None = None,
    seed: int = 0,
) -> nn.ParamGrads:
    """Approximate gradient of the margin w.r.t. every parameter,
    -C dL(delta*)/d theta (see margin_grad_scalar for the sign)."""
    c, grads, _ = _margin_grad(model, x, y, eps_init=eps_init, eps_max=eps_max,
                               pgd_cfg=pgd_cfg, seed=seed)
    return [(-c * gw, -c * gb) for gw, gb in grads]


def _margin_grad(model, x, y, *, eps_init, eps_max, pgd_cfg, seed):
    if pgd_cfg is None:
        pgd_cfg = PgdConfig(steps=60, loss=LossKind.SLM, rand_init=False)
    xv = np.asarray(x, dtype=np.float64)
    res = attacks.an_pgd(
        model, xv, y, eps_init, eps_max, pgd_cfg,
        norm=Norm.L2, bisect_loss=LossKind.SLM, bisect_iters=40, seed=seed,
    )
    if not res.successful:
        raise DegenerateDirectionError("no loss zero-crossing within eps_max")
    delta_star = res.delta
    mag = max(float(np.sqrt(delta_star @ delta_star)), 1e-300)
    logits = nn.forward(model, xv + delta_star)
    upstream = losses.loss_grad_logits(LossKind.SLM, logits, y)
    param_grads, input_grad = nn.backward(model, xv + delta_star, upstream)
    gnorm2 = float(input_grad @ input_grad)
    if gnorm2 < 1e-24:
        raise DegenerateDirectionError("loss gradient vanished at delta*")
    c = float((delta_star / mag) @ input_grad) / gnorm2
    return c, param_grads, delta_star
