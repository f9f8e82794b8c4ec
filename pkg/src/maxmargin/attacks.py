"""Norm-constrained attacks: PGD with restarts, the ray bisection search,
the adaptive-radius attack that locates the loss zero-crossing along the
PGD direction, and the gradient-free SPSA attack.

All attacks are pure relative to a frozen model and a seed, so they can be
run concurrently across examples. The ``*_batch`` cores vectorize over
examples with per-example radii; the public single-example functions are
thin wrappers around them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import losses, nn
from .errors import DegenerateDirectionError, DimensionError, NumericError
from .losses import LossKind
from .rng import derive_seed, generator

_TINY = 1e-12


class Norm(enum.Enum):
    LINF = "linf"
    L2 = "l2"


@dataclass(frozen=True)
class PerturbationBudget:
    """Norm ball of radius eps, optionally intersected with a per-coordinate
    input box (for image-valued inputs)."""

    norm: Norm
    eps: float
    box: tuple[float, float] | None = None

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.box is not None and not self.box[0] < self.box[1]:
            raise ValueError("box lower bound must be below upper bound")


@dataclass(frozen=True)
class PgdConfig:
    """Projected-gradient-ascent settings.

    step_size None means the default rule 2.5*eps/steps. The loss drives
    both the ascent direction and the best-iterate bookkeeping.
    """

    steps: int = 100
    step_size: float | None = None
    loss: LossKind = LossKind.SLM
    rand_init: bool = True
    restarts: int = 1

    def __post_init__(self):
        if self.steps < 1 or self.restarts < 1:
            raise ValueError("steps and restarts must be positive")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be > 0")

    def resolved_step(self, eps) -> np.ndarray:
        if self.step_size is not None:
            return np.broadcast_to(np.float64(self.step_size), np.shape(eps)).copy()
        return 2.5 * np.asarray(eps, dtype=np.float64) / self.steps


@dataclass
class AttackResult:
    delta: np.ndarray
    success: bool
    final_loss: float


def batch_norms(delta: np.ndarray, norm: Norm) -> np.ndarray:
    """Per-row budget norm of a (n, d) perturbation batch."""
    if norm is Norm.LINF:
        return np.abs(delta).max(axis=1)
    return np.sqrt((delta * delta).sum(axis=1))


def project(delta, budget: PerturbationBudget, x=None) -> np.ndarray:
    """Project onto the budget ball, then clamp x+delta into the box.

    Works on a single perturbation (d,) or a batch (n, d); x is required
    when the budget carries a box.
    """
    d = np.asarray(delta, dtype=np.float64)
    single = d.ndim == 1
    db = np.atleast_2d(d).copy()
    if budget.box is not None and x is None:
        raise ValueError("x is required to apply the box constraint")
    xb = None if x is None else np.atleast_2d(np.asarray(x, dtype=np.float64))
    eps = np.full(db.shape[0], budget.eps)
    out = _project_rows(db, budget.norm, eps, xb, budget.box)
    return out[0] if single else out


def random_init(budget: PerturbationBudget, dim: int, seed: int) -> np.ndarray:
    """Uniform draw from the budget ball: per-coordinate uniform for Linf,
    uniform-in-ball (random direction scaled by u^(1/d)*eps) for L2."""
    rng = np.random.Generator(np.random.PCG64(seed))
    if budget.eps == 0.0:
        return np.zeros(dim)
    if budget.norm is Norm.LINF:
        return rng.uniform(-budget.eps, budget.eps, size=dim)
    v = rng.normal(size=dim)
    v /= max(np.sqrt(v @ v), _TINY)
    radius = budget.eps * rng.uniform() ** (1.0 / dim)
    return radius * v


# Loss-and-gradient callables let the PGD core drive single models and
# ensembles alike: (x_batch, y) -> (per-row loss, per-row input grad).
LossGradFn = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def model_loss_grad(model: nn.DenseModel, kind: LossKind) -> LossGradFn:
    def fn(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        logits, _ = nn._forward_trace(model, x)  # unchecked: rows stay isolated
        vals = np.atleast_1d(losses.loss_value(kind, logits, y))
        grads = nn.input_gradient(model, x, losses.loss_grad_logits(kind, logits, y))
        return vals, grads

    return fn


def _rand_init_rows(norm: Norm, eps: np.ndarray, dim: int, seeds: Sequence[int]) -> np.ndarray:
    out = np.empty((len(seeds), dim))
    for i, s in enumerate(seeds):
        out[i] = random_init(PerturbationBudget(norm, float(eps[i])), dim, s)
    return out


def _project_rows(
    delta: np.ndarray,
    norm: Norm,
    eps: np.ndarray,
    x: np.ndarray | None,
    box: tuple[float, float] | None,
) -> np.ndarray:
    if norm is Norm.LINF:
        delta = np.clip(delta, -eps[:, None], eps[:, None])
    else:
        norms = batch_norms(delta, Norm.L2)
        over = norms > eps
        delta = delta.copy()
        if np.any(over):
            delta[over] *= (eps[over] / norms[over])[:, None]
    if box is not None:
        delta = np.clip(x + delta, box[0], box[1]) - x
    return delta


def pgd_batch(
    loss_grad: LossGradFn,
    x: np.ndarray,
    y: np.ndarray,
    eps,
    cfg: PgdConfig,
    norm: Norm,
    box: tuple[float, float] | None,
    seeds: Sequence[int],
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Single-restart PGD over a batch with per-row radii.

    Ascends the loss with sign steps (Linf) or l2-normalized gradient steps
    (L2), projecting every iterate, and keeps the best-loss iterate per
    row. Returns (best_delta, best_loss, ok, first_bad_iter); rows whose
    loss went non-finite have ok False and a zero perturbation.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, dim = x.shape
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), (n,)).copy()
    step = cfg.resolved_step(eps)
    if cfg.rand_init:
        delta = _rand_init_rows(norm, eps, dim, seeds)
        delta = _project_rows(delta, norm, eps, x, box)
    else:
        delta = np.zeros((n, dim))
    ok = np.ones(n, dtype=bool)
    first_bad = -1
    best_loss, _ = loss_grad(x + delta, y)
    best_loss = best_loss.copy()
    best_delta = delta.copy()
    for k in range(cfg.steps):
        vals, grad = loss_grad(x + delta, y)
        bad = ~(np.isfinite(vals) & np.all(np.isfinite(grad), axis=1))
        if np.any(bad & ok):
            ok &= ~bad
            if first_bad < 0:
                first_bad = k
            grad = np.where(bad[:, None], 0.0, grad)
        if norm is Norm.LINF:
            direction = np.sign(grad)
        else:
            gnorm = np.maximum(batch_norms(grad, Norm.L2), _TINY)
            direction = np.where(gnorm[:, None] > 2 * _TINY, grad / gnorm[:, None], 0.0)
        delta = _project_rows(delta + step[:, None] * direction, norm, eps, x, box)
        vals, _ = loss_grad(x + delta, y)
        improved = ok & np.isfinite(vals) & (vals > best_loss)
        best_loss[improved] = vals[improved]
        best_delta[improved] = delta[improved]
    best_delta[~ok] = 0.0
    return best_delta, best_loss, ok, first_bad


def pgd_attack(
    model: nn.DenseModel,
    x,
    y: int,
    budget: PerturbationBudget,
    cfg: PgdConfig,
    seed: int,
) -> AttackResult:
    """Norm-constrained PGD with random restarts; the max-loss restart wins."""
    xv = np.asarray(x, dtype=np.float64)
    if xv.ndim != 1:
        raise DimensionError("pgd_attack takes a single example; use pgd_batch for batches")
    loss_grad = model_loss_grad(model, cfg.loss)
    xb = xv[None, :]
    yb = np.asarray([y], dtype=np.int64)
    best: tuple[np.ndarray, float] | None = None
    for r in range(cfg.restarts):
        delta, loss, ok, bad_iter = pgd_batch(
            loss_grad, xb, yb, budget.eps, cfg, budget.norm, budget.box,
            [derive_seed(seed, "restart", r)],
        )
        if not ok[0]:
            raise NumericError("PGD loss became non-finite", iterate=bad_iter)
        if best is None or loss[0] > best[1]:
            best = (delta[0], float(loss[0]))
    assert best is not None
    delta, final_loss = best
    pred = int(np.argmax(nn.forward(model, xv + delta)))
    return AttackResult(delta=delta, success=pred != y, final_loss=final_loss)


def bisection_zero_crossing(
    g: Callable[[float], float], lo: float, hi: float, iters: int
) -> float:
    """Zero crossing of a scalar function by interval halving.

    With a sign change between the ends (values >= 0 and < 0 count as
    opposite signs), returns the midpoint of the bracket after ``iters``
    halvings; without one, returns the end whose value is closest to 0.
    """
    if lo > hi:
        raise ValueError("lo must not exceed hi")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    glo, ghi = float(g(lo)), float(g(hi))
    if (glo < 0.0) == (ghi < 0.0):
        return lo if abs(glo) <= abs(ghi) else hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        gm = float(g(mid))
        if (gm < 0.0) == (glo < 0.0):
            lo, glo = mid, gm
        else:
            hi, ghi = mid, gm
    return 0.5 * (lo + hi)


@dataclass
class RayCrossingBatch:
    """Vectorized adaptive-radius attack results.

    magnitude holds the located crossing along each unit ray (budget
    norm). Rows where no sign change was found fall back to the bracket
    end whose loss is closest to 0, except that a ray that never reaches
    loss >= 0 within eps_max reports magnitude eps_max with successful
    False. degenerate marks rows whose PGD direction collapsed to zero;
    pgd_ok is False where PGD itself hit non-finite values.
    """

    delta: np.ndarray
    direction: np.ndarray
    magnitude: np.ndarray
    successful: np.ndarray
    crossed: np.ndarray
    bracket_lo: np.ndarray
    bracket_hi: np.ndarray
    loss_lo: np.ndarray
    loss_hi: np.ndarray
    degenerate: np.ndarray
    pgd_ok: np.ndarray

    @property
    def ok(self) -> np.ndarray:
        return self.pgd_ok & ~self.degenerate


@dataclass
class RayCrossing:
    """Single-example view of RayCrossingBatch."""

    delta: np.ndarray
    direction: np.ndarray
    magnitude: float
    successful: bool
    crossed: bool
    bracket_lo: float
    bracket_hi: float
    loss_lo: float
    loss_hi: float


def an_pgd_batch(
    model: nn.DenseModel,
    x: np.ndarray,
    y: np.ndarray,
    eps_init,
    eps_max: float,
    cfg: PgdConfig,
    norm: Norm,
    box: tuple[float, float] | None,
    seeds: Sequence[int],
    bisect_loss: LossKind = LossKind.SLM,
    bisect_iters: int = 10,
) -> RayCrossingBatch:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, dim = x.shape
    eps_init = np.broadcast_to(np.asarray(eps_init, dtype=np.float64), (n,)).copy()
    loss_grad = model_loss_grad(model, cfg.loss)
    delta1, _, pgd_ok, _ = pgd_batch(loss_grad, x, y, eps_init, cfg, norm, box, seeds)
    mags1 = batch_norms(delta1, norm)
    degenerate = pgd_ok & (mags1 <= _TINY)
    live = pgd_ok & ~degenerate
    safe_mags = np.maximum(mags1, _TINY)
    unit = delta1 / safe_mags[:, None]

    logits1 = nn.forward(model, x + delta1)
    still_correct = np.atleast_2d(logits1).argmax(axis=1) == y
    lo = np.where(still_correct, mags1, 0.0)
    hi = np.where(still_correct, float(eps_max), mags1)

    def ray_loss(eta: np.ndarray) -> np.ndarray:
        logits, _ = nn._forward_trace(model, x + eta[:, None] * unit)
        return np.atleast_1d(losses.loss_value(bisect_loss, logits, y))

    g_lo = ray_loss(lo)
    g_hi = ray_loss(hi)
    # The ray loss need not be monotone: a bounded wrong-class sliver can
    # push it above 0 strictly inside the bracket while both ends sit
    # below. Probe the interior and shrink hi to the first point at or
    # above 0 so the halving still has a crossing to work with.
    needs_probe = live & (g_lo < 0.0) & (g_hi < 0.0)
    if np.any(needs_probe):
        n_probe = 8
        for j in range(1, n_probe + 1):
            frac = j / (n_probe + 1.0)
            eta_j = lo + frac * (hi - lo)
            g_j = ray_loss(eta_j)
            found = needs_probe & (g_j >= 0.0)
            hi = np.where(found, eta_j, hi)
            g_hi = np.where(found, g_j, g_hi)
            needs_probe &= ~found
    crossed = ((g_lo < 0.0) != (g_hi < 0.0)) & live
    for _ in range(bisect_iters):
        mid = 0.5 * (lo + hi)
        g_mid = ray_loss(mid)
        same_side_as_lo = (g_mid < 0.0) == (g_lo < 0.0)
        move_lo = crossed & same_side_as_lo
        move_hi = crossed & ~same_side_as_lo
        lo = np.where(move_lo, mid, lo)
        g_lo = np.where(move_lo, g_mid, g_lo)
        hi = np.where(move_hi, mid, hi)
        g_hi = np.where(move_hi, g_mid, g_hi)

    magnitude = 0.5 * (lo + hi)
    successful = crossed.copy()
    # No sign change: a ray that stays below 0 up to eps_max is a failed
    # search (magnitude eps_max, unsuccessful); one that starts at >= 0
    # already sits on the wrong side everywhere in the bracket.
    both_neg = live & ~crossed & (g_lo < 0.0)
    both_pos = live & ~crossed & (g_lo >= 0.0)
    magnitude = np.where(both_neg, hi, magnitude)
    magnitude = np.where(both_pos, lo, magnitude)
    successful = np.where(both_neg, False, successful)
    successful = np.where(both_pos, True, successful)
    magnitude = np.where(live, magnitude, float(eps_max))
    successful = np.where(live, successful, False)
    delta_star = magnitude[:, None] * unit
    delta_star[~live] = 0.0
    return RayCrossingBatch(
        delta=delta_star,
        direction=unit,
        magnitude=magnitude,
        successful=successful,
        crossed=crossed,
        bracket_lo=lo,
        bracket_hi=hi,
        loss_lo=g_lo,
        loss_hi=g_hi,
        degenerate=degenerate,
        pgd_ok=pgd_ok,
    )


def an_pgd(
    model: nn.DenseModel,
    x,
    y: int,
    eps_init: float,
    eps_max: float,
    pgd_cfg: PgdConfig,
    *,
    norm: Norm,
    box: tuple[float, float] | None = None,
    bisect_loss: LossKind = LossKind.SLM,
    bisect_iters: int = 10,
    seed: int = 0,
) -> RayCrossing:
    """Approximate shortest successful perturbation for one example.

    PGD at eps_init gives the attack direction; a bisection along that ray
    locates the loss zero-crossing, over [|delta1|, eps_max] when the
    prediction at x+delta1 is still correct and over [0, |delta1|)
    otherwise. Raises DegenerateDirectionError when PGD cannot move (zero
    gradient everywhere); callers treat that as margin >= eps_max.
    """
    if not 0.0 < eps_init <= eps_max:
        raise ValueError("need 0 < eps_init <= eps_max")
    xv = np.asarray(x, dtype=np.float64)
    res = an_pgd_batch(
        model, xv[None, :], np.asarray([y]), eps_init, eps_max,
        replace(pgd_cfg, restarts=1), norm, box, [seed],
        bisect_loss=bisect_loss, bisect_iters=bisect_iters,
    )
    if not res.pgd_ok[0]:
        raise NumericError("PGD loss became non-finite during the radius search")
    if res.degenerate[0]:
        raise DegenerateDirectionError("PGD produced a zero perturbation direction")
    return RayCrossing(
        delta=res.delta[0],
        direction=res.direction[0],
        magnitude=float(res.magnitude[0]),
        successful=bool(res.successful[0]),
        crossed=bool(res.crossed[0]),
        bracket_lo=float(res.bracket_lo[0]),
        bracket_hi=float(res.bracket_hi[0]),
        loss_lo=float(res.loss_lo[0]),
        loss_hi=float(res.loss_hi[0]),
    )


def spsa_attack(
    model: nn.DenseModel,
    x,
    y: int,
    budget: PerturbationBudget,
    iters: int = 100,
    perturb_size: float = 0.01,
    lr: float = 0.01,
    samples: int = 2048,
    seed: int = 0,
    stop_threshold: float = -5.0,
) -> AttackResult:
    """Gradient-free attack: antithetic Rademacher two-sided estimates of
    the clipped-margin (CW) loss gradient, ascended with Adam and projected
    every iterate.

    The CW loss maxes out at 0, so the loop exits as soon as the attack
    succeeds; stop_threshold (kept from the usual convention of running
    the unclipped margin down to -5.0) is the confidence cutoff that the
    clipped loss renders unreachable, so only the success exit fires.
    """
    if samples <= 0 or samples % 2 != 0:
        raise ValueError("samples must be even and positive")
    xv = np.asarray(x, dtype=np.float64)
    dim = xv.size
    rng = generator(seed, "spsa")
    delta = np.zeros(dim)
    cw = float(losses.loss_value(LossKind.CW, nn.forward(model, xv), y))
    if budget.eps == 0.0:
        pred = int(np.argmax(nn.forward(model, xv)))
        return AttackResult(delta, pred != y, cw)
    m = np.zeros(dim)
    v = np.zeros(dim)
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    half = samples // 2
    yb = np.full(half, y, dtype=np.int64)
    for t in range(1, iters + 1):
        if cw >= 0.0:
            break
        signs = rng.integers(0, 2, size=(half, dim)) * 2.0 - 1.0
        plus = losses.loss_value(
            LossKind.CW, nn.forward(model, xv + delta + perturb_size * signs), yb
        )
        minus = losses.loss_value(
            LossKind.CW, nn.forward(model, xv + delta - perturb_size * signs), yb
        )
        ghat = (((plus - minus) / (2.0 * perturb_size))[:, None] * signs).mean(axis=0)
        m = beta1 * m + (1 - beta1) * ghat
        v = beta2 * v + (1 - beta2) * ghat * ghat
        step = lr * (m / (1 - beta1**t)) / (np.sqrt(v / (1 - beta2**t)) + adam_eps)
        delta = project(delta + step, budget, xv)
        cw = float(losses.loss_value(LossKind.CW, nn.forward(model, xv + delta), y))
    pred = int(np.argmax(nn.forward(model, xv + delta)))
    return AttackResult(delta=delta, success=pred != y, final_loss=cw)
