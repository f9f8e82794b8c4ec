"""Numerical verification of the loss and margin relationships the
training method rests on.

Six checks, each over freshly sampled toy instances:

1. sandwich            -- soft logit margin bounds the logit margin within
                          log(K-1).
2. collinearity        -- cross-entropy and soft-logit-margin gradients are
                          positively collinear with the predicted scalar
                          ratio, in logit, parameter, and input space.
3. margin-gradient     -- the margin's parameter gradient equals the scaled
                          loss gradient at the shortest successful
                          perturbation (smooth 2-class instances), and a
                          loss-descent step grows the oracle margin.
4. min-max-duality     -- reaching loss rho at minimal norm eps implies the
                          eps-ball maximum equals rho (grid check).
5. fixed-eps-exact     -- attacking at eps equal to the margin drives the
                          ball maximum to 0.
6. fixed-eps-bound     -- attacking below the margin: one loss-descent step
                          does not shrink the attained-level radius (the
                          lower-bound mechanism of fixed-radius training).

Checks 3-6 run on low-dimensional instances so the grid oracle can certify
margins; tolerances scale with the grid resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses, margin, nn
from .attacks import Norm, PgdConfig
from .losses import LossKind
from .rng import derive_seed, generator


@dataclass
class CheckResult:
    name: str
    passed: bool
    tolerance: str
    detail: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name:<18} tol={self.tolerance:<14} {self.detail}"


def check_sandwich(samples: int = 1000, seed: int = 0) -> CheckResult:
    """Loss ordering: SLM - log(K-1) <= LM <= SLM for K in {2, 3, 10}."""
    rng = generator(seed, "sandwich")
    worst = 0.0
    for k in (2, 3, 10):
        logits = rng.normal(scale=3.0, size=(samples, k))
        y = rng.integers(0, k, size=samples)
        lm = losses.loss_value(LossKind.LM, logits, y)
        slm = losses.loss_value(LossKind.SLM, logits, y)
        worst = max(worst, float(np.max(lm - slm)))
        worst = max(worst, float(np.max(slm - np.log(k - 1) - lm)))
    return CheckResult("sandwich", worst <= 1e-9, "1e-9",
                       f"max bound violation {worst:.3e} over K in {{2,3,10}}")


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0
    return float(a @ b / (na * nb))


def check_collinearity(samples: int = 1000, seed: int = 0) -> CheckResult:
    """Gradient of CE equals the wrong-mass ratio times the gradient of SLM,
    elementwise and in direction, in logit/parameter/input space."""
    rng = generator(seed, "collinearity")
    tol = 1e-9
    worst_elem = 0.0
    worst_cos = 0.0
    for i in range(samples):
        k = int(rng.integers(2, 11))
        logits = rng.normal(scale=3.0, size=k)
        y = int(rng.integers(0, k))
        r = losses.ce_slm_ratio(logits, y)
        g_ce = losses.loss_grad_logits(LossKind.CE, logits, y)
        g_slm = losses.loss_grad_logits(LossKind.SLM, logits, y)
        scale = max(float(np.abs(g_ce).max()), 1e-30)
        worst_elem = max(worst_elem, float(np.abs(g_ce - r * g_slm).max()) / scale)
        worst_cos = max(worst_cos, 1.0 - _cosine(g_ce, g_slm))
    n_pullback = min(samples, 50)
    for i in range(n_pullback):
        model = nn.init_model([3, 6, 4], derive_seed(seed, "colmodel", i))
        x = generator(seed, "colx", i).normal(size=3)
        y = int(generator(seed, "coly", i).integers(0, 4))
        logits = nn.forward(model, x)
        r = losses.ce_slm_ratio(logits, y)
        pg_ce, ig_ce = nn.backward(model, x, losses.loss_grad_logits(LossKind.CE, logits, y))
        pg_slm, ig_slm = nn.backward(model, x, losses.loss_grad_logits(LossKind.SLM, logits, y))
        flat_ce = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in pg_ce] + [ig_ce])
        flat_slm = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in pg_slm] + [ig_slm])
        scale = max(float(np.abs(flat_ce).max()), 1e-30)
        worst_elem = max(worst_elem, float(np.abs(flat_ce - r * flat_slm).max()) / scale)
        worst_cos = max(worst_cos, 1.0 - _cosine(flat_ce, flat_slm))
    passed = worst_elem <= tol and worst_cos <= tol
    return CheckResult("collinearity", passed, "1e-9",
                       f"max elementwise dev {worst_elem:.3e}, max 1-cos {worst_cos:.3e}")


def _random_linear_instance(seed: int, i: int):
    """A well-separated 2-class linear model and a correctly classified
    point with margin around 1 (resampled until conditioned)."""
    for attempt in range(200):
        rng = generator(seed, "lin", i, attempt)
        w = rng.normal(size=(2, 2)) * rng.uniform(0.7, 2.0)
        b = rng.normal(size=2) * 0.3
        model = nn.DenseModel([(w, b)])
        x = rng.normal(size=2) * 1.5
        logits = nn.forward(model, x)
        y = int(np.argmax(logits))
        u = w[1 - y] - w[y]
        if np.linalg.norm(u) < 0.5:
            continue
        d = margin.linear_margin_analytic(u, float(b[1 - y] - b[y]), x, Norm.L2)
        if 0.4 <= d <= 1.6:
            return model, x, y, d
    raise RuntimeError("could not sample a conditioned linear instance")


def check_margin_gradient(instances: int = 20, grid_n: int = 256, seed: int = 0) -> CheckResult:
    """Smooth-case margin gradient: -C dL/dtheta matches the central
    finite difference of the grid-oracle margin (vector rtol 5e-2), and a
    small step along it increases the oracle margin."""
    rtol = 5e-2
    match_fail = 0
    grew = 0
    details = []
    for i in range(instances):
        model, x, y, d_true = _random_linear_instance(seed, i)
        radius = 2.0 * d_true
        cfg = PgdConfig(steps=80, loss=LossKind.SLM, rand_init=False)
        kw = dict(eps_init=0.5 * d_true, eps_max=2.5 * d_true, pgd_cfg=cfg,
                  seed=derive_seed(seed, "mg", i))
        grads = margin.margin_param_grad(model, x, y, **kw)
        flat_est = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])

        base = model.flat_params()

        def oracle_margin(flat: np.ndarray) -> float:
            m2 = model.copy()
            m2.set_flat_params(flat)
            return margin.brute_force_margin(m2, x, y, Norm.L2, radius, grid_n)

        h = 2e-3
        flat_fd = np.zeros_like(base)
        for j in range(base.size):
            e = np.zeros_like(base)
            e[j] = h
            flat_fd[j] = (oracle_margin(base + e) - oracle_margin(base - e)) / (2 * h)
        rel = np.linalg.norm(flat_est - flat_fd) / max(np.linalg.norm(flat_fd), 1e-12)
        if rel > rtol:
            match_fail += 1
        step = 5e-3 / max(np.linalg.norm(flat_est), 1e-12)
        if oracle_margin(base + step * flat_est) > oracle_margin(base):
            grew += 1
        details.append(rel)
    passed = match_fail == 0 and grew >= instances - 1
    return CheckResult(
        "margin-gradient", passed, "rtol 5e-2",
        f"max FD rel err {max(details):.3f}, margin grew in {grew}/{instances}",
    )


def _random_2d_instance(seed: int, i: int, *, classes: int = 2):
    """A small 2D ReLU instance with a certifiable margin below the scan
    radius (resampled until conditioned)."""
    for attempt in range(200):
        rng = generator(seed, "inst", i, attempt)
        hidden = int(rng.integers(4, 9))
        model = nn.init_model([2, hidden, classes], derive_seed(seed, "instm", i, attempt))
        for w, b in model.layers:
            w *= rng.uniform(1.0, 2.5)
        x = rng.normal(size=2) * 1.2
        logits = nn.forward(model, x)
        y = int(np.argmax(logits))
        lm0 = losses.loss_value(LossKind.LM, logits, y)
        if lm0 > -0.05:
            continue
        d = margin.brute_force_margin(model, x, y, Norm.L2, 2.0, 96)
        if 0.2 <= d <= 1.2:
            return model, x, y
    raise RuntimeError("could not sample a conditioned 2D instance")


def _grid_tol(model: nn.DenseModel, radius: float, grid_n: int) -> float:
    """Loss tolerance from grid resolution: Lipschitz bound of the logit
    margin times a few grid cells."""
    lip = 2.0
    for w, _ in model.layers:
        lip *= float(np.linalg.norm(w, 2))
    cell = 2.0 * radius / (grid_n - 1)
    return lip * cell * np.sqrt(2.0) * 2.0


def check_min_max_duality(instances: int = 20, grid_n: int = 256, seed: int = 0) -> CheckResult:
    """If the minimal norm reaching loss level rho is eps, then the max of
    the loss over the eps-ball is rho (forward direction, on the grid)."""
    good = 0
    worst = 0.0
    tol_used = 0.0
    for i in range(instances):
        model, x, y = _random_2d_instance(seed, i)
        rng = generator(seed, "rho", i)
        lm0 = float(losses.loss_value(LossKind.LM, nn.forward(model, x), y))
        # A level above L(0,theta) that the scan ball actually reaches.
        reachable = margin.ball_max_loss(model, x, y, Norm.L2, 2.0, 96)
        rho = float(lm0 + rng.uniform(0.15, 0.85) * (reachable - lm0))
        eps = margin.eps_star_of_rho(model, x, y, rho, Norm.L2, 2.0, grid_n)
        if not np.isfinite(eps) or eps <= 0.0:
            continue
        ball_max = margin.ball_max_loss(model, x, y, Norm.L2, eps, grid_n)
        tol = _grid_tol(model, eps, grid_n)
        tol_used = max(tol_used, tol)
        err = abs(ball_max - rho)
        worst = max(worst, err)
        if err <= tol:
            good += 1
    passed = good >= instances - 1
    return CheckResult("min-max-duality", passed, "grid Lipschitz",
                       f"{good}/{instances} within tol (worst dev {worst:.3e})")


def check_fixed_eps_exact(instances: int = 20, grid_n: int = 256, seed: int = 0) -> CheckResult:
    """With eps set to the measured margin, the eps-ball loss maximum sits
    at 0 (the exact-margin case of fixed-radius training)."""
    good = 0
    worst = 0.0
    for i in range(instances):
        model, x, y = _random_2d_instance(seed, i)
        d = margin.brute_force_margin(model, x, y, Norm.L2, 2.0, grid_n)
        if not np.isfinite(d) or d <= 0.0:
            continue
        rho_star = margin.ball_max_loss(model, x, y, Norm.L2, d, grid_n)
        tol = _grid_tol(model, d, grid_n)
        worst = max(worst, abs(rho_star))
        if abs(rho_star) <= tol:
            good += 1
    passed = good >= instances - 1
    return CheckResult("fixed-eps-exact", passed, "grid Lipschitz",
                       f"{good}/{instances} with |ball max| ~ 0 (worst {worst:.3e})")


def check_fixed_eps_bound(instances: int = 20, grid_n: int = 256, seed: int = 0) -> CheckResult:
    """Attacking below the margin: a parameter step that lowers the
    eps-ball maximum does not shrink the radius at which the pre-step
    maximum level is reached (lower-bound maximization)."""
    good = 0
    for i in range(instances):
        model, x, y = _random_2d_instance(seed, i)
        d = margin.brute_force_margin(model, x, y, Norm.L2, 2.0, grid_n)
        if not np.isfinite(d) or d <= 0.05:
            continue
        eps = 0.5 * d
        rho_star = margin.ball_max_loss(model, x, y, Norm.L2, eps, grid_n)
        # One explicit loss-descent step at the ball argmax.
        delta_best = _ball_argmax(model, x, y, eps, grid_n)
        logits = nn.forward(model, x + delta_best)
        upstream = losses.loss_grad_logits(LossKind.LM, logits, y)
        grads, _ = nn.backward(model, x + delta_best, upstream)
        flat_g = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
        base = model.flat_params()
        stepped = model.copy()
        eta = 2e-2 / max(np.linalg.norm(flat_g), 1e-12)
        for _ in range(6):
            stepped.set_flat_params(base - eta * flat_g)
            if margin.ball_max_loss(stepped, x, y, Norm.L2, eps, grid_n) < rho_star:
                break
            eta *= 0.5
        else:
            continue
        tol = _grid_tol(model, eps, grid_n) * 0.25
        eps0 = margin.eps_star_of_rho(model, x, y, rho_star, Norm.L2, 2.0, grid_n)
        eps1 = margin.eps_star_of_rho(stepped, x, y, rho_star, Norm.L2, 2.0, grid_n)
        if not np.isfinite(eps0):
            continue
        ok = rho_star <= 1e-9 and eps0 <= d + tol
        ok &= (not np.isfinite(eps1)) or (eps1 >= eps0 - tol)
        if ok:
            good += 1
    passed = good >= instances - 1
    return CheckResult("fixed-eps-bound", passed, "grid Lipschitz",
                       f"{good}/{instances} kept the level radius from shrinking")


def _ball_argmax(model, x, y, radius, grid_n):
    best_val = -np.inf
    best = np.zeros_like(x)
    for delta, lm, _ in margin._grid_scan(model, x, y, Norm.L2, radius, grid_n):
        j = int(np.argmax(lm))
        if lm[j] > best_val:
            best_val = float(lm[j])
            best = delta[j].copy()
    return best


def run_all(instances: int = 20, grid_n: int = 256, logit_samples: int = 1000,
            seed: int = 0) -> list[CheckResult]:
    return [
        check_sandwich(logit_samples, seed),
        check_collinearity(logit_samples, seed),
        check_margin_gradient(instances, grid_n, seed),
        check_min_max_duality(instances, grid_n, seed),
        check_fixed_eps_exact(instances, grid_n, seed),
        check_fixed_eps_bound(instances, grid_n, seed),
    ]
