"""Robustness measurement: repeated random-restart whitebox PGD, transfer
pooling across a model zoo, and the summary metrics.

An example counts as non-robust at a magnitude eps if the clean prediction
is already wrong or any configured attack (own whitebox restarts plus, in
the combined protocol, every perturbation transferred from the other
models) flips the prediction. Per-example seeds derive from (global seed,
model id, eps index, attack spec, restart, example id), so results are
independent of scheduling and batch composition.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import attacks, losses, nn, training
from .attacks import Norm, PgdConfig
from .data import Dataset
from .losses import LossKind
from .rng import derive_seed


@dataclass(frozen=True)
class AttackSpec:
    """One whitebox attack family: a loss, an iteration count, and how many
    random restarts to run. Step size defaults to 2.5*eps/steps; step_scale
    overrides it as scale*eps (the linear-scaling rule)."""

    loss: LossKind
    steps: int = 100
    restarts: int = 1
    step_scale: float | None = None

    def pgd_config(self, eps: float) -> PgdConfig:
        step = self.step_scale * eps if self.step_scale is not None else None
        if step is not None and step <= 0.0:
            step = None
        return PgdConfig(steps=self.steps, step_size=step, loss=self.loss,
                         rand_init=True, restarts=1)


@dataclass(frozen=True)
class EvalSuite:
    specs: tuple[AttackSpec, ...]

    @classmethod
    def default(cls, restarts: int = 10, steps: int = 100,
                step_scale: float | None = None) -> "EvalSuite":
        """Half cross-entropy, half clipped-margin (CW) restarts."""
        if restarts % 2 != 0 or restarts < 2:
            raise ValueError("restarts must be even and >= 2")
        half = restarts // 2
        return cls((
            AttackSpec(LossKind.CE, steps=steps, restarts=half, step_scale=step_scale),
            AttackSpec(LossKind.CW, steps=steps, restarts=half, step_scale=step_scale),
        ))

    @property
    def total_restarts(self) -> int:
        return sum(s.restarts for s in self.specs)


@dataclass
class EvalReport:
    """Clean accuracy plus per-eps robust accuracies (percent), whitebox-only
    and combined, with their averages and the per-eps transfer gap."""

    name: str
    clean_acc: float
    eps_grid: list[float]
    combined: list[float]
    whitebox: list[float]
    transfer_gap: list[float] = field(default_factory=list)
    avg_acc: float = 0.0
    avg_rob_acc: float = 0.0
    whitebox_avg_acc: float = 0.0
    whitebox_avg_rob_acc: float = 0.0

    def finalize(self) -> "EvalReport":
        self.transfer_gap = [w - c for w, c in zip(self.whitebox, self.combined)]
        self.avg_acc, self.avg_rob_acc = compute_metrics(self.clean_acc, self.combined)
        self.whitebox_avg_acc, self.whitebox_avg_rob_acc = compute_metrics(
            self.clean_acc, self.whitebox
        )
        return self


def compute_metrics(clean_acc: float, rob_accs: Sequence[float]) -> tuple[float, float]:
    """(AvgAcc, AvgRobAcc): the mean over clean plus all robust accuracies,
    and the mean over the robust accuracies alone."""
    rob = [float(v) for v in rob_accs]
    if not rob:
        raise ValueError("need at least one robust accuracy")
    avg_rob = float(np.mean(rob))
    avg = float(np.mean([clean_acc, *rob]))
    return avg, avg_rob


def _predictions(model: nn.DenseModel, x: np.ndarray) -> np.ndarray:
    return np.atleast_2d(nn.forward(model, x)).argmax(axis=1)


def model_content_id(model: nn.DenseModel) -> str:
    """Stable identity for seed derivation: a hash of the parameter bytes,
    so an exact duplicate of a model attacks with identical perturbations
    regardless of its position in the zoo."""
    import hashlib

    h = hashlib.blake2b(digest_size=8)
    for w, b in model.layers:
        h.update(np.ascontiguousarray(w).tobytes())
        h.update(np.ascontiguousarray(b).tobytes())
    return h.hexdigest()


def _restart_iter(suite: EvalSuite):
    rid = 0
    for spec_idx, spec in enumerate(suite.specs):
        for r in range(spec.restarts):
            yield rid, spec_idx, spec, r
            rid += 1


def _suite_deltas(
    loss_grad_for: Callable[[LossKind], attacks.LossGradFn],
    ds: Dataset,
    eps: float,
    eps_idx: int,
    suite: EvalSuite,
    seed: int,
    model_id,
    norm: Norm,
    jobs: int = 1,
):
    """Yield (restart_id, spec, deltas) for one source model at one eps."""
    n = len(ds)

    def run(args):
        rid, spec_idx, spec, r = args
        seeds = [
            derive_seed(seed, "wb", model_id, eps_idx, spec_idx, r, i)
            for i in range(n)
        ]
        cfg = spec.pgd_config(eps)
        delta, final_loss, ok, _ = attacks.pgd_batch(
            loss_grad_for(spec.loss), ds.inputs, ds.labels, eps, cfg,
            norm, ds.box, seeds,
        )
        return rid, spec, delta, final_loss

    tasks = list(_restart_iter(suite))
    if jobs > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]
    for rid, spec, delta, final_loss in sorted(results, key=lambda t: t[0]):
        yield rid, spec, delta, final_loss


def whitebox_eval(
    model: nn.DenseModel,
    ds: Dataset,
    eps_grid: Sequence[float],
    suite: EvalSuite,
    seed: int,
    *,
    norm: Norm,
    model_id=None,
    jobs: int = 1,
    transcript: list | None = None,
) -> np.ndarray:
    """Per-example success matrix (n, len(eps_grid)) under repeated
    randomly initialized whitebox attacks; success at (i, e) means some
    restart of some loss flipped example i within eps_grid[e] (a clean
    misclassification counts at every eps)."""
    if model_id is None:
        model_id = model_content_id(model)
    y = ds.labels
    clean_wrong = _predictions(model, ds.inputs) != y
    success = np.zeros((len(ds), len(eps_grid)), dtype=bool)
    loss_grad_for = lambda kind: attacks.model_loss_grad(model, kind)
    for e_idx, eps in enumerate(eps_grid):
        col = success[:, e_idx]
        col |= clean_wrong
        for rid, spec, delta, final_loss in _suite_deltas(
            loss_grad_for, ds, float(eps), e_idx, suite, seed, model_id, norm, jobs
        ):
            flipped = _predictions(model, ds.inputs + delta) != y
            col |= flipped
            if transcript is not None:
                for i in range(len(ds)):
                    transcript.append({
                        "model": model_id, "example": i, "eps": float(eps),
                        "loss": spec.loss.value, "restart": rid,
                        "success": bool(flipped[i] or clean_wrong[i]),
                        "final_loss": float(final_loss[i]),
                    })
    return success


def combined_eval(
    models: Sequence[nn.DenseModel],
    ds: Dataset,
    eps_grid: Sequence[float],
    suite: EvalSuite,
    seed: int,
    *,
    norm: Norm,
    names: Sequence[str] | None = None,
    jobs: int = 1,
    transcript: list | None = None,
) -> list[EvalReport]:
    """The combined whitebox+transfer protocol over a model zoo.

    Every model is attacked by its own restarts; each perturbation is also
    applied to every other model. Robust accuracy per (model, eps) is the
    percentage of examples surviving all of it.
    """
    models = list(models)
    if not models:
        raise ValueError("need at least one model")
    dims = {m.input_dim for m in models}
    if len(dims) != 1 or models[0].input_dim != ds.dim:
        raise ValueError("all models must share the dataset's input dimension")
    names = list(names) if names is not None else [f"model{i}" for i in range(len(models))]
    y = ds.labels
    n, m = len(ds), len(models)
    content_ids = [model_content_id(mod) for mod in models]
    clean_wrong = [_predictions(mod, ds.inputs) != y for mod in models]
    fail_wb = [np.zeros((n, len(eps_grid)), dtype=bool) for _ in range(m)]
    fail_comb = [np.zeros((n, len(eps_grid)), dtype=bool) for _ in range(m)]
    for e_idx, eps in enumerate(eps_grid):
        for src in range(m):
            loss_grad_for = lambda kind, _s=src: attacks.model_loss_grad(models[_s], kind)
            for rid, spec, delta, final_loss in _suite_deltas(
                loss_grad_for, ds, float(eps), e_idx, suite, seed,
                content_ids[src], norm, jobs
            ):
                x_pert = ds.inputs + delta
                for tgt in range(m):
                    flipped = _predictions(models[tgt], x_pert) != y
                    fail_comb[tgt][:, e_idx] |= flipped
                    if tgt == src:
                        fail_wb[src][:, e_idx] |= flipped
                        if transcript is not None:
                            for i in range(n):
                                transcript.append({
                                    "model": names[src], "example": i,
                                    "eps": float(eps), "loss": spec.loss.value,
                                    "restart": rid,
                                    "success": bool(flipped[i] or clean_wrong[src][i]),
                                    "final_loss": float(final_loss[i]),
                                })
    reports = []
    for t in range(m):
        wb = fail_wb[t] | clean_wrong[t][:, None]
        comb = fail_comb[t] | clean_wrong[t][:, None]
        reports.append(EvalReport(
            name=names[t],
            clean_acc=100.0 * float(np.mean(~clean_wrong[t])),
            eps_grid=[float(e) for e in eps_grid],
            combined=[100.0 * float(np.mean(~comb[:, e])) for e in range(len(eps_grid))],
            whitebox=[100.0 * float(np.mean(~wb[:, e])) for e in range(len(eps_grid))],
        ).finalize())
    return reports


def ensemble_loss_grad(ens: training.Ensemble, kind: LossKind) -> attacks.LossGradFn:
    """Summed-loss whitebox attack surface for an ensemble."""

    def fn(x: np.ndarray, yv: np.ndarray):
        total_vals = None
        total_grads = None
        for member in ens.members:
            logits, _ = nn._forward_trace(member, x)
            vals = np.atleast_1d(losses.loss_value(kind, logits, yv))
            grads = nn.input_gradient(member, x, losses.loss_grad_logits(kind, logits, yv))
            total_vals = vals if total_vals is None else total_vals + vals
            total_grads = grads if total_grads is None else total_grads + grads
        return total_vals, total_grads

    return fn


def ensemble_eval(
    ens: training.Ensemble,
    ds: Dataset,
    eps_grid: Sequence[float],
    suite: EvalSuite,
    seed: int,
    *,
    norm: Norm,
    name: str = "ensemble",
    model_id=None,
    transfer_models: Sequence[nn.DenseModel] = (),
    jobs: int = 1,
) -> EvalReport:
    """Whitebox attacks on the naive summed loss, prediction by majority
    vote; perturbations from any transfer_models are pooled in as in the
    combined protocol.

    The default attack-seed identity deduplicates member content, so an
    ensemble of copies of one model attacks with exactly that model's
    whitebox perturbations.
    """
    if model_id is None:
        unique = list(dict.fromkeys(model_content_id(m) for m in ens.members))
        model_id = unique[0] if len(unique) == 1 else "+".join(unique)
    y = ds.labels
    preds = training.ensemble_predict(ens, ds.inputs)
    clean_wrong = preds != y
    n = len(ds)
    fail_wb = np.zeros((n, len(eps_grid)), dtype=bool)
    fail_comb = np.zeros((n, len(eps_grid)), dtype=bool)
    for e_idx, eps in enumerate(eps_grid):
        loss_grad_for = lambda kind: ensemble_loss_grad(ens, kind)
        for rid, spec, delta, _fl in _suite_deltas(
            loss_grad_for, ds, float(eps), e_idx, suite, seed, model_id, norm, jobs
        ):
            flipped = training.ensemble_predict(ens, ds.inputs + delta) != y
            fail_wb[:, e_idx] |= flipped
            fail_comb[:, e_idx] |= flipped
        for tm in transfer_models:
            tm_grad_for = lambda kind, _m=tm: attacks.model_loss_grad(_m, kind)
            for rid, spec, delta, _fl in _suite_deltas(
                tm_grad_for, ds, float(eps), e_idx, suite, seed,
                model_content_id(tm), norm, jobs,
            ):
                flipped = training.ensemble_predict(ens, ds.inputs + delta) != y
                fail_comb[:, e_idx] |= flipped
    wb = fail_wb | clean_wrong[:, None]
    comb = fail_comb | clean_wrong[:, None]
    return EvalReport(
        name=name,
        clean_acc=100.0 * float(np.mean(~clean_wrong)),
        eps_grid=[float(e) for e in eps_grid],
        combined=[100.0 * float(np.mean(~comb[:, e])) for e in range(len(eps_grid))],
        whitebox=[100.0 * float(np.mean(~wb[:, e])) for e in range(len(eps_grid))],
    ).finalize()
