"""Trainers: standard, fixed-radius adversarial (PGD), linearly-scaled
adversarial (PGDLS), and margin-maximizing (MMA/OMMA) training with the
per-example radius store, plus majority-vote ensembles.

All trainers are bit-reproducible given the config seed: minibatch order,
parameter init, and attack randomness all derive from it by name.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from . import attacks, data as data_mod, losses, margin, nn
from .attacks import Norm, PgdConfig
from .losses import LossKind
from .rng import derive_seed, generator


class Method(enum.Enum):
    STD = "std"
    PGD = "pgd"
    PGDLS = "pgdls"
    MMA = "mma"
    OMMA = "omma"


# Relative weights of the clean and adversarial terms on the correctly
# classified part of a minibatch; the wrongly classified part always gets
# weight 1. The margin-maximizing combined loss uses (1/3, 2/3); dropping
# the clean term (0, 1) gives the plain variant.
MMA_WEIGHTS = {Method.MMA: (1.0 / 3.0, 2.0 / 3.0), Method.OMMA: (0.0, 1.0)}


@dataclass(frozen=True)
class OptimSpec:
    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    # Piecewise-constant schedule: at each fraction of the run the rate is
    # multiplied by lr_factor.
    lr_milestones: tuple[float, ...] = ()
    lr_factor: float = 0.1

    def make_state(self, model: nn.DenseModel) -> nn.OptimizerState:
        if self.kind == "sgd":
            return nn.OptimizerState.for_model(model, "sgd", self.lr, momentum=self.momentum)
        return nn.OptimizerState.for_model(
            model, "adam", self.lr, beta1=self.beta1, beta2=self.beta2, eps_hat=self.eps_hat
        )

    def lr_at(self, epoch: int, total_epochs: int) -> float:
        if total_epochs <= 0:
            return self.lr
        passed = sum(1 for m in self.lr_milestones if epoch >= m * total_epochs)
        return self.lr * self.lr_factor**passed


@dataclass(frozen=True)
class TrainConfig:
    method: Method
    hidden: tuple[int, ...] = (32, 32)
    norm: Norm = Norm.L2
    eps: float | None = None  # PGD / PGDLS radius
    d_max: float | None = None  # MMA / OMMA hinge threshold
    eps_min: float | None = None  # store floor; default 0.05 * d_max
    eps_max: float | None = None  # store/search cap; default 1.05 * d_max
    optimizer: OptimSpec = OptimSpec()
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    attack: PgdConfig = PgdConfig(steps=10, loss=LossKind.SLM, rand_init=True)
    ramp_epochs: int | None = None  # PGDLS; default epochs // 2
    val_fraction: float = 0.1
    bisect_iters: int = 10

    def __post_init__(self):
        if self.method in (Method.PGD, Method.PGDLS) and self.eps is None:
            raise ValueError(f"{self.method.value} training requires eps")
        if self.method in (Method.MMA, Method.OMMA) and self.d_max is None:
            raise ValueError(f"{self.method.value} training requires d_max")
        if self.resolved_eps_min() < 0 or self.resolved_eps_max() < self.resolved_eps_min():
            raise ValueError("need eps_max >= eps_min >= 0")

    def resolved_eps_min(self) -> float:
        if self.eps_min is not None:
            return self.eps_min
        return 0.05 * self.d_max if self.d_max is not None else 0.0

    def resolved_eps_max(self) -> float:
        if self.eps_max is not None:
            return self.eps_max
        return 1.05 * self.d_max if self.d_max is not None else 0.0

    def resolved_ramp(self) -> int:
        if self.ramp_epochs is not None:
            return max(1, self.ramp_epochs)
        return max(1, self.epochs // 2)


@dataclass
class EpsilonStore:
    """Per-training-example perturbation lengths, clamped to
    [eps_min, eps_max] at all times and carried across epochs."""

    values: np.ndarray
    eps_min: float
    eps_max: float

    @classmethod
    def init(cls, n: int, eps_min: float, eps_max: float) -> "EpsilonStore":
        if not 0 <= eps_min <= eps_max:
            raise ValueError("need 0 <= eps_min <= eps_max")
        return cls(np.full(n, float(eps_min)), eps_min, eps_max)

    def update(self, indices: np.ndarray, magnitudes: np.ndarray) -> None:
        self.values[indices] = np.clip(magnitudes, self.eps_min, self.eps_max)

    def snapshot(self) -> np.ndarray:
        return self.values.copy()


@dataclass
class TrainResult:
    model: nn.DenseModel
    metrics: list[dict] = field(default_factory=list)
    store: EpsilonStore | None = None
    store_history: list[np.ndarray] = field(default_factory=list)
    best_epoch: int | None = None

    # Lets callers unpack (model, store history) directly.
    def __iter__(self):
        yield self.model
        yield self.store_history


def accuracy(model: nn.DenseModel, ds: data_mod.Dataset) -> float:
    pred = np.atleast_2d(nn.forward(model, ds.inputs)).argmax(axis=1)
    return float(np.mean(pred == ds.labels))


def _mean_ce_grads(model: nn.DenseModel, x: np.ndarray, y: np.ndarray,
                   weights: np.ndarray) -> tuple[float, nn.ParamGrads]:
    logits = np.atleast_2d(nn.forward(model, x))
    vals = losses.loss_value(LossKind.CE, logits, y)
    upstream = losses.loss_grad_logits(LossKind.CE, logits, y) * weights[:, None]
    grads, _ = nn.backward(model, x, upstream)
    return float(np.sum(vals * weights)), grads


def _clean_batch_step(model, state, xb, yb):
    w = np.full(xb.shape[0], 1.0 / xb.shape[0])
    loss, grads = _mean_ce_grads(model, xb, yb, w)
    nn.optimizer_step(state, model, grads)
    return loss


def _adv_batch_step(model, state, xb, yb, idxb, eps, cfg: TrainConfig, box, epoch):
    seeds = [derive_seed(cfg.seed, "attack", epoch, int(i)) for i in idxb]
    train_attack = replace(cfg.attack, loss=LossKind.CE)
    loss_grad = attacks.model_loss_grad(model, LossKind.CE)
    delta, _, ok, _ = attacks.pgd_batch(
        loss_grad, xb, yb, eps, train_attack, cfg.norm, box, seeds
    )
    x_adv = xb + delta
    if box is not None:
        x_adv = np.clip(x_adv, box[0], box[1])
    w = np.full(xb.shape[0], 1.0 / xb.shape[0])
    loss, grads = _mean_ce_grads(model, x_adv, yb, w)
    nn.optimizer_step(state, model, grads)
    return loss


def mma_minibatch_loss(
    model: nn.DenseModel,
    batch: tuple[np.ndarray, np.ndarray, np.ndarray],
    store: EpsilonStore,
    d_max: float,
    variant: Method,
    *,
    norm: Norm,
    attack_cfg: PgdConfig | None = None,
    box: tuple[float, float] | None = None,
    bisect_iters: int = 10,
    seed: int = 0,
    epoch: int = 0,
) -> tuple[float, EpsilonStore]:
    """Margin-maximizing loss of one minibatch; updates the radius store.

    The batch splits by current prediction. Correctly classified examples
    are attacked adaptively starting from their stored radii; each store
    entry becomes the found magnitude, and the example joins the
    adversarial term only when that magnitude is below d_max (the hinge
    set). Sums are realized as masked means over the batch size.
    """
    loss, _ = _mma_batch_terms(
        model, batch, store, d_max, variant, norm=norm, attack_cfg=attack_cfg,
        box=box, bisect_iters=bisect_iters, seed=seed, epoch=epoch,
    )
    return loss, store


def _mma_batch_terms(model, batch, store, d_max, variant, *, norm, attack_cfg,
                     box, bisect_iters, seed, epoch):
    if variant not in MMA_WEIGHTS:
        raise ValueError("variant must be the margin trainer with or without the clean term")
    w_clean, w_adv = MMA_WEIGHTS[variant]
    if attack_cfg is None:
        attack_cfg = PgdConfig(steps=10, loss=LossKind.SLM, rand_init=True)
    xb, yb, idxb = batch
    xb = np.asarray(xb, dtype=np.float64)
    yb = np.asarray(yb, dtype=np.int64)
    idxb = np.asarray(idxb, dtype=np.int64)
    m = xb.shape[0]
    pred = np.atleast_2d(nn.forward(model, xb)).argmax(axis=1)
    correct = pred == yb
    wrong_idx = np.flatnonzero(~correct)
    corr_idx = np.flatnonzero(correct)

    parts_x = [xb[wrong_idx]]
    parts_y = [yb[wrong_idx]]
    parts_w = [np.full(wrong_idx.size, 1.0 / m)]
    if w_clean > 0.0 and corr_idx.size:
        parts_x.append(xb[corr_idx])
        parts_y.append(yb[corr_idx])
        parts_w.append(np.full(corr_idx.size, w_clean / m))
    if corr_idx.size:
        eps_init = store.values[idxb[corr_idx]]
        seeds = [derive_seed(seed, "anpgd", epoch, int(i)) for i in idxb[corr_idx]]
        res = attacks.an_pgd_batch(
            model, xb[corr_idx], yb[corr_idx], eps_init, store.eps_max,
            attack_cfg, norm, box, seeds,
            bisect_loss=LossKind.SLM, bisect_iters=bisect_iters,
        )
        # Degenerate or non-finite rows are treated as robust beyond the
        # search cap: the hinge excludes them and the store saturates.
        mags = np.where(res.ok, res.magnitude, store.eps_max)
        store.update(idxb[corr_idx], mags)
        admitted = res.ok & (mags < d_max)
        if np.any(admitted):
            x_adv = xb[corr_idx][admitted] + res.delta[admitted]
            if box is not None:
                x_adv = np.clip(x_adv, box[0], box[1])
            parts_x.append(x_adv)
            parts_y.append(yb[corr_idx][admitted])
            parts_w.append(np.full(int(admitted.sum()), w_adv / m))
    x_all = np.concatenate(parts_x, axis=0)
    y_all = np.concatenate(parts_y, axis=0)
    w_all = np.concatenate(parts_w, axis=0)
    logits = np.atleast_2d(nn.forward(model, x_all))
    vals = losses.loss_value(LossKind.CE, logits, y_all)
    loss = float(np.sum(np.atleast_1d(vals) * w_all))
    return loss, (x_all, y_all, w_all)


def _mma_epoch(model, state, train_ds, store, cfg: TrainConfig, epoch: int):
    order = generator(cfg.seed, "shuffle", epoch).permutation(len(train_ds))
    total = 0.0
    for start in range(0, len(train_ds), cfg.batch_size):
        sel = order[start : start + cfg.batch_size]
        batch = (train_ds.inputs[sel], train_ds.labels[sel], sel)
        loss, (x_all, y_all, w_all) = _mma_batch_terms(
            model, batch, store, cfg.d_max, cfg.method, norm=cfg.norm,
            attack_cfg=cfg.attack, box=train_ds.box,
            bisect_iters=cfg.bisect_iters, seed=cfg.seed, epoch=epoch,
        )
        _, grads = _mean_ce_grads(model, x_all, y_all, w_all)
        nn.optimizer_step(state, model, grads)
        total += loss * sel.size
    return total / len(train_ds)


def _fixed_eps_epoch(model, state, train_ds, cfg: TrainConfig, epoch: int, eps: float):
    order = generator(cfg.seed, "shuffle", epoch).permutation(len(train_ds))
    total = 0.0
    for start in range(0, len(train_ds), cfg.batch_size):
        sel = order[start : start + cfg.batch_size]
        xb, yb = train_ds.inputs[sel], train_ds.labels[sel]
        if cfg.method is Method.STD or eps == 0.0:
            loss = _clean_batch_step(model, state, xb, yb)
        else:
            loss = _adv_batch_step(model, state, xb, yb, sel, eps, cfg, train_ds.box, epoch)
        total += loss * sel.size
    return total / len(train_ds)


def _val_margin_stats(model, val_ds, store, cfg: TrainConfig) -> dict:
    eps_init = float(np.clip(store.values.mean(), max(store.eps_min, 1e-9), store.eps_max))
    vals, _ = margin.measure_margins(
        model, val_ds.inputs, val_ds.labels, eps_init, store.eps_max, cfg.attack,
        norm=cfg.norm, box=val_ds.box, bisect_loss=LossKind.LM,
        bisect_iters=cfg.bisect_iters, seed=derive_seed(cfg.seed, "valmargin"),
    )
    return {
        "val_margin_mean": float(vals.mean()),
        "val_margin_median": float(np.median(vals)),
        "val_margin_p10": float(np.percentile(vals, 10)),
        # Selection metric: margins beyond the hinge threshold are outside
        # the objective (and a failed search reports the cap), so they all
        # count as d_max.
        "val_margin_capped": float(np.minimum(vals, cfg.d_max).mean()),
    }


def train_standard(dataset: data_mod.Dataset, cfg: TrainConfig) -> TrainResult:
    """Minibatch optimizer on the mean clean cross entropy."""
    return _train(dataset, replace(cfg, method=Method.STD))


def train_pgd(dataset: data_mod.Dataset, cfg: TrainConfig) -> TrainResult:
    """Adversarial training at fixed radius (cross-entropy inner attack,
    step size 2.5*eps/steps)."""
    if cfg.method is not Method.PGD:
        cfg = replace(cfg, method=Method.PGD)
    return _train(dataset, cfg)


def train_pgdls(dataset: data_mod.Dataset, cfg: TrainConfig) -> TrainResult:
    """Adversarial training with the radius ramped linearly from 0 over the
    first ramp_epochs epochs (default: half the run)."""
    if cfg.method is not Method.PGDLS:
        cfg = replace(cfg, method=Method.PGDLS)
    return _train(dataset, cfg)


def train_mma(dataset: data_mod.Dataset, cfg: TrainConfig) -> TrainResult:
    """Margin-maximizing training: per-example adaptive radii carried
    across epochs, checkpoint chosen by largest validation mean margin."""
    if cfg.method not in (Method.MMA, Method.OMMA):
        cfg = replace(cfg, method=Method.MMA)
    return _train(dataset, cfg)


def train(dataset: data_mod.Dataset, cfg: TrainConfig) -> TrainResult:
    return _train(dataset, cfg)


def _train(dataset: data_mod.Dataset, cfg: TrainConfig) -> TrainResult:
    if dataset is None or len(dataset) == 0:
        raise ValueError("dataset is empty")
    sizes = [dataset.dim, *cfg.hidden, dataset.num_classes]
    model = nn.init_model(sizes, derive_seed(cfg.seed, "init"))
    state = cfg.optimizer.make_state(model)
    result = TrainResult(model=model)
    is_mma = cfg.method in (Method.MMA, Method.OMMA)

    train_ds, val_ds = dataset, None
    if is_mma and cfg.val_fraction > 0.0 and len(dataset) >= 10:
        train_ds, val_ds = data_mod.split_train_val(dataset, cfg.val_fraction)

    store = None
    if is_mma:
        store = EpsilonStore.init(len(train_ds), cfg.resolved_eps_min(), cfg.resolved_eps_max())
        result.store = store

    # Checkpoint candidates: (epoch, val accuracy, capped mean margin,
    # params). Selection takes the largest mean margin among epochs whose
    # validation accuracy sits within one point of the best seen, so a
    # degenerate early model cannot win on spuriously saturated margins.
    candidates: list[tuple[int, float, float, nn.DenseModel]] = []
    best_val_acc = -np.inf
    for epoch in range(cfg.epochs):
        state.lr = cfg.optimizer.lr_at(epoch, cfg.epochs)
        if is_mma:
            mean_loss = _mma_epoch(model, state, train_ds, store, cfg, epoch)
        else:
            eps = cfg.eps or 0.0
            if cfg.method is Method.PGDLS:
                eps = eps * min(1.0, epoch / cfg.resolved_ramp())
            mean_loss = _fixed_eps_epoch(model, state, train_ds, cfg, epoch, eps)
        row = {"epoch": epoch, "train_loss": mean_loss,
               "train_clean_acc": accuracy(model, train_ds)}
        if is_mma:
            result.store_history.append(store.snapshot())
            if val_ds is not None:
                row.update(_val_margin_stats(model, val_ds, store, cfg))
                row["val_clean_acc"] = accuracy(model, val_ds)
                best_val_acc = max(best_val_acc, row["val_clean_acc"])
                candidates.append((epoch, row["val_clean_acc"],
                                   row["val_margin_capped"], model.copy()))
                candidates = [c for c in candidates if c[1] >= best_val_acc - 0.01]
        result.metrics.append(row)
    if candidates:
        epoch, _, _, params = max(candidates, key=lambda c: (c[2], -c[0]))
        result.model = params
        result.best_epoch = epoch
    return result


@dataclass
class Ensemble:
    members: list[nn.DenseModel]

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble must be non-empty")
        d0, k0 = self.members[0].input_dim, self.members[0].num_classes
        for m in self.members[1:]:
            if m.input_dim != d0 or m.num_classes != k0:
                raise ValueError("ensemble members must share input/output dimensions")

    @property
    def num_classes(self) -> int:
        return self.members[0].num_classes


def ensemble_predict(ens: Ensemble, x) -> int | np.ndarray:
    """Plurality vote over member argmax labels; ties break to the largest
    summed softmax probability among the tied labels, then lowest index."""
    xv = np.asarray(x, dtype=np.float64)
    single = xv.ndim == 1
    xb = xv[None, :] if single else xv
    n, k = xb.shape[0], ens.num_classes
    counts = np.zeros((n, k))
    scores = np.zeros((n, k))
    rows = np.arange(n)
    for member in ens.members:
        logits = np.atleast_2d(nn.forward(member, xb))
        counts[rows, logits.argmax(axis=1)] += 1.0
        scores += losses.softmax(logits)
    top = counts.max(axis=1, keepdims=True)
    tied = counts == top
    masked_scores = np.where(tied, scores, -np.inf)
    pred = masked_scores.argmax(axis=1)  # argmax takes the lowest tied index
    return int(pred[0]) if single else pred
