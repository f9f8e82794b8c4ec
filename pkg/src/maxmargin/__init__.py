"""Margin-maximizing adversarial training, attacks, oracles, and the
combined whitebox+transfer robustness evaluation protocol, at desk scale.
"""

from .attacks import (
    AttackResult,
    Norm,
    PerturbationBudget,
    PgdConfig,
    an_pgd,
    bisection_zero_crossing,
    pgd_attack,
    project,
    random_init,
    spsa_attack,
)
from .data import Dataset, gen_blobs, load_mnist_idx, split_train_val
from .errors import (
    ConfigError,
    DegenerateDirectionError,
    DimensionError,
    IdxFormatError,
    NumericError,
)
from .evaluation import (
    AttackSpec,
    EvalReport,
    EvalSuite,
    combined_eval,
    compute_metrics,
    ensemble_eval,
    whitebox_eval,
)
from .losses import LossKind, ce_slm_ratio, loss_grad_logits, loss_value, softmax
from .margin import (
    MarginEstimate,
    brute_force_margin,
    eps_star_of_rho,
    estimate_margin,
    linear_margin_analytic,
    margin_grad_scalar,
    margin_param_grad,
)
from .nn import (
    DenseModel,
    OptimizerState,
    backward,
    finite_diff_grad,
    forward,
    init_model,
    load_model,
    optimizer_step,
    save_model,
)
from .training import (
    Ensemble,
    EpsilonStore,
    Method,
    OptimSpec,
    TrainConfig,
    ensemble_predict,
    mma_minibatch_loss,
    train,
    train_mma,
    train_pgd,
    train_pgdls,
    train_standard,
)

__version__ = "0.1.0"
