"""Federated unlearning simulator and data-reconstruction attack engine."""

from .autodiff import DTYPE, NonFiniteError, cg_solve, grad, hvp, split_seed, tensor
from .data import (
    ClientDataset,
    DataFormatError,
    Dataset,
    load_cifar10,
    load_idx,
    mark_unlearn,
    partition,
    synth_blobs,
    synth_digits,
)
from .models import (
    ModelSpec,
    ParamVector,
    accuracy,
    batch_loss,
    cross_entropy,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .fedsim import FedConfig, TrainResult, aggregate, local_sgd, train_global
from .unlearn import ALGOS, UnlearnConfig, unlearn
from .attack import (
    MODES,
    AttackConfig,
    PseudoGradient,
    ReconstructionResult,
    init_dummies,
    pseudo_gradient,
    recon_loss,
    run_draun,
    run_draun_2nd,
    run_draun_specific,
    run_gia,
    surrogate_update,
)
from .metrics import (
    MetricsRecord,
    assign_batch,
    defend_noise,
    defend_prune,
    mse,
    psnr,
    read_image,
    ssim,
    tv,
    write_image,
    write_metrics_csv,
)
from .theory import (
    TheoryProbe,
    collapse_probe,
    error_bound_eval,
    estimate_smoothness,
    finite_diff_grad,
    jacobian_of_gradient,
    make_probe,
    run_gia_coupled,
    stationarity_check,
)

__version__ = "0.1.0"
