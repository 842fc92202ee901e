"""attnreg: inference-time regulation of cross-attention maps, exercised on a
deterministic toy latent-diffusion simulator."""

from ._kernels import BACKEND
from .attention import (
    AttentionMap,
    LogitBlock,
    TokenMap2D,
    attention_output,
    compute_attention,
    flatten_grid,
    head_average,
    unravel,
)
from .basis import (
    EditParams,
    GaussianBasis,
    apply_edit,
    build_perturbation,
    default_sigma,
    gaussian_kernel,
    make_basis,
)
from .metrics import (
    BackendError,
    FixtureBackend,
    ScoreBackend,
    attn_quantile_profile,
    composite_score,
    dominance_index,
    head_max_stats,
    mean_head_max_stats,
    object_score,
    overhead,
    target_coverage,
)
from .objective import (
    RegulationConfig,
    error_E,
    fd_gradcheck,
    grad_theta,
    loss_and_grad,
    quantile,
    total_loss,
)
from .optimizer import OptimizationDiverged, OptState, optimize, optimize_step
from .recording import RunRecord, write_attention_csv, write_latent_frames, write_manifest, write_run
from .scaling import (
    RegulationOutcome,
    ScalerParams,
    gamma_for,
    inject_eos,
    regulate_attention,
    regulate_token_maps,
    run_bound_trials,
    scale_dominant,
    verify_bound,
)
from .schedule import LayerDesc, ScheduleState, apply_schedule, ema_update, select_layers
from .simulator import (
    HookContractError,
    SamplerConfig,
    ToyModel,
    encode_prompt,
    make_regulator_hooks,
    run_generation,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionMap",
    "BACKEND",
    "BackendError",
    "EditParams",
    "FixtureBackend",
    "GaussianBasis",
    "HookContractError",
    "LayerDesc",
    "LogitBlock",
    "OptState",
    "OptimizationDiverged",
    "RegulationConfig",
    "RegulationOutcome",
    "RunRecord",
    "SamplerConfig",
    "ScalerParams",
    "ScheduleState",
    "ScoreBackend",
    "TokenMap2D",
    "ToyModel",
    "apply_edit",
    "apply_schedule",
    "attention_output",
    "attn_quantile_profile",
    "build_perturbation",
    "composite_score",
    "compute_attention",
    "default_sigma",
    "dominance_index",
    "ema_update",
    "encode_prompt",
    "error_E",
    "fd_gradcheck",
    "flatten_grid",
    "gamma_for",
    "gaussian_kernel",
    "grad_theta",
    "head_average",
    "head_max_stats",
    "inject_eos",
    "loss_and_grad",
    "make_basis",
    "make_regulator_hooks",
    "mean_head_max_stats",
    "object_score",
    "optimize",
    "optimize_step",
    "overhead",
    "quantile",
    "regulate_attention",
    "regulate_token_maps",
    "run_bound_trials",
    "run_generation",
    "scale_dominant",
    "select_layers",
    "target_coverage",
    "total_loss",
    "unravel",
    "verify_bound",
    "write_attention_csv",
    "write_latent_frames",
    "write_manifest",
    "write_run",
    "__version__",
]
