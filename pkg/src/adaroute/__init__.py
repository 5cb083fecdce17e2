"""Continual task learning with a frozen encoder, per-task low-rank
adapters, and an analytic recursive-least-squares task router."""

from .config import RunConfig, config_from_dict, config_from_toml, default_config
from .encoder import (
    AdapterBank,
    AdapterHyper,
    EncoderConfig,
    LayeredEncoder,
    LowRankAdapter,
    adapter_delta,
    new_adapter,
    train_adapter,
)
from .expansion import (
    ExpansionPipeline,
    expand,
    expand_batch,
    make_pipeline,
    mean_pool,
    separability_probe,
)
from .harness import (
    AccuracyMatrix,
    RoutingAccuracyTrace,
    RunResult,
    compute_bwt,
    compute_op,
    run_bp_router_baseline,
    run_continual,
    run_inference,
    run_single_adapter_baseline,
    run_sweep,
)
from .router import (
    ExpandedBatch,
    RlsState,
    RouteDecision,
    grow_label_space,
    init_state,
    route,
    solve_joint,
    update,
    update_weight_direct,
)
from .tasks import StreamSpec, TaskStream, generate_task_stream

__version__ = "0.1.0"
