"""attnforge: compile targets into exact ReLU-attention transformer
weights, verify them against independent oracles, estimate intrinsic
dimension, and predict neural scaling exponents."""

from .blocks import (
    DataKernelPair,
    StructuredLayout,
    make_addition_block,
    make_gating_ffn,
    make_interaction_head,
    make_psi_ffn,
    make_replace_ffn,
    parallelize_blocks,
    psi,
)
from .cube import (
    GridApprox,
    build_grid,
    choose_N,
    interpolant_error_bound,
    pou_oracle,
    pou_oracle_batch,
    sup_error_scan,
    synthesize_cube_approximator,
)
from .intrinsic_dim import (
    IdEstimate,
    PointCloud,
    estimate_id,
    knn_distance_profile,
    mle_local_dim,
    sample_synthetic_manifold,
)
from .manifold import (
    Atlas,
    Chart,
    make_atlas,
    manifold_oracle,
    prepare_manifold_plan,
    synthesize_chart_projection,
    synthesize_indicator_net,
    synthesize_manifold_approximator,
)
from .plots import emit_plot, render_figure
from .runtime import (
    AttentionHead,
    FeedForward,
    ModelSize,
    TransformerBlock,
    TransformerNet,
    attention_forward,
    block_forward,
    ffn_forward,
    load_net,
    mha_forward,
    model_size,
    net_forward,
    net_forward_batch,
    net_from_json,
    net_to_json,
    save_net,
    weight_sup_norm,
)
from .scaling import (
    ArchParams,
    ExponentPrediction,
    ScalingFit,
    convert_exponents,
    fit_power_law,
    generalization_rate_curve,
    log_covering_number,
    predict_exponents,
    predicted_architecture,
)
from .targets import HolderTarget, make_target, registry_names

__version__ = "0.1.0"
