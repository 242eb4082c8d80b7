"""Linear-attention vision backbone with local concentration, plus the
analysis toolkit that verifies its checkable properties."""

from .attention import (
    AttentionConfig,
    WindowLayout,
    feature_map,
    linear_attention_direct,
    linear_attention_factored,
    multi_head,
    select_attention_order,
    softmax_attention,
    window_partition,
    window_reverse,
)
from .locality import CpeParams, LcmParams, cpe_forward, enhanced_linear_attention, \
    lcm_forward, lcm_residual
from .model import (
    ModelConfig,
    WeightStore,
    forward,
    param_count,
    variant_config,
)
from .numerics import ConvSpec, ShapeError, conv2d, layer_norm, matmul, softmax_rows
from .weights import init_weights, load_weights, save_weights

__version__ = "0.1.0"
