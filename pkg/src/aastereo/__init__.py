"""Adaptive cost aggregation for stereo matching on a small numpy reverse-mode autodiff core."""

__version__ = "0.1.0"

from .autodiff import (  # noqa: E402
    Function,
    GradCheckReport,
    ShapeError,
    Tape,
    Tensor,
    finite_difference_check,
    forward_backward,
)
from .complexity import ComplexityQuery, complexity  # noqa: E402
from .cost_volume import CostVolume, build_pyramid, correlate, scale_disparities  # noqa: E402
from .cross_scale import CsaParams, bilinear_upsample, csa, solve_cross_scale  # noqa: E402
from .data_io import (  # noqa: E402
    FormatError,
    StereoPair,
    SyntheticSceneSpec,
    generate_dataset,
    generate_stereogram,
    read_image,
    read_pfm,
    write_image,
    write_pfm,
)
from .features import ConvLayerParams, FeatureExtractor, conv2d, extract_pyramid  # noqa: E402
from .head import DisparityMap, MetricsReport, evaluate, masked_loss, smooth_l1, soft_argmin  # noqa: E402
from .intra import (  # noqa: E402
    AdaptiveAggregationParams,
    IsaParams,
    WindowAggregationParams,
    adaptive_aggregate,
    bilinear_sample,
    isa_block,
    window_aggregate,
)
from .model import StereoModel, ModelConfig  # noqa: E402
from .train import Adam, TrainerConfig, train  # noqa: E402
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint  # noqa: E402

__all__ = [name for name in dir() if not name.startswith("_")]
