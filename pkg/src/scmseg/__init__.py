"""Few-shot segmentation from super correlation maps.

The pipeline builds two cosine-correlation pyramids per episode — one
from the full support image, one from the input-masked support image —
stacks them channel-wise, and trains a small encoder/decoder head to
predict the query mask. Includes fold-based class splits, a synthetic
shape benchmark, evaluation metrics, and an ablation harness over
feature combinations and fusion modes.
"""

from .backbone import (
    FeaturePyramid,
    ToyBackbone,
    ToyBackboneConfig,
    create_backbone,
    extract_pyramid,
    flatten_query,
    flatten_support,
    register_backbone_adapter,
    unflatten_query,
    unflatten_support,
)
from .correlation import (
    DEFAULT_EPS,
    FEATURE_ROWS,
    FUSION_MODES,
    CorrelationPyramid,
    CorrelationStack,
    PipelineSpec,
    build_inputs,
    build_scm,
    cosine_correlation,
    fuse,
    oracle_correlation,
    super_correlation_maps,
)
from .episodes import (
    Episode,
    FoldSpec,
    SyntheticSpec,
    block_shift_permutation,
    generate_synthetic_episode,
    load_episode_dir,
    remap_classes,
    sample_episode,
    save_episode_dir,
    split_folds,
)
from .errors import ConfigError, EpisodeFormatError, NanLossError
from .evaluation import (
    EpisodeResult,
    MetricsReport,
    build_report,
    convergence_speedup,
    fb_iou,
    iou,
    miou,
    stratified_small_mask,
    time_to_threshold,
)
from .masking import mask_area_fraction, mask_features, mask_image, resize_mask
from .segmenter import (
    CorrelationSegmenter,
    SegmenterConfig,
    TrainLog,
    ablation_forward,
    fit,
    load_checkpoint,
    predict,
    save_checkpoint,
)

__version__ = "0.1.0"
