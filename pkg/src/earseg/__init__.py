"""Two-stage retinal vessel segmentation with supervised error attention."""

from .backbone import Backbone, BackboneConfig, backbone_forward, init_params, scale_attention_fuse
from .checkpoint import Checkpoint, CheckpointError
from .dataio import (
    DatasetError,
    RetinalSample,
    augment,
    load_dataset,
    make_folds,
    synth_vessels,
)
from .eam import ErrorAttention, eam_forward, refine_logits
from .errormaps import align_error_map, binarize, generate_error_map
from .evaluation import (
    ConfusionCounts,
    MetricsReport,
    confusion,
    cross_validate,
    evaluate,
    metrics,
    render_overlay,
)
from .losses import LossWeights, ce_loss, ea_loss, hm_loss, total_loss
from .trainer import (
    TrainConfig,
    generate_initial_masks,
    lr_schedule,
    train_stage1,
    train_stage2,
)

__version__ = "0.1.0"
