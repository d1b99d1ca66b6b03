"""pcoseg: segment posterior capsular opacification in retroillumination
images and classify each eye as treatment required / not yet required."""

from .augment import AugmentSpec, augment_pair, augment_stream
from .classify import (
    AreaRecord,
    CutoffCurve,
    area_percent,
    candidate_cutoffs,
    classify_case,
    select_cutoff,
    sweep_cutoffs,
)
from .dataset import (
    FoldPlan,
    RetroImage,
    Roi,
    SynthSpec,
    crop_roi,
    make_folds,
    split_train_valid,
    synthesize_sample,
)
from .groundtruth import (
    Mask,
    StructuringElement,
    dilate,
    generate_gt2,
    kmeans_segment,
    load_manual_mask,
    morph_close,
)
from .metrics import (
    ClassificationMetrics,
    ConfusionCounts,
    classification_metrics,
    confusion,
    dice,
    iou,
    pixel_accuracy,
)
from .pipeline import RunConfig, RunReport, emit_curves, emit_scatter, run_pipeline
from .training import TrainConfig, bce_loss, predict, train_model
from .unet import UNetConfig, binarize, build_unet, forward_probs

__version__ = "0.1.0"
