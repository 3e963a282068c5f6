"""Class-conditional dynamic-head segmentation of glomerular lesions across species."""

from .data import (
    CLASS_NAMES,
    DEFAULT_PROFILES,
    LabeledPatch,
    SpeciesProfile,
    SplitManifest,
    SyntheticSpec,
    build_manifest,
    generate_synthetic_dataset,
    ingest_patch,
)
from .estimator import GLAMSegmenter
from .exceptions import ConfigError, DataError, DivergenceError, GlamError, NotFittedError, ValidationError
from .metrics import dice, evaluate_model, extract_surface, hausdorff, mean_surface_distance
from .network import (
    GLAMNet,
    NetworkConfig,
    apply_dynamic_head,
    encode_task,
    generate_kernels,
    global_average_pool,
    init_params,
    kernel_length,
    load_checkpoint,
    save_checkpoint,
)
from .training import ImagePool, TrainConfig, partial_loss, select_checkpoint, train_epoch, validate

__version__ = "0.1.0"
