"""Open-vocabulary 3D detection sandbox.

Synthetic paired point-cloud/image scenes, toy two-modality set-prediction
detectors with hand-derived gradients, cross-modal pseudo labels, and a
debiased contrastive loss with distance-aware temperature.
"""

from .config import ConfigError, default_config, load_config, save_config
from .geometry import (
    AllBehindCamera,
    Box2D,
    Box3D,
    CameraModel,
    corners_of_box3d,
    iou_2d,
    iou_3d,
    iou_3d_oracle_mc,
    points_in_box,
    project_box_to_2d,
)
from .scenegen import (
    ClassificationSample,
    DeskDataset,
    ObjectTemplate,
    PairedImage,
    PlacementFailure,
    Scene,
    SceneObject,
    VocabularySplit,
    generate_classification_set,
    generate_dataset,
    generate_scene,
    load_dataset,
    render_paired_image,
    save_dataset,
    split_vocabulary,
)
from .encoders import (
    DegenerateNorm,
    EmbeddingVector,
    EmptyRoi,
    ModelConfig,
    NonFiniteGradient,
    ParamStore,
    Proposal,
    RoiFeature,
    classify,
    encode_image_roi,
    encode_pointcloud_roi,
    forward_detector_2d,
    forward_detector_3d,
    gradient_check,
    init_params,
    load_checkpoint,
    project_and_normalize,
    save_checkpoint,
)
from .losses import (
    ContrastiveBatch,
    ContrastiveConfig,
    LossConfig,
    NoPositives,
    SupervisionRecord,
    assemble_phase1_loss,
    assemble_phase2_loss,
    hungarian_match,
    loss_box_2d,
    loss_box_3d,
    loss_cls,
    loss_decc,
    loss_max_size_ign,
)
from .pseudolabel import (
    PseudoLabel,
    PseudoStore,
    ScheduleConfig,
    generate_pseudo_labels,
    refresh_if_due,
    schedule_k,
)
from .evalmetrics import MetricsReport, average_precision, evaluate, match_detections
from .trainer import (
    DivergenceDetected,
    NonFiniteUpdate,
    TrainConfig,
    TrainLog,
    apply_label_ratio,
    optimizer_step,
    train_phase1,
    train_phase2,
)

__version__ = "0.1.0"
