"""attribroi: a desk-scale hierarchical vision transformer trained with a
composite distillation loss, plus saliency, Grad-CAM and ROI-level Shapley
attribution aggregated into a cross-method consensus report."""

from .atlas import RoiAtlas, RoiScoreTable, ConsensusReport, aggregate_roi, cohort_top_rois, consensus
from .checkpoint import load_checkpoint, save_checkpoint
from .estimator import MiniHViTClassifier, RoiAttribution
from .explain import AttributionMap, ShapleyConfig, grad_cam, saliency_map, shap_values
from .losses import DistillConfig, cross_entropy, distill_loss, final_loss, kl_divergence
from .model import MiniHViT, ModelConfig, init_model
from .synth import SynthSpec, generate_atlas, generate_dataset
from .training import AugmentConfig, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AttributionMap", "AugmentConfig", "ConsensusReport", "DistillConfig", "MiniHViT",
    "MiniHViTClassifier", "ModelConfig", "RoiAtlas", "RoiAttribution", "RoiScoreTable",
    "ShapleyConfig", "SynthSpec", "TrainConfig", "aggregate_roi", "cohort_top_rois", "consensus",
    "cross_entropy", "distill_loss", "final_loss", "generate_atlas", "generate_dataset",
    "grad_cam", "init_model", "kl_divergence", "load_checkpoint", "saliency_map",
    "save_checkpoint", "shap_values", "train",
]
