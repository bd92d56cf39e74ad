"""Open-vocabulary scene parsing with order-preserving concept and pixel embeddings."""

from .datasets import FeatureDataset, read_dataset, write_dataset
from .embedding import (
    COSINE,
    HYPER,
    L2,
    EmbeddingTable,
    PixelEmbedder,
    ScoreKind,
    concept_loss,
    image_loss_margin,
    image_loss_softmax,
    score,
    score_matrix,
)
from .inference import (
    calibrate_threshold,
    classify_closed,
    predict_zero_shot,
    softmax_baseline_predict,
    softmax_baseline_train,
)
from .metrics import aggregate, flat_metrics, hierarchical_scores, info_content_ratio
from .taxonomy import ConceptGraph, build_graph, build_taxonomy, information_content, lca
from .training import TrainConfig, TrainedModel, train_concepts, train_joint

__version__ = "0.1.0"

__all__ = [
    "COSINE", "HYPER", "L2", "ConceptGraph", "EmbeddingTable", "FeatureDataset", "PixelEmbedder",
    "ScoreKind", "TrainConfig", "TrainedModel", "aggregate", "build_graph", "build_taxonomy",
    "calibrate_threshold", "classify_closed", "concept_loss", "flat_metrics", "hierarchical_scores",
    "image_loss_margin", "image_loss_softmax", "info_content_ratio", "information_content", "lca",
    "predict_zero_shot", "read_dataset", "score", "score_matrix", "softmax_baseline_predict",
    "softmax_baseline_train", "train_concepts", "train_joint", "write_dataset",
]
