"""Tree tensor network classifiers on product-state embeddings of classical data."""

__version__ = "0.1.0"

from .classifier import (
    ConfusionMatrix,
    LabeledFeatures,
    cost,
    cost_gradient,
    f1_scores,
    predict,
    predict_batch,
    solve_weights_pinv,
)
from .encoding import LocalMap, MapKind, embed_batch, embed_vector
from .ttn import (
    Isometry,
    PairingSchedule,
    TTNModel,
    WeightMatrix,
    build_tree,
    coarse_grain,
    coarse_grain_batch,
    topology_image,
    topology_interleaved,
    topology_linear,
)

__all__ = [
    "ConfusionMatrix",
    "Isometry",
    "LabeledFeatures",
    "LocalMap",
    "MapKind",
    "PairingSchedule",
    "TTNModel",
    "WeightMatrix",
    "build_tree",
    "coarse_grain",
    "coarse_grain_batch",
    "cost",
    "cost_gradient",
    "embed_batch",
    "embed_vector",
    "f1_scores",
    "predict",
    "predict_batch",
    "solve_weights_pinv",
    "topology_image",
    "topology_interleaved",
    "topology_linear",
]
