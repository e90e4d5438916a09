"""Vertical federated learning with per-party heterogeneous models.

Parties hold disjoint feature columns of the same samples; only the active
party holds labels.  Training aggregates per-party feature embeddings under
pairwise blinding masks that cancel exactly, and the active party relays each
party's loss and logits gradient so every participant can train its own
network with its own optimizer.
"""

from .baselines import run_aggvfl, run_local
from .bounds import BoundParams, bound_trajectory, estimate_constants, run_convex_calibration
from .data import Dataset, batch_iter, load_csv, load_idx, synth_blobs, vertical_split
from .estimators import AggVFLClassifier, LocalOnlyClassifier, VFedMHClassifier
from .nn import NetworkSpec, softmax_cross_entropy, spec_from_name
from .optim import OptimizerConfig
from .protocol import PartyConfig, SessionConfig, TrainResult, run_training
from .secagg import DEFAULT_GROUP, FixedPointCodec, GroupParams, blinding_mask, derive_shared, keygen

__version__ = "0.1.0"

__all__ = [
    "AggVFLClassifier",
    "BoundParams",
    "Dataset",
    "DEFAULT_GROUP",
    "FixedPointCodec",
    "GroupParams",
    "LocalOnlyClassifier",
    "NetworkSpec",
    "OptimizerConfig",
    "PartyConfig",
    "SessionConfig",
    "TrainResult",
    "VFedMHClassifier",
    "batch_iter",
    "blinding_mask",
    "bound_trajectory",
    "derive_shared",
    "estimate_constants",
    "keygen",
    "load_csv",
    "load_idx",
    "run_aggvfl",
    "run_convex_calibration",
    "run_local",
    "run_training",
    "softmax_cross_entropy",
    "spec_from_name",
    "synth_blobs",
    "vertical_split",
    "__version__",
]
