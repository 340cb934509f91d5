"""Scene-graph canonicalization under transitive and converse rules, with a
weighted GCN layout predictor trained end to end."""

from .canon import (
    CanonParams,
    FormulaSet,
    closure_oracle,
    max_product_paths,
    p_conv,
    p_trans,
    sgc,
    subgrad_wsgc_e,
    wsgc_e,
    wsgc_s,
)
from .errors import ConsistencyError, SgCanonError, TrainingError, ValidationError
from .metrics import EvalResult, evaluate, iou
from .neural import GcnModel, adam_step, gcn_backward, gcn_forward
from .sg_core import Layout, RelationVocab, SceneGraph, SceneObject, WeightedSceneGraph, per_relation_subgraph
from .sg_data import SynthConfig, noise_transform, semantic_equivalent_transform, synth_generate
from .training import TrainConfig, reinforce_grad, train

__version__ = "0.1.0"

__all__ = [
    "CanonParams", "FormulaSet", "closure_oracle", "max_product_paths", "p_conv", "p_trans", "sgc",
    "subgrad_wsgc_e", "wsgc_e", "wsgc_s", "ConsistencyError", "SgCanonError", "TrainingError",
    "ValidationError", "EvalResult", "evaluate", "iou", "GcnModel", "adam_step", "gcn_backward",
    "gcn_forward", "Layout", "RelationVocab", "SceneGraph", "SceneObject", "WeightedSceneGraph",
    "per_relation_subgraph", "SynthConfig", "noise_transform", "semantic_equivalent_transform",
    "synth_generate", "TrainConfig", "reinforce_grad", "train",
]
