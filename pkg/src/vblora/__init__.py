"""VB-LoRA: LoRA factors composed from a globally shared vector bank."""

from .core import (
    ComposedFactors,
    LogitTensor,
    SubVector,
    VectorBank,
    adapted_forward,
    compose_A,
    compose_B,
    compose_factors,
    init_bank,
    init_logits,
    merge_delta,
    merge_weight,
    tkam_backward,
    topk_admix,
)
from .variants import SelectionKind, SelectionPolicy, select_infer, select_train

__version__ = "0.1.0"
