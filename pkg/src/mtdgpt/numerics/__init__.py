from .checkpoint import load_arrays, save_arrays
from .nn import LayerNorm, Linear, MLP, Module, causal_mask, cross_entropy, masked_attention
from .optim import Adam, AdamState, adam_step
from .tensor import MASK_VALUE, DiffArray, NumericFault, no_grad

__all__ = [
    "Adam",
    "AdamState",
    "DiffArray",
    "LayerNorm",
    "Linear",
    "MASK_VALUE",
    "MLP",
    "Module",
    "NumericFault",
    "adam_step",
    "causal_mask",
    "cross_entropy",
    "load_arrays",
    "masked_attention",
    "no_grad",
    "save_arrays",
]
