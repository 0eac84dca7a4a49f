"""Instance-specific multimodal diffeomorphic registration.

A small convolutional network parameterizes a stationary velocity field;
the map is its Euler flow, trained per image pair against a structural
(MIND or learned contrastive) or local mutual-information similarity with
Jacobian, smoothness and norm regularizers.
"""

from .contrastive import ContrastiveDescriptor, augment_modality, bezier_eval
from .descriptor import MINDDescriptor, mind
from .evaluation import dice, endpoint_error, neg_jac_ratio, wilcoxon_signed_rank
from .flow import FlowConfig, integrate_flow, warp
from .objective import LossConfig, NeuralODERegistration, NumericalError, register
from .spectral import KernelSpec
from .synth import SynthSpec, make_pair, make_suite

__version__ = "0.1.0"

__all__ = [
    "ContrastiveDescriptor", "FlowConfig", "KernelSpec", "LossConfig", "MINDDescriptor",
    "NeuralODERegistration", "NumericalError", "SynthSpec", "augment_modality",
    "bezier_eval", "dice", "endpoint_error", "integrate_flow", "make_pair", "make_suite",
    "mind", "neg_jac_ratio", "register", "warp", "wilcoxon_signed_rank",
]
