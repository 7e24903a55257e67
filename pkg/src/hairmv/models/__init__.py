from .backbone import BlockSpec, UNet, attention_weights, block_layout
from .hair import HairCrossAttention, HairFeatureBank, HairPathway
from .identity import IdentityNet
from .model import NAMESPACES, HairTransferModel
from .temporal import TemporalAttention, TemporalStack

__all__ = [
    "BlockSpec",
    "HairCrossAttention",
    "HairFeatureBank",
    "HairPathway",
    "HairTransferModel",
    "IdentityNet",
    "NAMESPACES",
    "TemporalAttention",
    "TemporalStack",
    "UNet",
    "attention_weights",
    "block_layout",
]
