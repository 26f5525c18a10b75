"""meshfed: decentralized federated learning over peer-to-peer parameter
gossip, with a deterministic desk-scale network simulator."""

from .core import (
    Dtype,
    ModelSpec,
    Namespace,
    NodeId,
    ParameterSet,
    SharingMode,
    SpecMismatch,
    Tensor,
    conforms,
    l2_distance,
    spec_of,
)

__all__ = [
    "Dtype",
    "ModelSpec",
    "Namespace",
    "NodeId",
    "ParameterSet",
    "SharingMode",
    "SpecMismatch",
    "Tensor",
    "conforms",
    "l2_distance",
    "spec_of",
]

__version__ = "0.1.0"
