from .base import Backends, BackendError, Exhausted, ProtocolError
from .client import HttpBackends, invoke
from .mock import MockBackends, MockWorld, make_toy_dataset
from .protocol import BackendEndpoint, GenerationRequest, Role

__all__ = [
    "Backends",
    "BackendError",
    "BackendEndpoint",
    "Exhausted",
    "GenerationRequest",
    "HttpBackends",
    "MockBackends",
    "MockWorld",
    "ProtocolError",
    "Role",
    "invoke",
    "make_toy_dataset",
]
