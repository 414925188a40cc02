"""drpki: distributed RPKI signing over threshold ECDSA among five RIR nodes."""

from .sharing import SchemeId
from .tecdsa import ProtocolConfig

__version__ = "0.1.0"

__all__ = ["ProtocolConfig", "SchemeId", "__version__"]
