"""Five-party node runtime: transport, sessions, orchestration, signing service."""

from .transport import (
    FRAME_OVERHEAD,
    PHASE_TAGS,
    InProcessHub,
    SessionMessage,
    TcpNodeTransport,
    TransportError,
    decode_frame,
    encode_frame,
)
from .session import PartySession, SessionAbort, run_round
from .node import (
    ConsentPolicy,
    CrashError,
    CrashPoint,
    InterventionTicket,
    LocalCluster,
    PartyNode,
    SignOutcome,
    SignRequest,
    verify_audit_completeness,
)

__all__ = [
    "FRAME_OVERHEAD",
    "PHASE_TAGS",
    "InProcessHub",
    "SessionMessage",
    "TcpNodeTransport",
    "TransportError",
    "decode_frame",
    "encode_frame",
    "PartySession",
    "SessionAbort",
    "run_round",
    "ConsentPolicy",
    "CrashError",
    "CrashPoint",
    "InterventionTicket",
    "LocalCluster",
    "PartyNode",
    "SignOutcome",
    "SignRequest",
    "verify_audit_completeness",
]
