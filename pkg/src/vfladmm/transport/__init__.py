"""Coordinator/party protocol over an in-memory bus or TCP."""
from .links import (DEFAULT_TIMEOUT, LocalBus, RecordingLink, TcpCoordinatorLink, TcpPartyLink,
                    TransportError, TransportTimeout, parse_address)
from .protocol import (CoordinatorLog, DistributedResult, PartyLog, assemble_trace, coordinator_serve,
                       party_serve, simulate)
from .wire import IncompleteFrame, Kind, Message, ProtocolError, decode, decode_prefix, encode

__all__ = [
    "DEFAULT_TIMEOUT", "CoordinatorLog", "DistributedResult", "IncompleteFrame", "Kind", "LocalBus",
    "Message", "PartyLog", "ProtocolError", "RecordingLink", "TcpCoordinatorLink", "TcpPartyLink",
    "TransportError", "TransportTimeout", "assemble_trace", "coordinator_serve", "decode",
    "decode_prefix", "encode", "parse_address", "party_serve", "simulate",
]
