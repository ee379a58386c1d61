"""Wire format, transports, and the two-party session state machines."""

from splitvfl.protocol.session import (
    HandshakeError,
    ProtocolError,
    Session,
    align_guest,
    align_host,
    handshake,
    run_guest,
    run_host,
)
from splitvfl.protocol.transport import (
    CapturingTransport,
    LoopbackTransport,
    TcpTransport,
    Transport,
    TransportError,
    loopback_pair,
    loopback_transport,
    tcp_transport,
)
from splitvfl.protocol.wire import DecodeError, decode_frame, encode_frame

__all__ = [
    "CapturingTransport", "DecodeError", "HandshakeError", "LoopbackTransport", "ProtocolError",
    "Session", "TcpTransport", "Transport", "TransportError", "align_guest", "align_host",
    "decode_frame", "encode_frame", "handshake", "loopback_pair", "loopback_transport",
    "run_guest", "run_host", "tcp_transport",
]
