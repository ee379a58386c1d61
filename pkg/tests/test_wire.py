import struct

import numpy as np
import pytest

from oracles import random_message
from splitvfl.protocol import wire
from splitvfl.protocol.wire import (
    BatchForward,
    BatchGradient,
    DecodeError,
    EvalForward,
    Hello,
    Shutdown,
    decode_frame,
    decode_tensor,
    encode_frame,
    encode_tensor,
)

GOLDEN = bytes.fromhex("01 01 00000002 3F800000 40000000")


def test_tensor_golden_bytes():
    assert encode_tensor(np.array([1.0, 2.0], dtype=np.float32)) == GOLDEN
    np.testing.assert_array_equal(decode_tensor(GOLDEN), [1.0, 2.0])


def test_tensor_frame_layout():
    frame = encode_frame(BatchForward(3, 7, np.array([1.0, 2.0], dtype=np.float32)))
    length, msg_type = struct.unpack(">IB", frame[:5])
    assert msg_type == 0x10
    assert length == len(frame) - 5 == 8 + len(GOLDEN)
    assert frame[5:13] == bytes.fromhex("00000003 00000007")
    assert frame[13:] == GOLDEN


def test_shutdown_round_trip():
    frame = encode_frame(Shutdown(0))
    assert frame == bytes.fromhex("00000001 7E 00")
    assert decode_frame(frame) == Shutdown(0)


def test_message_type_assignments():
    assert {t: cls.__name__ for t, cls in wire.MESSAGE_TYPES.items()} == {
        0x01: "Hello", 0x02: "AlignRequest", 0x03: "AlignResponse", 0x10: "BatchForward",
        0x11: "BatchGradient", 0x12: "EvalForward", 0x20: "EpochMetrics", 0x7E: "Shutdown",
        0x7F: "ProtocolErrorMsg",
    }


def test_ten_thousand_random_round_trips():
    rng = np.random.default_rng(2024)
    seen = {}
    for _ in range(10_000):
        msg = random_message(rng)
        frame = encode_frame(msg)
        back = decode_frame(frame)
        assert back == msg
        # canonical: re-encoding the decoded message gives the same bytes
        assert encode_frame(back) == frame
        seen.setdefault(frame, msg)
    # injective on what we generated: equal frames only for equal messages
    for frame, msg in seen.items():
        assert decode_frame(frame) == msg


def test_tensor_equality_is_bitwise():
    a = BatchForward(0, 0, np.array([np.nan], dtype=np.float32))
    assert a == BatchForward(0, 0, np.array([np.nan], dtype=np.float32))
    assert BatchForward(0, 0, np.array([0.0], np.float32)) != BatchForward(0, 0, np.array([-0.0], np.float32))


def test_decode_unknown_type():
    with pytest.raises(DecodeError) as err:
        decode_frame(bytes.fromhex("00000000 55"))
    assert err.value.offset == 4


def test_decode_truncated_payload():
    frame = encode_frame(BatchGradient(1, 2, np.ones((2, 3), np.float32)))
    with pytest.raises(DecodeError, match="truncated"):
        decode_frame(frame[:-3])


def test_decode_inconsistent_tensor_reports_offset():
    frame = bytearray(encode_frame(EvalForward(0, 0, np.ones(4, np.float32))))
    # lie about the tensor dimension inside an otherwise well-framed payload
    frame[5 + 8 + 2:5 + 8 + 6] = struct.pack(">I", 5)
    with pytest.raises(DecodeError) as err:
        decode_frame(bytes(frame))
    assert err.value.offset > 5


def test_decode_length_overflow():
    with pytest.raises(DecodeError, match="exceeds"):
        decode_frame(struct.pack(">IB", wire.MAX_PAYLOAD + 1, 0x7E))


def test_decode_trailing_bytes():
    with pytest.raises(DecodeError):
        decode_frame(encode_frame(Shutdown(0)) + b"\x00")
    with pytest.raises(DecodeError):
        decode_frame(struct.pack(">IB", 2, 0x7E) + b"\x00\x00")


def test_bad_dtype_tag():
    with pytest.raises(DecodeError, match="dtype"):
        decode_tensor(b"\x02\x01\x00\x00\x00\x01\x00\x00\x00\x00")


def test_hello_validation():
    with pytest.raises(ValueError):
        encode_frame(Hello(1, "observer", bytes(32)))
    with pytest.raises(ValueError):
        encode_frame(Hello(1, "guest", bytes(31)))


def test_no_message_field_can_carry_labels_or_features():
    """The vocabulary itself: only ids, digests, embeddings/gradients, and scalars."""
    import dataclasses
    allowed = {"protocol_version", "role", "config_digest", "digests", "ids", "order_seed", "epoch", "batch",
               "tensor", "train_loss", "val_loss", "val_accuracy", "reason", "code", "message"}
    for cls in wire.MESSAGE_TYPES.values():
        assert {f.name for f in dataclasses.fields(cls)} <= allowed
