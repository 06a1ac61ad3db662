import numpy as np
import pytest

from fedretina.errors import DecodeError
from fedretina.protocol import (
    HEADER_SIZE,
    Ack,
    ClientUpdate,
    GlobalModel,
    Hello,
    MsgType,
    Shutdown,
    decode,
    decode_header,
    encode,
)
from fedretina.tensor_utils import ParameterSet


def params():
    return ParameterSet([
        ("00.dense.weight", np.arange(6, dtype=np.float32).reshape(3, 2)),
        ("00.dense.bias", np.array([0.5, -1.25])),
    ])


MESSAGES = [
    Hello("H1", 1500),
    Hello("Hôpital-7", 3),
    GlobalModel(4, params()),
    GlobalModel(4, ParameterSet([])),
    ClientUpdate(4, "H2", 1200, params(), 0.8125),
    Ack(4),
    Shutdown("federation complete"),
    Shutdown(""),
]


@pytest.mark.parametrize("message", MESSAGES, ids=lambda m: type(m).__name__)
def test_round_trip(message):
    assert decode(encode(message)) == message


def test_ack_bytes():
    assert encode(Ack(3)).hex(" ").upper() == "46 44 52 4C 01 88 04 00 00 00 03 00 00 00"


def test_hello_bytes():
    frame = encode(Hello("H1", 1500))
    assert frame[:HEADER_SIZE].hex(" ").upper() == "46 44 52 4C 01 11 0A 00 00 00"
    assert frame[HEADER_SIZE:].hex(" ").upper() == "02 00 00 00 48 31 DC 05 00 00"


def test_empty_shutdown_is_fourteen_bytes():
    frame = encode(Shutdown(""))
    assert len(frame) == 14
    assert frame[5] == MsgType.SHUTDOWN


def test_type_codes_differ_in_at_least_two_bits():
    codes = [int(kind) for kind in MsgType]
    for i, a in enumerate(codes):
        for b in codes[i + 1:]:
            assert bin(a ^ b).count("1") >= 2


@pytest.mark.parametrize("message", MESSAGES, ids=lambda m: type(m).__name__)
def test_corrupted_header_bytes_are_rejected(message):
    frame = encode(message)
    for position in range(HEADER_SIZE):
        for mask in range(1, 256):
            corrupted = bytearray(frame)
            corrupted[position] ^= mask
            with pytest.raises(DecodeError):
                decode(bytes(corrupted))


def retyped(message, kind):
    frame = bytearray(encode(message))
    frame[5] = kind
    return bytes(frame)


def test_payload_read_as_another_type_is_rejected():
    with pytest.raises(DecodeError, match="control characters"):
        decode(retyped(GlobalModel(4, ParameterSet([])), MsgType.SHUTDOWN))
    with pytest.raises(DecodeError, match="round 0") as info:
        decode(retyped(Shutdown(""), MsgType.ACK))
    assert info.value.offset == HEADER_SIZE


@pytest.mark.parametrize("message", [
    Ack(0),
    GlobalModel(0, ParameterSet([])),
    ClientUpdate(1, "", 3, ParameterSet([]), 0.5),
    ClientUpdate(1, "H1", 0, ParameterSet([]), 0.5),
    Hello("H1", 0),
    Hello("H\x001", 4),
    Shutdown("bye\n"),
], ids=repr)
def test_invalid_fields_are_rejected(message):
    with pytest.raises(DecodeError):
        decode(encode(message))


def test_every_truncation_is_rejected():
    frame = encode(ClientUpdate(1, "H3", 400, params(), 1.5))
    for cut in range(len(frame)):
        with pytest.raises(DecodeError):
            decode(frame[:cut])


def test_trailing_payload_bytes():
    frame = bytearray(encode(Ack(1)) + b"\x00")
    frame[6] += 1
    with pytest.raises(DecodeError, match="trailing"):
        decode(bytes(frame))


def test_payload_limit():
    frame = encode(GlobalModel(1, params()))
    kind, length = decode_header(frame[:HEADER_SIZE])
    assert kind == MsgType.GLOBAL_MODEL and length == len(frame) - HEADER_SIZE
    with pytest.raises(DecodeError, match="limit") as info:
        decode_header(frame[:HEADER_SIZE], max_payload=length - 1)
    assert info.value.offset == 6


def test_invalid_utf8_client_id():
    frame = bytearray(encode(Hello("ab", 1)))
    frame[HEADER_SIZE + 4] = 0xFF
    with pytest.raises(DecodeError, match="UTF-8"):
        decode(bytes(frame))


def test_header_errors_carry_offsets():
    frame = bytearray(encode(Ack(1)))
    frame[5] = 0x33
    with pytest.raises(DecodeError) as info:
        decode(bytes(frame))
    assert info.value.offset == 5
    assert "0x33" in str(info.value)


ALPHABET = list("abcdefghXYZ0123456789-_. éüß日本")


def random_text(rng, min_length=1):
    return "".join(rng.choice(ALPHABET, size=int(rng.integers(min_length, 12))))


def random_params(rng):
    entries = []
    for i in range(int(rng.integers(0, 4))):
        dtype = np.float32 if rng.random() < 0.5 else np.float64
        shape = tuple(int(d) for d in rng.integers(1, 4, size=int(rng.integers(0, 4))))
        entries.append((f"{i:02d}.{random_text(rng)}", np.asarray(rng.normal(size=shape)).astype(dtype)))
    return ParameterSet(entries)


def random_message(rng):
    kind = int(rng.integers(0, 5))
    t = int(rng.integers(1, 2 ** 32))
    if kind == 0:
        return Hello(random_text(rng), int(rng.integers(1, 2 ** 32)))
    if kind == 1:
        return GlobalModel(t, random_params(rng))
    if kind == 2:
        return ClientUpdate(t, random_text(rng), int(rng.integers(1, 2 ** 32)), random_params(rng),
                            float(rng.normal()))
    if kind == 3:
        return Ack(t)
    return Shutdown(random_text(rng, min_length=0))


def test_random_messages_round_trip():
    rng = np.random.default_rng(2024)
    for _ in range(10_000):
        message = random_message(rng)
        assert decode(encode(message)) == message
