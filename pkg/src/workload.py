"""Synthetic memcached traffic: frame codec, user-space store, trace files.

Frames are ``[eth 14][ipv4 20][udp 8][memcached udp 8][payload]`` with every
multi-byte header field little-endian. Trace files are a flat sequence of
``u32 little-endian length + frame`` records.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from src.config import (
    BMC_MAX_KEY_LEN,
    ETH_HLEN,
    ETH_P_IP,
    IPPROTO_UDP,
    IPV4_HLEN,
    MEMCACHED_PORT,
    MEMCACHED_UDP_HLEN,
    PAYLOAD_OFFSET,
    UDP_HLEN,
)


logger: logging.Logger = logging.getLogger(__name__)

CLIENT_MAC: bytes = bytes.fromhex("020000000001")
SERVER_MAC: bytes = bytes.fromhex("020000000002")
CLIENT_IP: int = 0x0A000001
SERVER_IP: int = 0x0A000002
CLIENT_PORT: int = 40000

LENGTH_PREFIX_BYTES: int = 4


def _u16(value: int) -> bytes:
    return value.to_bytes(2, "little")


def _u32(value: int) -> bytes:
    return value.to_bytes(4, "little")


def build_frame(
    payload: bytes,
    request_id: int = 0,
    src_mac: bytes = CLIENT_MAC,
    dst_mac: bytes = SERVER_MAC,
    src_ip: int = CLIENT_IP,
    dst_ip: int = SERVER_IP,
    src_port: int = CLIENT_PORT,
    dst_port: int = MEMCACHED_PORT,
    seq: int = 0,
    count: int = 1,
) -> bytes:
    """Assemble one memcached-over-UDP frame."""
    udp_length: int = UDP_HLEN + MEMCACHED_UDP_HLEN + len(payload)
    eth: bytes = dst_mac + src_mac + _u16(ETH_P_IP)
    ip: bytes = (
        bytes([0x45, 0])
        + _u16(IPV4_HLEN + udp_length)
        + _u16(request_id & 0xFFFF)
        + _u16(0)
        + bytes([64, IPPROTO_UDP])
        + _u16(0)
        + _u32(src_ip)
        + _u32(dst_ip)
    )
    udp: bytes = _u16(src_port) + _u16(dst_port) + _u16(udp_length) + _u16(0)
    memcached: bytes = _u16(request_id & 0xFFFF) + _u16(seq) + _u16(count) + _u16(0)
    return eth + ip + udp + memcached + payload


@dataclass(frozen=True)
class FrameInfo:
    src_port: int
    dst_port: int
    request_id: int
    payload: bytes


def parse_frame(frame: bytes) -> Optional[FrameInfo]:
    """Decode a frame built by ``build_frame``; None if it is not memcached-over-UDP."""
    if len(frame) < PAYLOAD_OFFSET:
        return None
    if int.from_bytes(frame[12:14], "little") != ETH_P_IP or frame[ETH_HLEN + 9] != IPPROTO_UDP:
        return None
    udp_at: int = ETH_HLEN + IPV4_HLEN
    udp_length: int = int.from_bytes(frame[udp_at + 4:udp_at + 6], "little")
    payload_length: int = udp_length - UDP_HLEN - MEMCACHED_UDP_HLEN
    if payload_length < 0 or PAYLOAD_OFFSET + payload_length > len(frame):
        return None
    return FrameInfo(
        src_port=int.from_bytes(frame[udp_at:udp_at + 2], "little"),
        dst_port=int.from_bytes(frame[udp_at + 2:udp_at + 4], "little"),
        request_id=int.from_bytes(frame[udp_at + 8:udp_at + 10], "little"),
        payload=frame[PAYLOAD_OFFSET:PAYLOAD_OFFSET + payload_length],
    )


def encode_value_reply(key: bytes, flags: int, value: bytes) -> bytes:
    """``VALUE <key> <flags> <bytes>\\r\\n<data>\\r\\nEND\\r\\n``"""
    return b"VALUE %s %d %d\r\n%s\r\nEND\r\n" % (key, flags, len(value), value)


def get_payload(key: bytes) -> bytes:
    return b"get " + key + b"\r\n"


def set_payload(key: bytes, value: bytes, flags: int = 0, exptime: int = 0) -> bytes:
    return b"set %s %d %d %d\r\n%s\r\n" % (key, flags, exptime, len(value), value)


def build_get(key: bytes, request_id: int = 0) -> bytes:
    return build_frame(get_payload(key), request_id)


def build_set(key: bytes, value: bytes, request_id: int = 0, flags: int = 0) -> bytes:
    return build_frame(set_payload(key, value, flags), request_id)


def build_server_reply(payload: bytes, request_id: int = 0) -> bytes:
    """Frame from the server back to the client (egress direction)."""
    return build_frame(
        payload,
        request_id,
        src_mac=SERVER_MAC,
        dst_mac=CLIENT_MAC,
        src_ip=SERVER_IP,
        dst_ip=CLIENT_IP,
        src_port=MEMCACHED_PORT,
        dst_port=CLIENT_PORT,
    )


class MemcachedStore:
    """User-space memcached stand-in: the authoritative key-value store."""

    def __init__(self) -> None:
        self.items: Dict[bytes, Tuple[int, bytes]] = {}
        self.gets: int = 0
        self.sets: int = 0

    def get(self, key: bytes) -> bytes:
        self.gets += 1
        item: Optional[Tuple[int, bytes]] = self.items.get(key)
        if item is None:
            return b"END\r\n"
        flags, value = item
        return encode_value_reply(key, flags, value)

    def set(self, key: bytes, value: bytes, flags: int = 0) -> bytes:
        self.sets += 1
        self.items[key] = (flags, value)
        return b"STORED\r\n"

    def handle(self, payload: bytes) -> bytes:
        """Answer one text-protocol request."""
        line, _, rest = payload.partition(b"\r\n")
        parts: List[bytes] = line.split(b" ")
        command: bytes = parts[0]
        if command == b"get" and len(parts) == 2:
            return self.get(parts[1])
        if command == b"set" and len(parts) == 5:
            try:
                flags, size = int(parts[2]), int(parts[4])
            except ValueError:
                return b"CLIENT_ERROR bad command line format\r\n"
            if len(rest) < size + 2 or rest[size:size + 2] != b"\r\n":
                return b"CLIENT_ERROR bad data chunk\r\n"
            return self.set(parts[1], rest[:size], flags)
        return b"ERROR\r\n"


# Workload generation


@dataclass(frozen=True)
class Request:
    op: str
    key: bytes
    value: bytes
    request_id: int

    def frame(self) -> bytes:
        if self.op == "get":
            return build_get(self.key, self.request_id)
        return build_set(self.key, self.value, self.request_id)


def make_key(index: int, width: int = 8) -> bytes:
    return b"key-%0*d" % (width, index)


def max_length_key(index: int) -> bytes:
    """A key of exactly the maximum memcached key length."""
    key: bytes = make_key(index)
    return key + b"x" * (BMC_MAX_KEY_LEN - len(key))


def make_value(rng: np.random.Generator, size: int) -> bytes:
    letters: np.ndarray = rng.integers(ord("a"), ord("z") + 1, size=size, dtype=np.uint8)
    return letters.tobytes()


def generate_requests(
    keys: int,
    get_ratio: float,
    seed: int,
    count: int,
    value_size: int = 32,
    max_key_set_fraction: float = 0.0,
) -> List[Request]:
    """
    Random GET/SET mix over a fixed key population.

    Args:
        keys: Number of distinct keys
        get_ratio: Probability that a request is a GET
        seed: numpy Generator seed
        count: Number of requests
        value_size: SET value size in bytes
        max_key_set_fraction: Share of SETs that use a maximum-length key

    Returns:
        Requests in trace order

    Raises:
        ValueError: If ratios or sizes are out of range
    """
    if keys < 1 or count < 0 or value_size < 0:
        raise ValueError("keys must be positive, count and value_size non-negative")
    if not 0.0 <= get_ratio <= 1.0 or not 0.0 <= max_key_set_fraction <= 1.0:
        raise ValueError("ratios must lie in [0, 1]")
    rng: np.random.Generator = np.random.default_rng(seed)
    is_get: np.ndarray = rng.random(count) < get_ratio
    key_ids: np.ndarray = rng.integers(0, keys, size=count)
    long_key: np.ndarray = rng.random(count) < max_key_set_fraction
    requests: List[Request] = []
    for i in range(count):
        if is_get[i]:
            requests.append(Request("get", make_key(int(key_ids[i])), b"", i & 0xFFFF))
            continue
        key: bytes = max_length_key(int(key_ids[i])) if long_key[i] else make_key(int(key_ids[i]))
        requests.append(Request("set", key, make_value(rng, value_size), i & 0xFFFF))
    return requests


def prefill_requests(keys: int, seed: int, value_size: int = 32) -> List[Request]:
    """One SET per key, used to warm the store before a run."""
    rng: np.random.Generator = np.random.default_rng(seed)
    return [Request("set", make_key(k), make_value(rng, value_size), k & 0xFFFF) for k in range(keys)]


def write_trace(path: Path, frames: List[bytes]) -> Path:
    """Write length-prefixed frames."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        for frame in frames:
            f.write(len(frame).to_bytes(LENGTH_PREFIX_BYTES, "little"))
            f.write(frame)
    logger.info(f"Wrote {len(frames)} frames to {path}")
    return path


def iter_trace(path: Path) -> Iterator[bytes]:
    """
    Yield frames from a trace file.

    Raises:
        FileNotFoundError: If the trace does not exist
        ValueError: If the file ends inside a record
    """
    data: bytes = Path(path).read_bytes()
    offset: int = 0
    while offset < len(data):
        if offset + LENGTH_PREFIX_BYTES > len(data):
            raise ValueError(f"{path}: truncated length prefix at byte {offset}")
        length: int = int.from_bytes(data[offset:offset + LENGTH_PREFIX_BYTES], "little")
        offset += LENGTH_PREFIX_BYTES
        if offset + length > len(data):
            raise ValueError(f"{path}: truncated frame at byte {offset}")
        yield data[offset:offset + length]
        offset += length


def read_trace(path: Path) -> List[bytes]:
    return list(iter_trace(path))
