import pytest

from src.config import MEMCACHED_PORT, PAYLOAD_OFFSET
from src.workload import (
    CLIENT_PORT,
    MemcachedStore,
    build_get,
    build_server_reply,
    build_set,
    generate_requests,
    get_payload,
    iter_trace,
    make_key,
    max_length_key,
    parse_frame,
    prefill_requests,
    read_trace,
    set_payload,
    write_trace,
)


def test_frame_layout():
    frame = build_get(b"key-1", request_id=0x1234)
    assert len(frame) == PAYLOAD_OFFSET + len(b"get key-1\r\n")
    info = parse_frame(frame)
    assert info.src_port == CLIENT_PORT
    assert info.dst_port == MEMCACHED_PORT
    assert info.request_id == 0x1234
    assert info.payload == b"get key-1\r\n"


def test_server_reply_goes_the_other_way():
    info = parse_frame(build_server_reply(b"END\r\n", 9))
    assert (info.src_port, info.dst_port, info.request_id) == (MEMCACHED_PORT, CLIENT_PORT, 9)


def test_parse_rejects_short_and_non_udp_frames():
    frame = bytearray(build_get(b"k"))
    assert parse_frame(bytes(frame[:40])) is None
    frame[23] = 6
    assert parse_frame(bytes(frame)) is None


def test_store_text_protocol():
    store = MemcachedStore()
    assert store.handle(get_payload(b"a")) == b"END\r\n"
    assert store.handle(set_payload(b"a", b"xyz", flags=7)) == b"STORED\r\n"
    assert store.handle(get_payload(b"a")) == b"VALUE a 7 3\r\nxyz\r\nEND\r\n"
    assert store.handle(b"set a 0 0 10\r\nshort\r\n") == b"CLIENT_ERROR bad data chunk\r\n"
    assert store.handle(b"set a x 0 1\r\nz\r\n") == b"CLIENT_ERROR bad command line format\r\n"
    assert store.handle(b"delete a\r\n") == b"ERROR\r\n"
    assert (store.gets, store.sets) == (2, 1)


def test_keys():
    assert make_key(42) == b"key-00000042"
    assert len(max_length_key(3)) == 250
    assert max_length_key(3).startswith(make_key(3))


def test_generated_requests_are_seeded():
    first = generate_requests(keys=10, get_ratio=0.7, seed=5, count=500, max_key_set_fraction=0.5)
    assert first == generate_requests(keys=10, get_ratio=0.7, seed=5, count=500, max_key_set_fraction=0.5)
    gets = [r for r in first if r.op == "get"]
    sets = [r for r in first if r.op == "set"]
    assert 0.6 < len(gets) / len(first) < 0.8
    assert all(len(r.value) == 32 for r in sets)
    assert any(len(r.key) == 250 for r in sets)
    assert all(len(r.key) == 12 for r in gets)
    assert parse_frame(sets[0].frame()).payload == set_payload(sets[0].key, sets[0].value)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"keys": 0},
        {"get_ratio": 1.5},
        {"count": -1},
        {"max_key_set_fraction": -0.1},
        {"value_size": -1},
    ],
)
def test_generate_requests_validation(kwargs):
    params = {"keys": 4, "get_ratio": 0.5, "seed": 0, "count": 10}
    params.update(kwargs)
    with pytest.raises(ValueError):
        generate_requests(**params)


def test_prefill_sets_every_key_once():
    requests = prefill_requests(keys=5, seed=1)
    assert [r.key for r in requests] == [make_key(k) for k in range(5)]
    assert {r.op for r in requests} == {"set"}


def test_trace_file(tmp_path):
    frames = [build_get(b"a"), build_set(b"b", b"value"), b""]
    path = write_trace(tmp_path / "out" / "trace.bin", frames)
    assert read_trace(path) == frames


@pytest.mark.parametrize("damage", ["partial-prefix", "partial-frame"])
def test_truncated_trace_is_an_error(tmp_path, damage):
    path = write_trace(tmp_path / "trace.bin", [build_get(b"a"), build_get(b"b")])
    data = path.read_bytes()
    path.write_bytes(data + b"\x01\x00" if damage == "partial-prefix" else data[:-10])
    with pytest.raises(ValueError):
        list(iter_trace(path))


def test_missing_trace(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_trace(tmp_path / "none.bin")
