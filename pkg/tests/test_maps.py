import struct
import threading

import pytest
from hypothesis import given, settings, strategies as st

from cclpol import maps
from cclpol.isa import Hook, MapDescriptor, MapKind, Program, Instruction, Op
from cclpol.maps import (ANY, E2BIG, EEXIST, EINVAL, ENOENT, EXIST, NOEXIST, MapConflictError,
                         MapFull, MapIndexError, MapKeyExists, MapKeyMissing, MapRegistry,
                         UnsupportedOperation, create)


def key(i: int) -> bytes:
    return struct.pack("<I", i)


def arr(entries=8, value=16):
    return create(MapDescriptor("a", MapKind.ARRAY, 4, value, entries))


def hsh(entries=64, value=16):
    return create(MapDescriptor("h", MapKind.HASH, 4, value, entries))


def test_array_zero_init():
    m = arr()
    assert len(m) == 8
    assert all(v == bytes(16) for _, v in m.items())
    assert maps.lookup(m, key(3)) == bytes(16)


def test_hash_starts_empty():
    m = hsh()
    assert len(m) == 0
    assert maps.lookup(m, key(1)) is None


def test_array_key_size_must_be_4():
    with pytest.raises(ValueError):
        MapDescriptor("a", MapKind.ARRAY, 8, 16, 8)


def test_hash_insert_then_lookup():
    m = hsh()
    maps.update(m, key(5), b"x" * 16)
    assert maps.lookup(m, key(5)) == b"x" * 16


def test_hash_full():
    m = hsh(entries=2)
    maps.update(m, key(1), bytes(16))
    maps.update(m, key(2), bytes(16))
    with pytest.raises(MapFull):
        maps.update(m, key(3), bytes(16))
    maps.update(m, key(2), b"\1" * 16)  # overwrite still works when full


def test_array_out_of_range():
    m = arr()
    with pytest.raises(MapIndexError):
        maps.update(m, key(8), bytes(16))
    assert maps.lookup(m, key(8)) is None


def test_update_flags():
    m = hsh()
    with pytest.raises(MapKeyMissing):
        m.update(key(1), bytes(16), EXIST)
    m.update(key(1), bytes(16), NOEXIST)
    with pytest.raises(MapKeyExists):
        m.update(key(1), bytes(16), NOEXIST)
    with pytest.raises(MapKeyExists):
        arr().update(key(0), bytes(16), NOEXIST)


def test_wrong_sizes():
    m = hsh()
    with pytest.raises(ValueError):
        m.update(key(1), bytes(15))
    with pytest.raises(ValueError):
        m.lookup(b"\0\0")


def test_delete_semantics():
    m = hsh()
    m.update(key(1), bytes(16))
    assert maps.delete(m, key(1)) is True
    assert maps.lookup(m, key(1)) is None
    assert maps.delete(m, key(1)) is False
    with pytest.raises(UnsupportedOperation):
        maps.delete(arr(), key(0))


def test_buffer_ref_is_live():
    for m in (arr(), hsh()):
        m.update(key(2), bytes(16))
        buf = bytearray(8) + key(2)
        ref = m.buffer_ref()(buf, 8)
        ref[0] = 7
        assert m.lookup(key(2))[0] == 7
        assert m.buffer_ref()(bytearray(key(9)), 0) is None


@pytest.mark.parametrize("kind", ["array", "hash"])
def test_buffer_updater_errnos(kind):
    m = arr() if kind == "array" else hsh(entries=2)
    upd = m.buffer_updater()
    buf = bytearray(key(1) + b"v" * 16)
    assert upd(buf, 0, 4, ANY) == 0
    assert m.lookup(key(1)) == b"v" * 16
    assert upd(buf, 0, 4, 3) == -EINVAL
    assert upd(buf, 0, 4, NOEXIST) == -EEXIST
    if kind == "array":
        assert upd(bytearray(key(8) + bytes(16)), 0, 4, ANY) == -E2BIG
    else:
        assert upd(bytearray(key(2) + bytes(16)), 0, 4, EXIST) == -ENOENT
        assert upd(bytearray(key(2) + bytes(16)), 0, 4, ANY) == 0
        assert upd(bytearray(key(3) + bytes(16)), 0, 4, ANY) == -E2BIG


def test_registry_shares_and_conflicts():
    d = MapDescriptor("m", MapKind.HASH, 4, 8, 4)
    reg = MapRegistry()
    a = reg.get_or_create(d)
    assert reg.get_or_create(d) is a
    with pytest.raises(MapConflictError):
        reg.get_or_create(MapDescriptor("m", MapKind.HASH, 4, 16, 4))
    p = Program("p", Hook.TUNER, (Instruction(Op.EXIT),), (d,))
    assert reg.resolve(p) == [a]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("uld"), st.integers(0, 5), st.binary(min_size=8,
                                                                              max_size=8))))
def test_hash_matches_dict(ops):
    m = create(MapDescriptor("h", MapKind.HASH, 4, 8, 4))
    model = {}
    for kind, k, v in ops:
        kb = key(k)
        if kind == "u":
            if kb not in model and len(model) >= 4:
                with pytest.raises(MapFull):
                    m.update(kb, v)
            else:
                m.update(kb, v)
                model[kb] = v
        elif kind == "d":
            assert m.delete(kb) == (model.pop(kb, None) is not None)
        assert m.lookup(kb) == model.get(kb)
    assert dict(m.items()) == model


@pytest.mark.parametrize("kind", ["array", "hash"])
def test_no_torn_reads(kind):
    m = arr(value=64) if kind == "array" else hsh(value=64)
    m.update(key(0), bytes(64))
    stop = threading.Event()
    torn = []

    def writer():
        b = 0
        while not stop.is_set():
            b = (b + 1) & 0xFF
            m.update(key(0), bytes([b]) * 64)

    def reader():
        for _ in range(20_000):
            v = m.lookup(key(0))
            if v.count(v[0]) != 64:
                torn.append(v)

    threads = [threading.Thread(target=writer)] + [threading.Thread(target=reader)
                                                   for _ in range(2)]
    for t in threads:
        t.start()
    for t in threads[1:]:
        t.join()
    stop.set()
    threads[0].join()
    assert not torn
