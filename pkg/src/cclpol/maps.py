"""Typed shared key/value maps.

Two kinds exist. ARRAY maps are dense and pre-zeroed with 32-bit index keys;
HASH maps are sparse with fixed-size byte keys. Values are fixed-size byte
blocks. Each entry has its own lock, so readers never observe a value that
mixes bytes from two ``update`` calls.

Programs running in the VM get a reference to the live entry and may mutate
it in place; those writes are atomic per aligned word only.
"""
from __future__ import annotations

import struct
import threading

from .isa import MapDescriptor, MapKind, Program

# update() flags, kernel numbering
ANY = 0
NOEXIST = 1
EXIST = 2

# negative return codes surfaced to programs by helpers
ENOENT = 2
E2BIG = 7
EEXIST = 17
EINVAL = 22


class MapError(Exception):
    errno = EINVAL


class MapFull(MapError):
    """E_FULL: hash map already holds max_entries keys."""
    errno = E2BIG


class MapIndexError(MapError):
    """E_OOB: array index outside [0, max_entries)."""
    errno = E2BIG


class MapKeyExists(MapError):
    errno = EEXIST


class MapKeyMissing(MapError):
    errno = ENOENT


class UnsupportedOperation(MapError):
    errno = EINVAL


class MapConflictError(MapError):
    """Same map name declared with a different descriptor."""


class MapInstance:
    def __init__(self, descriptor: MapDescriptor):
        self.descriptor = descriptor
        self.key_size = descriptor.key_size
        self.value_size = descriptor.value_size
        self.max_entries = descriptor.max_entries

    @property
    def name(self) -> str:
        return self.descriptor.name

    def _check_key(self, key: bytes):
        if len(key) != self.key_size:
            raise ValueError(f"map {self.name}: key must be {self.key_size} bytes, got {len(key)}")

    def _check_value(self, value: bytes):
        if len(value) != self.value_size:
            raise ValueError(
                f"map {self.name}: value must be {self.value_size} bytes, got {len(value)}")

    def lookup(self, key: bytes) -> bytes | None:
        raise NotImplementedError

    def lookup_ref(self, key: bytes) -> bytearray | None:
        raise NotImplementedError

    def update(self, key: bytes, value: bytes, flags: int = ANY) -> None:
        raise NotImplementedError

    # Accessors for verified code: key and value are read straight from a
    # buffer (the VM stack) at fixed offsets, with no argument checks.

    def buffer_ref(self):
        """``(buf, key_off) -> live value or None``."""
        ref, ks = self.lookup_ref, self.key_size
        return lambda buf, ko: ref(bytes(buf[ko:ko + ks]))

    def buffer_updater(self):
        """``(buf, key_off, val_off, flags) -> 0 or -errno``."""
        ks, vs = self.key_size, self.value_size

        def upd(buf, ko, vo, flags):
            if flags > EXIST:
                return -EINVAL
            try:
                self.update(bytes(buf[ko:ko + ks]), bytes(buf[vo:vo + vs]), flags)
            except MapError as exc:
                return -exc.errno
            return 0
        return upd

    def delete(self, key: bytes) -> bool:
        raise NotImplementedError

    def items(self) -> list[tuple[bytes, bytes]]:
        raise NotImplementedError

    def __len__(self):
        return len(self.items())

    def dump(self) -> list[str]:
        """``key_hex value_hex`` lines, sorted by key."""
        return [f"{k.hex()} {v.hex()}" for k, v in sorted(self.items())]


class ArrayMap(MapInstance):
    def __init__(self, descriptor: MapDescriptor):
        super().__init__(descriptor)
        self._values = [bytearray(self.value_size) for _ in range(self.max_entries)]
        self._locks = [threading.Lock() for _ in range(self.max_entries)]

    def _index(self, key: bytes) -> int:
        self._check_key(key)
        return struct.unpack("<I", key)[0]

    def lookup(self, key):
        i = self._index(key)
        if i >= self.max_entries:
            return None
        with self._locks[i]:
            return bytes(self._values[i])

    def lookup_ref(self, key):
        i = struct.unpack("<I", key)[0]
        if i >= self.max_entries:
            return None
        return self._values[i]

    def buffer_ref(self):
        values, n, unpack = self._values, self.max_entries, struct.Struct("<I").unpack_from

        def ref(buf, ko):
            i = unpack(buf, ko)[0]
            return values[i] if i < n else None
        return ref

    def buffer_updater(self):
        values, locks, n, vs = self._values, self._locks, self.max_entries, self.value_size
        unpack = struct.Struct("<I").unpack_from

        def upd(buf, ko, vo, flags):
            if flags > EXIST:
                return -EINVAL
            i = unpack(buf, ko)[0]
            if i >= n:
                return -E2BIG
            if flags == NOEXIST:
                return -EEXIST
            with locks[i]:
                values[i][:] = buf[vo:vo + vs]
            return 0
        return upd

    def update(self, key, value, flags=ANY):
        i = self._index(key)
        self._check_value(value)
        if i >= self.max_entries:
            raise MapIndexError(f"map {self.name}: index {i} >= max_entries {self.max_entries}")
        if flags == NOEXIST:
            raise MapKeyExists(f"map {self.name}: array entries always exist")
        with self._locks[i]:
            self._values[i][:] = value

    def delete(self, key):
        raise UnsupportedOperation(f"map {self.name}: delete is not supported on array maps")

    def items(self):
        out = []
        for i, v in enumerate(self._values):
            with self._locks[i]:
                out.append((struct.pack("<I", i), bytes(v)))
        return out

    def __len__(self):
        return self.max_entries


class HashMap(MapInstance):
    def __init__(self, descriptor: MapDescriptor):
        super().__init__(descriptor)
        # key -> (value, lock); the pair is inserted and removed as a unit
        self._entries: dict[bytes, tuple[bytearray, threading.Lock]] = {}
        self._structure = threading.Lock()

    def lookup(self, key):
        self._check_key(key)
        pair = self._entries.get(bytes(key))
        if pair is None:
            return None
        with pair[1]:
            return bytes(pair[0])

    def lookup_ref(self, key):
        pair = self._entries.get(key)
        return None if pair is None else pair[0]

    def buffer_ref(self):
        get, ks = self._entries.get, self.key_size

        def ref(buf, ko):
            pair = get(bytes(buf[ko:ko + ks]))
            return None if pair is None else pair[0]
        return ref

    def update(self, key, value, flags=ANY):
        self._check_key(key)
        self._check_value(value)
        self._update(bytes(key), value, flags)

    def _update(self, key: bytes, value, flags: int) -> None:
        pair = self._entries.get(key)
        if pair is not None:
            if flags == NOEXIST:
                raise MapKeyExists(f"map {self.name}: key {key.hex()} exists")
            with pair[1]:
                pair[0][:] = value
            return
        if flags == EXIST:
            raise MapKeyMissing(f"map {self.name}: key {key.hex()} not present")
        with self._structure:
            pair = self._entries.get(key)
            if pair is not None:
                with pair[1]:
                    pair[0][:] = value
                return
            if len(self._entries) >= self.max_entries:
                raise MapFull(f"map {self.name}: full ({self.max_entries} entries)")
            self._entries[key] = (bytearray(value), threading.Lock())

    def buffer_updater(self):
        get, slow, ks, vs = self._entries.get, self._update, self.key_size, self.value_size

        def upd(buf, ko, vo, flags):
            key = bytes(buf[ko:ko + ks])
            pair = get(key)
            if pair is not None and flags != NOEXIST and flags <= EXIST:
                with pair[1]:
                    pair[0][:] = buf[vo:vo + vs]
                return 0
            if flags > EXIST:
                return -EINVAL
            try:
                slow(key, buf[vo:vo + vs], flags)
            except MapError as exc:
                return -exc.errno
            return 0
        return upd

    def delete(self, key):
        self._check_key(key)
        with self._structure:
            return self._entries.pop(bytes(key), None) is not None

    def items(self):
        with self._structure:
            pairs = list(self._entries.items())
        out = []
        for k, (v, lock) in pairs:
            with lock:
                out.append((k, bytes(v)))
        return out

    def __len__(self):
        return len(self._entries)


def create(descriptor: MapDescriptor) -> MapInstance:
    if descriptor.kind is MapKind.ARRAY:
        return ArrayMap(descriptor)
    return HashMap(descriptor)


def lookup(m: MapInstance, key: bytes) -> bytes | None:
    return m.lookup(key)


def update(m: MapInstance, key: bytes, value: bytes, flags: int = ANY) -> None:
    m.update(key, value, flags)


def delete(m: MapInstance, key: bytes) -> bool:
    return m.delete(key)


class MapRegistry:
    """Name -> MapInstance table owned by one engine.

    Programs declaring the same name with an identical descriptor share one
    instance; a differing descriptor under an existing name is an error.
    """

    def __init__(self):
        self._maps: dict[str, MapInstance] = {}
        self._lock = threading.Lock()

    def __contains__(self, name):
        return name in self._maps

    def __getitem__(self, name) -> MapInstance:
        return self._maps[name]

    def __iter__(self):
        return iter(sorted(self._maps))

    def get_or_create(self, descriptor: MapDescriptor) -> MapInstance:
        with self._lock:
            existing = self._maps.get(descriptor.name)
            if existing is not None:
                if existing.descriptor != descriptor:
                    raise MapConflictError(
                        f"map {descriptor.name!r} already exists as {existing.descriptor}, "
                        f"program declares {descriptor}")
                return existing
            inst = create(descriptor)
            self._maps[descriptor.name] = inst
            return inst

    def check(self, program: Program) -> None:
        """Raise MapConflictError if ``program`` would clash with existing maps."""
        for d in program.maps:
            existing = self._maps.get(d.name)
            if existing is not None and existing.descriptor != d:
                raise MapConflictError(
                    f"map {d.name!r} already exists as {existing.descriptor}, "
                    f"program declares {d}")

    def resolve(self, program: Program) -> list[MapInstance]:
        self.check(program)
        return [self.get_or_create(d) for d in program.maps]

    def dump(self) -> list[str]:
        lines = []
        for name in self:
            for row in self._maps[name].dump():
                lines.append(f"{name} {row}")
        return lines
