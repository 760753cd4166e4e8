"""Hook context records shared by the host, the verifier and the VM.

Enum encodings for collectives, algorithms and protocols are fixed here so
policy authors and the host agree on them.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from .isa import Hook

UNSET32 = 0xFFFFFFFF


class Collective(enum.IntEnum):
    ALLREDUCE = 0
    ALLGATHER = 1
    BROADCAST = 2
    REDUCESCATTER = 3


class Algorithm(enum.IntEnum):
    TREE = 0
    RING = 1
    NVLS = 2


class Protocol(enum.IntEnum):
    LL = 0
    LL128 = 1
    SIMPLE = 2


class Direction(enum.IntEnum):
    SEND = 0
    RECV = 1


@dataclass(frozen=True)
class Field:
    name: str
    offset: int
    width: int


@dataclass(frozen=True)
class ContextLayout:
    """Fixed-size hook input/output record.

    ``writable`` lists the half-open byte spans policies may store into;
    everything else is read-only.
    """
    hook_kind: str
    size: int
    fields: tuple[Field, ...]
    writable: tuple[tuple[int, int], ...] = ()

    def field(self, name: str) -> Field:
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(name)

    def is_writable(self, lo: int, hi: int) -> bool:
        """True if every byte of [lo, hi) lies inside one writable span."""
        return any(a <= lo and hi <= b for a, b in self.writable)

    def field_at(self, offset: int) -> str | None:
        for f in self.fields:
            if f.offset <= offset < f.offset + f.width:
                return f.name
        return None


TUNER_LAYOUT = ContextLayout(
    "tuner", 36,
    (Field("collective", 0, 4), Field("msg_size", 8, 8), Field("n_ranks", 16, 4),
     Field("comm_id", 20, 4), Field("algorithm", 24, 4), Field("protocol", 28, 4),
     Field("n_channels", 32, 4)),
    writable=((24, 36),),
)

PROFILER_LAYOUT = ContextLayout(
    "profiler", 32,
    (Field("comm_id", 0, 4), Field("latency_ns", 8, 8), Field("n_channels", 16, 4),
     Field("collective", 20, 4), Field("msg_size", 24, 8)),
)

NET_LAYOUT = ContextLayout(
    "net", 24,
    (Field("conn_id", 0, 4), Field("bytes", 8, 8), Field("direction", 16, 4)),
)

LAYOUTS = {
    Hook.TUNER: TUNER_LAYOUT,
    Hook.PROFILER: PROFILER_LAYOUT,
    Hook.NET_TX: NET_LAYOUT,
    Hook.NET_RX: NET_LAYOUT,
}


def layout_for(hook: Hook) -> ContextLayout:
    return LAYOUTS[hook]


_TUNER = struct.Struct("<I4xQIIIII")
_PROFILER = struct.Struct("<I4xQIIQ")
_NET = struct.Struct("<I4xQI4x")


def pack_tuner(collective: int, msg_size: int, n_ranks: int, comm_id: int) -> bytearray:
    """Tuner record with all outputs set to UNSET."""
    return bytearray(_TUNER.pack(collective, msg_size, n_ranks, comm_id, UNSET32, UNSET32, 0))


def pack_tuner_into(buf: bytearray, collective: int, msg_size: int, n_ranks: int, comm_id: int):
    _TUNER.pack_into(buf, 0, collective, msg_size, n_ranks, comm_id, UNSET32, UNSET32, 0)


def unpack_tuner_outputs(buf) -> tuple[int, int, int]:
    """(algorithm, protocol, n_channels) as raw 32-bit values."""
    return struct.unpack_from("<III", buf, 24)


def pack_profiler(comm_id: int, latency_ns: int, n_channels: int, collective: int,
                  msg_size: int) -> bytearray:
    return bytearray(_PROFILER.pack(comm_id, latency_ns, n_channels, collective, msg_size))


def pack_net(conn_id: int, nbytes: int, direction: int) -> bytearray:
    return bytearray(_NET.pack(conn_id, nbytes, direction))
