"""Simulated collective-communication host.

The :class:`Engine` owns the map registry, one :class:`ActiveSlot` per hook
and a performance model. It builds hook contexts, runs whatever program is
active, turns tuner outputs into a cost table with clamping, models the
collective, and feeds the resulting latency to the profiler hook. That is
enough to run the closed loop between a profiler and a tuner program.
"""
from __future__ import annotations

import json
import os
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import reload as reloadmod
from ._data import DATA_DIR, load_toml, resolve
from .context import (Algorithm, Collective, Direction, Protocol, pack_net,
                      pack_profiler, pack_tuner, unpack_tuner_outputs)
from .isa import Hook, Program, load_file
from .maps import MapRegistry
from .model import MiB, PerfModel, latency_ns, load_model
from .reload import ActiveSlot, ReloadReport
from .verifier import VerifierConfig
from .vm import TraceRing

SENTINEL = 1e9
GOLDEN = 0x9E3779B97F4A7C15
M64 = (1 << 64) - 1


def derive_comm_id(handle: int) -> int:
    """Stable 32-bit id for a 64-bit communicator handle (Fibonacci hashing)."""
    return ((handle * GOLDEN) & M64) >> 32


@dataclass(frozen=True)
class CommHandle:
    handle: int

    @property
    def comm_id(self) -> int:
        return derive_comm_id(self.handle)


def _comm(comm) -> CommHandle:
    return comm if isinstance(comm, CommHandle) else CommHandle(int(comm))


@dataclass(frozen=True)
class Decision:
    algorithm: Algorithm
    protocol: Protocol
    n_channels: int
    deferred: bool = False

    def label(self) -> str:
        return f"{self.algorithm.name}/{self.protocol.name}/{self.n_channels}ch"


@dataclass(frozen=True)
class CostTable:
    """algorithm x protocol costs. ``costs`` is None while deferred."""
    costs: np.ndarray | None

    @property
    def deferred(self) -> bool:
        return self.costs is None

    def choice(self) -> tuple[Algorithm, Protocol] | None:
        if self.costs is None:
            return None
        a, p = np.unravel_index(int(np.argmin(self.costs)), self.costs.shape)
        return Algorithm(int(a)), Protocol(int(p))


def _field(raw: int, enum_cls):
    try:
        return enum_cls(raw)
    except ValueError:
        return None


def translate(outputs: tuple[int, int, int], max_channels: int,
              default: tuple[Algorithm, Protocol] = (Algorithm.NVLS, Protocol.SIMPLE)
              ) -> tuple[Decision, CostTable]:
    """Turn raw tuner outputs into the host decision and its cost table.

    Out-of-range algorithm or protocol values count as UNSET. The table
    stays deferred only when both are UNSET; otherwise the missing half
    takes the host default. Channel requests are clamped to
    [1, max_channels] and 0 means "host default" (max_channels).
    """
    raw_algo, raw_proto, raw_ch = outputs
    algo, proto = _field(raw_algo, Algorithm), _field(raw_proto, Protocol)
    channels = max_channels if raw_ch == 0 else min(max(raw_ch, 1), max_channels)
    if algo is None and proto is None:
        return Decision(default[0], default[1], channels, True), CostTable(None)
    algo = default[0] if algo is None else algo
    proto = default[1] if proto is None else proto
    costs = np.full((len(Algorithm), len(Protocol)), SENTINEL)
    costs[algo, proto] = 0.0
    return Decision(algo, proto, channels), CostTable(costs)


@dataclass(frozen=True)
class TunerResult:
    decision: Decision
    cost_table: CostTable
    generation: int
    policy_name: str | None


@dataclass(frozen=True)
class CollectiveResult:
    comm_id: int
    collective: Collective
    msg_size: int
    decision: Decision
    bus_gbps: float
    latency_ns: float
    generation: int
    policy_name: str | None

    def record(self, call_idx: int) -> dict:
        return {"call_idx": call_idx, "comm_id": self.comm_id,
                "collective": self.collective.name, "msg_size": self.msg_size,
                "algo": self.decision.algorithm.name, "proto": self.decision.protocol.name,
                "channels": self.decision.n_channels, "bus_gbps": round(self.bus_gbps, 4),
                "latency_ns": round(self.latency_ns, 1), "policy_name": self.policy_name}


class Engine:
    """One simulated host process with its maps and hook slots."""

    def __init__(self, model: PerfModel | None = None, max_channels: int | None = None,
                 config: VerifierConfig | None = None):
        self.model = model or load_model()
        self.max_channels = max_channels or self.model.max_channels
        self.config = config or VerifierConfig()
        self.registry = MapRegistry()
        self.ring = TraceRing()
        self.slots = {h: ActiveSlot(h) for h in Hook}
        self.reload_lock = threading.Lock()

    @property
    def default(self) -> tuple[Algorithm, Protocol]:
        return self.model.default_algorithm, self.model.default_protocol

    def load(self, program: Program | str | os.PathLike, hook: Hook | None = None
             ) -> ReloadReport:
        """Verify and activate a program (object, path or source text)."""
        if isinstance(program, (os.PathLike,)) or (
                isinstance(program, str) and program.endswith(".cclpol")):
            program = load_file(resolve(program))
        elif isinstance(program, str):
            from .isa import assemble
            program = assemble(program)
        return reloadmod.reload(self, hook or program.hook, program)

    def unload(self, hook: Hook) -> None:
        with self.reload_lock:
            slot = self.slots[hook]
            old, _ = slot.publish(None)
            slot.drain(old)

    def active(self, hook: Hook) -> str | None:
        prog = self.slots[hook].program
        return prog.name if prog else None

    # -- hooks ------------------------------------------------------------------

    def invoke_tuner(self, comm, collective: Collective, msg_size: int, n_ranks: int,
                     max_channels: int | None = None) -> TunerResult:
        comm = _comm(comm)
        ctx = pack_tuner(collective, msg_size, n_ranks, comm.comm_id)
        gen, prog, _ = self.slots[Hook.TUNER].invoke(ctx)
        decision, table = translate(unpack_tuner_outputs(ctx), max_channels or self.max_channels,
                                    self.default)
        return TunerResult(decision, table, gen, prog.name if prog else None)

    def profile(self, comm_id: int, latency: int, n_channels: int, collective: Collective,
                msg_size: int) -> None:
        self.slots[Hook.PROFILER].invoke(
            pack_profiler(comm_id, latency, n_channels, collective, msg_size))

    def run_collective(self, comm, collective: Collective, msg_size: int, n_ranks: int,
                       latency_multiplier: float = 1.0) -> CollectiveResult:
        """Decide, model the collective, and deliver one profiler event."""
        comm = _comm(comm)
        tr = self.invoke_tuner(comm, collective, msg_size, n_ranks)
        d = tr.decision
        bw = self.model.bus_bandwidth(d.algorithm, d.protocol, d.n_channels, msg_size)
        lat = latency_ns(collective, msg_size, n_ranks, bw)
        observed = min(int(round(lat * latency_multiplier)), M64)
        self.profile(comm.comm_id, observed, d.n_channels, collective, msg_size)
        return CollectiveResult(comm.comm_id, collective, msg_size, d, bw, lat, tr.generation,
                                tr.policy_name)

    def net_transfer(self, conn: LoopbackConnection, payload: bytes | int,
                     direction: Direction = Direction.SEND) -> int:
        return net_hook_transfer(self, conn, payload, direction)


# -- size sweeps ------------------------------------------------------------------

TABLE_SIZES_MIB = (4, 8, 16, 32, 64, 128, 256, 8192)


@dataclass(frozen=True)
class SweepRow:
    msg_size: int
    default_gbps: float
    ring_gbps: float
    policy_gbps: float | None
    policy_decision: Decision | None

    @property
    def ring_delta_pct(self) -> float:
        return 100.0 * (self.ring_gbps / self.default_gbps - 1.0)

    @property
    def policy_delta_pct(self) -> float | None:
        if self.policy_gbps is None:
            return None
        return 100.0 * (self.policy_gbps / self.default_gbps - 1.0)


def _gbps(engine: Engine, size: int, n_ranks: int) -> tuple[float, Decision]:
    r = engine.run_collective(1, Collective.ALLREDUCE, size, n_ranks)
    return r.bus_gbps, r.decision


def sweep(model: PerfModel | None = None, policy: Program | str | os.PathLike | None = None,
          sizes_mib=TABLE_SIZES_MIB, n_ranks: int | None = None) -> list[SweepRow]:
    """AllReduce size sweep: host default, forced Ring, and optionally ``policy``.

    Every column runs through the full tuner -> decision -> model path; the
    Ring column uses the shipped force_ring program.
    """
    model = model or load_model()
    n = n_ranks or model.ranks
    base = Engine(model)
    ring = Engine(model)
    ring.load(DATA_DIR / "policies" / "force_ring.cclpol")
    pol = None
    if policy is not None:
        pol = Engine(model)
        rep = pol.load(policy)
        if not rep.ok:
            raise ValueError(f"policy rejected: {rep.error}")
    rows = []
    for mib in sizes_mib:
        size = int(mib * MiB)
        d_bw, _ = _gbps(base, size, n)
        r_bw, _ = _gbps(ring, size, n)
        p_bw, p_dec = _gbps(pol, size, n) if pol else (None, None)
        rows.append(SweepRow(size, d_bw, r_bw, p_bw, p_dec))
    return rows


def _size_label(size: int) -> str:
    if size >= 1 << 30 and size % (1 << 30) == 0:
        return f"{size >> 30} GiB"
    if size >= MiB and size % MiB == 0:
        return f"{size >> 20} MiB"
    if size >= 1024 and size % 1024 == 0:
        return f"{size >> 10} KiB"
    return f"{size} B"


def format_sweep(rows: list[SweepRow], policy_name: str | None = None) -> str:
    head = f"{'Size':>9} {'Default':>9} {'Ring':>9} {'dRing':>8}"
    if policy_name:
        head += f" {policy_name:>20} {'dPolicy':>8}  decision"
    lines = [head, "-" * len(head)]
    for r in rows:
        line = (f"{_size_label(r.msg_size):>9} {r.default_gbps:9.1f} {r.ring_gbps:9.1f} "
                f"{r.ring_delta_pct:+7.1f}%")
        if policy_name:
            dec = "DEFER" if r.policy_decision.deferred else r.policy_decision.label()
            line += f" {r.policy_gbps:20.1f} {r.policy_delta_pct:+7.1f}%  {dec}"
        lines.append(line)
    return "\n".join(lines)


# -- scenarios ----------------------------------------------------------------------

class ScenarioError(ValueError):
    pass


@dataclass
class ScenarioSpec:
    name: str
    calls: int
    ranks: int = 8
    collective: Collective = Collective.ALLREDUCE
    sizes: tuple[int, ...] = (MiB,)
    comm_handle: int = 1
    contention: tuple[tuple[int, int, float], ...] = ()
    programs: dict = field(default_factory=dict)  # Hook -> path
    base_dir: Path | None = None

    def multiplier(self, call: int) -> float:
        m = 1.0
        for start, end, factor in self.contention:
            if start <= call < end:
                m *= factor
        return m


def load_scenario(path: str | os.PathLike) -> ScenarioSpec:
    p = resolve(path, ".toml")
    cfg = load_toml(p)
    sizes = cfg.get("sizes", {})
    if "fixed" in sizes:
        size_list = (int(sizes["fixed"]),)
    elif "sweep" in sizes:
        size_list = tuple(int(s) for s in sizes["sweep"])
    else:
        size_list = (MiB,)
    programs = {Hook(k): v for k, v in cfg.get("programs", {}).items()}
    contention = tuple((int(c["start"]), int(c["end"]), float(c["multiplier"]))
                       for c in cfg.get("contention", []))
    return ScenarioSpec(name=cfg.get("name", p.stem), calls=int(cfg["calls"]),
                        ranks=int(cfg.get("ranks", 8)),
                        collective=Collective[cfg.get("collective", "allreduce").upper()],
                        sizes=size_list, comm_handle=int(cfg.get("comm_handle", 1)),
                        contention=contention, programs=programs, base_dir=p.parent)


@dataclass
class Trace:
    """Per-call scenario trace, stored column-wise."""
    name: str
    comm_id: int
    collective: Collective
    msg_size: np.ndarray
    algo: np.ndarray
    proto: np.ndarray
    channels: np.ndarray
    bus_gbps: np.ndarray
    latency_ns: np.ndarray
    policy: list

    def __len__(self):
        return len(self.channels)

    def records(self):
        for i in range(len(self)):
            yield {"call_idx": i, "comm_id": self.comm_id, "collective": self.collective.name,
                   "msg_size": int(self.msg_size[i]), "algo": Algorithm(self.algo[i]).name,
                   "proto": Protocol(self.proto[i]).name, "channels": int(self.channels[i]),
                   "bus_gbps": round(float(self.bus_gbps[i]), 4),
                   "latency_ns": round(float(self.latency_ns[i]), 1),
                   "policy_name": self.policy[i]}

    def write_jsonl(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec) + "\n")


def _scenario_program(spec: ScenarioSpec, path: str) -> Path:
    p = Path(path)
    if spec.base_dir is not None and not p.is_absolute() and (spec.base_dir / p).is_file():
        return spec.base_dir / p
    return resolve(p)


def run_scenario(engine: Engine, spec: ScenarioSpec) -> Trace:
    """Load the scenario's programs and issue ``spec.calls`` collectives in order."""
    for hook, path in spec.programs.items():
        try:
            prog_path = _scenario_program(spec, path)
        except FileNotFoundError as exc:
            raise ScenarioError(f"scenario {spec.name}: {exc}") from None
        rep = engine.load(load_file(prog_path), hook)
        if not rep.ok:
            raise ScenarioError(f"scenario {spec.name}: {path} not loaded: {rep.error}")
    n = spec.calls
    comm = CommHandle(spec.comm_handle)
    cols = {k: np.zeros(n, dtype=np.int64) for k in ("msg_size", "algo", "proto", "channels")}
    bw = np.zeros(n)
    lat = np.zeros(n)
    policy = [None] * n
    for i in range(n):
        size = spec.sizes[i % len(spec.sizes)]
        r = engine.run_collective(comm, spec.collective, size, spec.ranks, spec.multiplier(i))
        cols["msg_size"][i] = size
        cols["algo"][i] = r.decision.algorithm
        cols["proto"][i] = r.decision.protocol
        cols["channels"][i] = r.decision.n_channels
        bw[i] = r.bus_gbps
        lat[i] = r.latency_ns
        policy[i] = r.policy_name
    return Trace(spec.name, comm.comm_id, spec.collective, cols["msg_size"], cols["algo"],
                 cols["proto"], cols["channels"], bw, lat, policy)


@dataclass(frozen=True)
class Phase:
    start: int
    end: int
    multiplier: float
    first: int
    last: int
    low: int
    high: int
    reached_high_at: int  # first call index in the phase where channels == high

    def line(self) -> str:
        return (f"calls [{self.start}, {self.end}) x{self.multiplier:g}: channels "
                f"{self.first} -> {self.last} (min {self.low}, max {self.high} "
                f"first at call {self.reached_high_at})")


def phases(trace: Trace, spec: ScenarioSpec) -> list[Phase]:
    """Split the channel trace at contention boundaries."""
    n = len(trace)
    cuts = sorted({0, n, *(min(max(c, 0), n) for s, e, _ in spec.contention for c in (s, e))})
    out = []
    for a, b in zip(cuts, cuts[1:]):
        if a == b:
            continue
        ch = trace.channels[a:b]
        hi = int(ch.max())
        out.append(Phase(a, b, spec.multiplier(a), int(ch[0]), int(ch[-1]), int(ch.min()), hi,
                         a + int(np.argmax(ch == hi))))
    return out


# -- network hook ---------------------------------------------------------------------

class LoopbackConnection:
    """A TCP connection over 127.0.0.1 whose remote end is a peer thread.

    Every transfer is a framed request that completes only when the peer
    acknowledges it, the way a transport's isend/irecv completes only once
    the other side has the data.
    """

    _CHUNK = 1 << 16
    _HDR = struct.Struct("<BQ")  # direction, length
    _ACK = b"\x01"

    def __init__(self, conn_id: int):
        self.conn_id = conn_id
        with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as lst:
            lst.bind(("127.0.0.1", 0))
            lst.listen(1)
            self.local = socket.create_connection(lst.getsockname())
            self.remote, _ = lst.accept()
        for sk in (self.local, self.remote):
            sk.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._buf = bytearray(self._CHUNK)
        self._peer = threading.Thread(target=self._serve, name=f"peer-{conn_id}", daemon=True)
        self._peer.start()

    @staticmethod
    def _read_exact(sock: socket.socket, buf: bytearray, n: int) -> int:
        view = memoryview(buf)
        got = 0
        while got < n:
            k = sock.recv_into(view[: min(len(buf), n - got)])
            if k == 0:
                raise ConnectionError("connection closed mid-transfer")
            got += k
        return got

    def _serve(self):
        buf = bytearray(self._CHUNK)
        hdr = bytearray(self._HDR.size)
        try:
            while True:
                if self.remote.recv_into(hdr, len(hdr), socket.MSG_WAITALL) < len(hdr):
                    return
                direction, n = self._HDR.unpack(hdr)
                if direction == int(Direction.SEND):
                    self._read_exact(self.remote, buf, n)
                    self.remote.sendall(self._ACK)
                else:
                    for off in range(0, n, self._CHUNK):
                        self.remote.sendall(memoryview(buf)[: min(self._CHUNK, n - off)])
        except OSError:
            return

    def move(self, payload: bytes, direction: Direction) -> int:
        """Send ``payload`` to the peer, or receive as many bytes from it."""
        n = len(payload)
        self.local.sendall(self._HDR.pack(int(direction), n))
        if direction is Direction.SEND:
            self.local.sendall(payload)
            if self.local.recv(1) != self._ACK:
                raise ConnectionError(f"connection {self.conn_id}: peer did not acknowledge")
            return n
        return self._read_exact(self.local, self._buf, n)

    def close(self):
        for sk in (self.local, self.remote):
            try:
                sk.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sk.close()
        self._peer.join(timeout=1.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def net_hook_transfer(engine: Engine, conn: LoopbackConnection, payload: bytes | int,
                      direction: Direction = Direction.SEND) -> int:
    """Move ``payload`` over ``conn``, running the matching net hook first.

    The hook observes a read-only {conn_id, bytes, direction} record; its
    return code is ignored.
    """
    data = bytes(payload) if isinstance(payload, int) else payload
    hook = Hook.NET_TX if direction is Direction.SEND else Hook.NET_RX
    engine.slots[hook].invoke(pack_net(conn.conn_id, len(data), direction))
    return conn.move(data, direction)


def count_net_bytes(transfers: int = 1000, payload_size: int = 4096, connections: int = 2,
                    policy: str | os.PathLike | None = None) -> tuple[Engine, int]:
    """One counted run on a fresh engine; returns the engine and bytes moved."""
    policy = policy or DATA_DIR / "policies" / "net_byte_counter.cclpol"
    engine = Engine()
    rep = engine.load(policy)
    if not rep.ok:
        raise ValueError(rep.error)
    payload = bytes(payload_size)
    conns = [LoopbackConnection(i + 1) for i in range(connections)]
    moved = 0
    try:
        for k in range(transfers):
            moved += net_hook_transfer(engine, conns[k % connections], payload)
    finally:
        for c in conns:
            c.close()
    return engine, moved


def measure_net_overhead(transfers: int = 1000, payload_size: int = 4096,
                         connections: int = 2, repeats: int = 10,
                         policy: str | os.PathLike | None = None) -> dict:
    """Time wrapped (hook active) against unwrapped transfers.

    Wrapped and plain transfers alternate one by one over the same
    connections, and each is timed on its own; comparing medians keeps
    scheduler bursts on a shared machine out of the estimate.
    """
    policy = policy or DATA_DIR / "policies" / "net_byte_counter.cclpol"
    payload = bytes(payload_size)
    wrapped = Engine()
    rep = wrapped.load(policy)
    if not rep.ok:
        raise ValueError(rep.error)
    plain = Engine()
    n = transfers * repeats
    times = np.empty((2, n), dtype=np.int64)
    clock = time.perf_counter_ns
    conns = [LoopbackConnection(i + 1) for i in range(connections)]
    try:
        for k in range(n):
            conn = conns[k % connections]
            for j, eng in enumerate((plain, wrapped) if k % 2 else (wrapped, plain)):
                t0 = clock()
                net_hook_transfer(eng, conn, payload)
                times[j if k % 2 else 1 - j, k] = clock() - t0
    finally:
        for c in conns:
            c.close()
    plain_us, wrapped_us = (float(np.median(t)) / 1e3 for t in times)
    return {"transfers": n, "payload_size": payload_size,
            "plain_us_per_transfer": plain_us, "wrapped_us_per_transfer": wrapped_us,
            "hook_us_per_transfer": wrapped_us - plain_us,
            "overhead_pct": 100.0 * (wrapped_us / plain_us - 1.0)}


def net_counters(engine: Engine, map_name: str = "net_bytes") -> dict[int, tuple[int, int]]:
    """conn_id -> (bytes, calls) from the byte-counter map."""
    out = {}
    for k, v in engine.registry[map_name].items():
        out[int.from_bytes(k, "little")] = (int.from_bytes(v[:8], "little"),
                                            int.from_bytes(v[8:16], "little"))
    return out
