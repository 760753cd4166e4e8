"""Policy execution.

Two engines share one memory model:

* FAST: ``prepare()`` translates a verified program into a specialised
  Python function once, then every invocation runs with no runtime checks.
  Pointers are flat 64-bit integers ``(region_index << 32) | offset`` where
  region 1 is the context, region 2 the stack and later regions are map
  values handed out by ``map_lookup_elem`` during that invocation.
* CHECKED: a straightforward interpreter with tagged pointers that
  validates every register read, memory access, helper call and division,
  raising :class:`SafetyFault` instead of misbehaving. It is the oracle the
  verifier is tested against.

Both produce identical results for programs the verifier accepts.
"""
from __future__ import annotations

import collections
import enum
import functools
import operator
import random
import struct
from dataclasses import dataclass, field

from . import maps as mapsmod
from .context import UNSET32, ContextLayout, layout_for
from .isa import ALU_OPS, COND_JUMPS, FRAME_REG, NUM_REGS, Hook, Instruction, Op, Program
from .maps import MapError, MapInstance, MapRegistry
from .verifier import (DEFAULT_HELPERS, HELPER_MAP_DELETE, HELPER_MAP_LOOKUP, HELPER_MAP_UPDATE,
                       HELPER_NAMES, HELPER_TRACE_LOG, VerifierConfig, verify)

M64 = (1 << 64) - 1
LOW32 = 0xFFFFFFFF
SIGN = 1 << 63
CTX_REGION = 1
STACK_REGION = 2
TRACE_CAPACITY = 4096


class SafetyFault(Exception):
    def __init__(self, pc: int, message: str):
        super().__init__(f"insn {pc}: {message}")
        self.pc = pc
        self.message = message


class EngineBug(RuntimeError):
    """A verified program trapped in FAST mode: the verifier is unsound."""


class Mode(enum.Enum):
    FAST = "fast"
    CHECKED = "checked"


class TraceRing:
    """Bounded sink for ``trace_log``; old entries are dropped."""

    def __init__(self, capacity: int = TRACE_CAPACITY):
        self._buf = collections.deque(maxlen=capacity)
        self.total = 0

    def append(self, v: int):
        self._buf.append(v)
        self.total += 1

    def __len__(self):
        return len(self._buf)

    def snapshot(self) -> list[int]:
        return list(self._buf)


@dataclass(frozen=True)
class HelperTable:
    """Helper ids and the per-hook whitelists."""
    names: dict = field(default_factory=lambda: dict(HELPER_NAMES))
    whitelist: dict = field(default_factory=lambda: dict(DEFAULT_HELPERS))

    def allowed(self, hook: Hook) -> frozenset:
        return frozenset(self.whitelist.get(hook, ()))


# -- shared helper implementations ---------------------------------------------

def _neg(errno: int) -> int:
    return (-errno) & M64


def _helper_update(m: MapInstance, key: bytes, value: bytes, flags: int) -> int:
    if flags > 2:
        return _neg(mapsmod.EINVAL)
    try:
        m.update(key, value, flags)
    except MapError as exc:
        return _neg(exc.errno)
    return 0


def _helper_delete(m: MapInstance, key: bytes) -> int:
    try:
        return 0 if m.delete(key) else _neg(mapsmod.ENOENT)
    except MapError as exc:
        return _neg(exc.errno)


# -- FAST: translation to Python ---------------------------------------------------

_STRUCTS = {1: struct.Struct("<B"), 2: struct.Struct("<H"), 4: struct.Struct("<I"),
            8: struct.Struct("<Q")}
_WMASK = {1: 0xFF, 2: 0xFFFF, 4: 0xFFFFFFFF, 8: M64}

_GLOBALS = {f"_ld{w}": s.unpack_from for w, s in _STRUCTS.items()}
_GLOBALS.update({f"_st{w}": s.pack_into for w, s in _STRUCTS.items()})

_CMP = {Op.JEQ: "==", Op.JNE: "!=", Op.JGT: ">", Op.JGE: ">=", Op.JLT: "<", Op.JLE: "<=",
        Op.JSGT: ">", Op.JSGE: ">=", Op.JSLT: "<", Op.JSLE: "<="}
_SIGNED_JUMPS = frozenset({Op.JSGT, Op.JSGE, Op.JSLT, Op.JSLE})
_ALU_EXPR = {Op.ADD: "(r{d} + {x}) & 0xFFFFFFFFFFFFFFFF",
             Op.SUB: "(r{d} - {x}) & 0xFFFFFFFFFFFFFFFF",
             Op.MUL: "(r{d} * {x}) & 0xFFFFFFFFFFFFFFFF",
             Op.DIV: "r{d} // {x}", Op.MOD: "r{d} % {x}",
             Op.AND: "r{d} & {x}", Op.OR: "r{d} | {x}", Op.XOR: "r{d} ^ {x}"}


def _uses_stack(program: Program) -> bool:
    for i in program.instructions:
        if i.op in (Op.LDX,) and i.src == FRAME_REG:
            return True
        if i.reg_src and i.src == FRAME_REG:
            return True
        if i.dst == FRAME_REG and i.op in (Op.STX, Op.ST):
            return True
    return False


def _blocks(insns) -> list[int]:
    n = len(insns)
    leaders = {0}
    for pc, i in enumerate(insns):
        if i.is_jump:
            leaders.add(i.target(pc))
            if pc + 1 < n:
                leaders.add(pc + 1)
        elif i.op is Op.EXIT and pc + 1 < n:
            leaders.add(pc + 1)
    return sorted(x for x in leaders if x < n)


_ARG_REGS = frozenset(range(1, 6))


def _direct(fact) -> bool:
    """True when a memory access is addressed without its base register."""
    return fact is not None and (fact[0] in ("ctx", "fp") or (
        fact[0] == "map_value" and fact[1] is not None and fact[2] >= 0))


def _use_def(i: Instruction, fact) -> tuple[frozenset, frozenset]:
    """Registers read and written by one instruction in generated code."""
    op, d, s = i.op, i.dst, i.src
    direct = _direct(fact)
    if op in ALU_OPS:
        use = {s} if i.reg_src else set()
        if op is not Op.MOV:
            use.add(d)
        return frozenset(use), frozenset({d})
    if op is Op.NEG:
        return frozenset({d}), frozenset({d})
    if op is Op.LD_MAP:
        return frozenset(), frozenset({d})
    if op is Op.LDX:
        return (frozenset() if direct else frozenset({s})), frozenset({d})
    if op in (Op.STX, Op.ST):
        use = set() if direct else {d}
        if op is Op.STX:
            use.add(s)
        return frozenset(use), frozenset()
    if op is Op.CALL:
        name = _helper_name(i, fact)
        use = {4} if name.startswith("_up") else set() if name[1:3] in ("rf", "dl") else _ARG_REGS
        return frozenset(use), _ARG_REGS | {0}
    if op is Op.EXIT:
        return frozenset({0}), frozenset()
    if op in COND_JUMPS:
        return frozenset({d, s} if i.reg_src else {d}), frozenset()
    return frozenset(), frozenset()


def _dead(insns, facts: dict) -> tuple[set[int], set[int]]:
    """Backward liveness: (pure writes nobody reads, calls whose r0 nobody reads)."""
    n = len(insns)
    ud = [_use_def(i, facts.get(pc)) for pc, i in enumerate(insns)]
    pure = [i.op in ALU_OPS or i.op in (Op.NEG, Op.LD_MAP, Op.LDX) for i in insns]
    succ = []
    for pc, i in enumerate(insns):
        if i.op is Op.EXIT:
            succ.append(())
        elif i.op is Op.JA:
            succ.append((i.target(pc),))
        elif i.is_jump:
            succ.append((pc + 1, i.target(pc)))
        else:
            succ.append((pc + 1,))
    dead: set[int] = set()
    while True:
        # a dead write reads nothing, which can make its inputs dead in turn
        live_in = [frozenset()] * n
        changed = True
        while changed:
            changed = False
            for pc in range(n - 1, -1, -1):
                if pc in dead:
                    new = frozenset().union(*(live_in[t] for t in succ[pc] if t < n))
                else:
                    out = frozenset().union(*(live_in[t] for t in succ[pc] if t < n))
                    use, dfn = ud[pc]
                    new = use | (out - dfn)
                if new != live_in[pc]:
                    live_in[pc], changed = new, True
        live_out = [frozenset().union(*(live_in[t] for t in succ[pc] if t < n))
                    for pc in range(n)]
        more = {pc for pc, i in enumerate(insns)
                if pure[pc] and pc not in dead and i.dst not in live_out[pc]}
        if not more:
            unused = {pc for pc, i in enumerate(insns) if i.op is Op.CALL and 0 not in live_out[pc]}
            return dead, unused
        dead |= more


def generate_source(program: Program, max_stack: int = 512, sites: tuple = ()) -> str:
    """Python source for the FAST path of ``program`` (which must be verified).

    ``sites`` are the verifier's per-instruction facts. Where a memory
    access is known to hit the context or a fixed stack slot, or a helper
    call is known to use one map with fixed stack buffers, the generated
    code addresses the buffer directly instead of decoding a flat pointer.
    Register writes that nothing reads are dropped.
    """
    insns = program.instructions
    facts = dict(sites)
    has_back = any(i.is_jump and i.target(pc) <= pc for pc, i in enumerate(insns))
    if has_back:
        # a lookup inside a loop may run again while an older pointer from
        # it is still live, so its buffer variable does not identify a value
        facts = {pc: f for pc, f in facts.items() if f[0] != "map_value"}
    flat_values = any(i.op in (Op.LDX, Op.STX, Op.ST) and not _direct(facts.get(pc))
                      for pc, i in enumerate(insns))
    stack = _uses_stack(program)
    used = sorted(({r for i in insns for r in (i.dst, i.src)} | {0}) - {1, FRAME_REG})
    helpers = sorted({_helper_name(i, facts.get(pc)) for pc, i in enumerate(insns)
                      if i.op is Op.CALL})
    out = ["def _factory(H):"]
    out += [f"    {h} = H[{h!r}]" for h in helpers]
    out.append("    def _run(ctx):")
    body = []
    body.append(f"stack = bytearray({max_stack})" if stack else "stack = None")
    if flat_values or any(h in ("_h1", "_h2", "_h3") for h in helpers):
        body.append("regions = [None, ctx, stack]")
    if used:
        body.append(" = ".join(f"r{r}" for r in used) + " = 0")
    body.append(f"r1 = {CTX_REGION << 32}")
    body.append(f"r10 = {(STACK_REGION << 32) + max_stack}")

    dead, unused = _dead(insns, facts)
    starts = _blocks(insns)
    multi = len(starts) > 1
    # forward-only control flow visits blocks in pc order, so a flat chain
    # of block tests suffices; back edges need the dispatch loop
    ind = "    " if has_back else ""
    if multi:
        body.append("b = 0")
        if has_back:
            body.append("while True:")
    for bi, start in enumerate(starts):
        end = starts[bi + 1] if bi + 1 < len(starts) else len(insns)
        blk = []
        terminated = False
        for pc in range(start, end):
            if pc in dead:
                continue
            code, terminated = _emit(insns[pc], pc, facts.get(pc), max_stack, flat_values)
            if pc in unused and code[0].startswith("r0 = _"):
                code = [code[0][5:].removesuffix(" & 0xFFFFFFFFFFFFFFFF")] + code[1:]
            blk.extend(code)
        if multi and not terminated:
            blk.append(f"b = {end}")
        if multi:
            body.append(f"{ind}if b == {start}:")
            body.extend(f"{ind}    {ln}" for ln in blk)
        else:
            body.extend(blk)
    if multi and not has_back:
        body.append(f"{ind}raise AssertionError('fell through block dispatch')")
    out.extend(f"        {ln}" for ln in body)
    out.append("    return _run")
    return "\n".join(out) + "\n"


def _helper_name(i: Instruction, fact) -> str:
    if fact is not None and fact[0] == "call" and i.imm != HELPER_TRACE_LOG:
        kind = {HELPER_MAP_LOOKUP: "rf", HELPER_MAP_UPDATE: "up", HELPER_MAP_DELETE: "dl"}[i.imm]
        return f"_{kind}{fact[1]}"
    return f"_h{i.imm}"


def _addr(reg: int, off: int, fact, max_stack: int) -> tuple[list[str], str, int]:
    """(setup lines, buffer expression, offset expression) for a memory operand."""
    if _direct(fact) and fact[0] == "map_value":
        return [], f"v{fact[2]}", fact[1] + off
    if fact is not None and fact[0] == "ctx":
        return [], "ctx", fact[1] + off
    if fact is not None and fact[0] == "fp":
        return [], "stack", max_stack + fact[1] + off
    return [f"a = r{reg} + {off}"], "regions[a >> 32]", "a & 0xFFFFFFFF"


def _emit(i: Instruction, pc: int, fact, max_stack: int,
          flat_values: bool = True) -> tuple[list[str], bool]:
    op, d, s = i.op, i.dst, i.src
    if op in ALU_OPS:
        x = f"r{s}" if i.reg_src else str(i.imm & M64)
        if op is Op.MOV:
            return [f"r{d} = {x}"], False
        if op is Op.LSH:
            sh = f"({x} & 63)" if i.reg_src else str(i.imm & 63)
            return [f"r{d} = (r{d} << {sh}) & 0xFFFFFFFFFFFFFFFF"], False
        if op is Op.RSH:
            sh = f"({x} & 63)" if i.reg_src else str(i.imm & 63)
            return [f"r{d} = r{d} >> {sh}"], False
        if op is Op.ARSH:
            sh = f"({x} & 63)" if i.reg_src else str(i.imm & 63)
            return [f"r{d} = ((r{d} - ((r{d} >> 63) << 64)) >> {sh}) & 0xFFFFFFFFFFFFFFFF"], False
        return [f"r{d} = " + _ALU_EXPR[op].format(d=d, x=x)], False
    if op is Op.NEG:
        return [f"r{d} = (-r{d}) & 0xFFFFFFFFFFFFFFFF"], False
    if op is Op.LDX:
        pre, buf, off = _addr(s, i.offset, fact, max_stack)
        return pre + [f"r{d} = _ld{i.width}({buf}, {off})[0]"], False
    if op is Op.STX:
        pre, buf, off = _addr(d, i.offset, fact, max_stack)
        # registers always hold values in [0, 2**64)
        val = f"r{s}" if i.width == 8 else f"r{s} & {_WMASK[i.width]}"
        return pre + [f"_st{i.width}({buf}, {off}, {val})"], False
    if op is Op.ST:
        pre, buf, off = _addr(d, i.offset, fact, max_stack)
        return pre + [f"_st{i.width}({buf}, {off}, {i.imm & _WMASK[i.width]})"], False
    if op is Op.LD_MAP:
        return [f"r{d} = {i.imm}"], False
    if op is Op.CALL:
        name = _helper_name(i, fact)
        if name.startswith("_rf"):
            v = f"v{pc}"
            call = [f"{v} = {name}(stack, {max_stack + fact[2]})"]
            if not flat_values:
                # every access names v{pc} directly; r0 only has to be non-null
                return call + [f"r0 = 0 if {v} is None else {(pc + 3) << 32}"], False
            # the value buffer becomes a new region, r0 points at its start
            return call + [f"if {v} is None:", "    r0 = 0", "else:", f"    regions.append({v})",
                           "    r0 = (len(regions) - 1) << 32"], False
        if name.startswith("_up"):
            call = (f"{name}(stack, {max_stack + fact[2]}, {max_stack + fact[3]}, r4)"
                    " & 0xFFFFFFFFFFFFFFFF")
        elif name.startswith("_dl"):
            call = f"{name}(stack, {max_stack + fact[2]})"
        else:
            call = {HELPER_MAP_LOOKUP: "_h1(regions, r1, r2)",
                    HELPER_MAP_UPDATE: "_h2(regions, r1, r2, r3, r4)",
                    HELPER_MAP_DELETE: "_h3(regions, r1, r2)",
                    HELPER_TRACE_LOG: "_h6(r1)"}[i.imm]
        return [f"r0 = {call}"], False
    if op is Op.EXIT:
        return ["return r0"], True
    tgt = i.target(pc)
    back = tgt <= pc
    if op is Op.JA:
        return [f"b = {tgt}"] + (["continue"] if back else []), True
    if op in COND_JUMPS:
        if i.reg_src:
            lhs, rhs = f"r{d}", f"r{s}"
            if op in _SIGNED_JUMPS:
                lhs, rhs = f"(r{d} ^ {SIGN})", f"(r{s} ^ {SIGN})"
        else:
            k = i.imm & M64
            lhs, rhs = f"r{d}", str(k)
            if op in _SIGNED_JUMPS:
                lhs, rhs = f"(r{d} ^ {SIGN})", str(k ^ SIGN)
        if back:
            return [f"if {lhs} {_CMP[op]} {rhs}:", f"    b = {tgt}", "    continue",
                    f"b = {pc + 1}"], True
        return [f"if {lhs} {_CMP[op]} {rhs}:", f"    b = {tgt}", "else:",
                f"    b = {pc + 1}"], True
    raise AssertionError(op)


@functools.lru_cache(maxsize=256)
def _compile(program: Program, max_stack: int, sites: tuple = ()):
    src = generate_source(program, max_stack, sites)
    ns = dict(_GLOBALS)
    exec(compile(src, f"<cclpol:{program.name}>", "exec"), ns)
    return ns["_factory"], src


def _bind_helpers(maps: list[MapInstance], ring: TraceRing) -> dict:
    def h_lookup(regions, mh, kp):
        m = maps[mh]
        o = kp & LOW32
        v = m.lookup_ref(bytes(regions[kp >> 32][o:o + m.key_size]))
        if v is None:
            return 0
        regions.append(v)
        return (len(regions) - 1) << 32

    def h_update(regions, mh, kp, vp, flags):
        m = maps[mh]
        ko, vo = kp & LOW32, vp & LOW32
        key = bytes(regions[kp >> 32][ko:ko + m.key_size])
        value = bytes(regions[vp >> 32][vo:vo + m.value_size])
        return _helper_update(m, key, value, flags)

    def h_delete(regions, mh, kp):
        m = maps[mh]
        o = kp & LOW32
        return _helper_delete(m, bytes(regions[kp >> 32][o:o + m.key_size]))

    def h_trace(v):
        ring.append(v)
        return 0

    table = {"_h1": h_lookup, "_h2": h_update, "_h3": h_delete, "_h6": h_trace}
    for slot, m in enumerate(maps):
        table[f"_rf{slot}"] = m.buffer_ref()
        table[f"_up{slot}"] = m.buffer_updater()
        table[f"_dl{slot}"] = _delete_fixed(m)
    return table


# delete specialised to one map and a fixed stack buffer

def _delete_fixed(m: MapInstance):
    ks = m.key_size

    def dl(stack, ko):
        return _helper_delete(m, bytes(stack[ko:ko + ks]))
    return dl


class PreparedProgram:
    """A verified program bound to concrete maps, ready for FAST invocation."""

    def __init__(self, program: Program, maps: list[MapInstance], ring: TraceRing | None = None,
                 max_stack: int = 512, verdict=None):
        self.program = program
        self.maps = maps
        self.ring = ring if ring is not None else TraceRing()
        self.max_stack = max_stack
        self.verdict = verdict
        sites = verdict.sites if verdict is not None else ()
        factory, self.source = _compile(program, max_stack, sites)
        self._run = factory(_bind_helpers(maps, self.ring))
        self.retired = False

    @property
    def name(self) -> str:
        return self.program.name

    def run(self, ctx: bytearray) -> int:
        try:
            return self._run(ctx)
        except Exception as exc:  # pragma: no cover - only reachable if the verifier is wrong
            raise EngineBug(f"verified program {self.program.name!r} trapped in FAST mode: "
                            f"{type(exc).__name__}: {exc}") from exc


def prepare(program: Program, registry: MapRegistry, ring: TraceRing | None = None,
            max_stack: int = 512, verdict=None) -> PreparedProgram:
    return PreparedProgram(program, registry.resolve(program), ring, max_stack, verdict)


# -- CHECKED: reference interpreter ------------------------------------------------

class _Uninit:
    __slots__ = ()

    def __repr__(self):
        return "<uninit>"


_UNINIT = _Uninit()


class Ptr:
    __slots__ = ("kind", "region", "buf", "off", "map")

    def __init__(self, kind: str, region: int, buf, off: int, map_name: str | None = None):
        self.kind = kind
        self.region = region
        self.buf = buf
        self.off = off
        self.map = map_name

    def moved(self, delta: int) -> Ptr:
        return Ptr(self.kind, self.region, self.buf, self.off + delta, self.map)

    @property
    def addr(self) -> int:
        return ((self.region << 32) + self.off) & M64

    def __repr__(self):
        return f"Ptr({self.kind}{self.off:+d})"


class MapHandle:
    __slots__ = ("slot",)

    def __init__(self, slot: int):
        self.slot = slot


def _s64(v: int) -> int:
    return v - (1 << 64) if v & SIGN else v


class CheckedInterpreter:
    def __init__(self, program: Program, maps: list[MapInstance], layout: ContextLayout,
                 allowed_helpers: frozenset, max_stack: int = 512,
                 max_steps: int = 1_000_000, ring: TraceRing | None = None):
        self.program = program
        self.maps = maps
        self.layout = layout
        self.allowed = allowed_helpers
        self.max_stack = max_stack
        self.max_steps = max_steps
        self.ring = ring if ring is not None else TraceRing()

    def run(self, ctx: bytearray) -> int:
        insns = self.program.instructions
        n = len(insns)
        stack = bytearray(self.max_stack)
        self.stack_init = bytearray(self.max_stack)
        self.spills: dict[int, object] = {}
        self.regions = [None, ctx, stack]
        self.helper_calls = collections.Counter()
        regs: list = [_UNINIT] * NUM_REGS
        regs[1] = Ptr("ctx", CTX_REGION, ctx, 0)
        regs[FRAME_REG] = Ptr("stack", STACK_REGION, stack, self.max_stack)
        self.regs = regs
        pc = 0
        steps = 0
        while True:
            if not 0 <= pc < n:
                raise SafetyFault(pc, "execution left the program")
            steps += 1
            if steps > self.max_steps:
                raise SafetyFault(pc, f"exceeded {self.max_steps} steps")
            i = insns[pc]
            op = i.op
            if op is Op.EXIT:
                r0 = self.get(0, pc)
                if not isinstance(r0, int):
                    raise SafetyFault(pc, "exit with non-scalar r0")
                return r0
            if op in ALU_OPS or op is Op.NEG:
                self.alu(i, pc)
            elif op is Op.LDX:
                self.set(i.dst, self.load(i.src, i.offset, i.width, pc), pc)
            elif op is Op.STX:
                self.store(i.dst, i.offset, i.width, self.get(i.src, pc), pc)
            elif op is Op.ST:
                self.store(i.dst, i.offset, i.width, i.imm & M64, pc)
            elif op is Op.LD_MAP:
                if not 0 <= i.imm < len(self.maps):
                    raise SafetyFault(pc, f"bad map slot {i.imm}")
                self.set(i.dst, MapHandle(i.imm), pc)
            elif op is Op.CALL:
                regs[0] = self.call(i.imm, pc)
                for r in range(1, 6):
                    regs[r] = _UNINIT
            elif op is Op.JA:
                pc = i.target(pc)
                continue
            elif op in COND_JUMPS:
                if self.cond(i, pc):
                    pc = i.target(pc)
                    continue
            else:
                raise SafetyFault(pc, f"bad opcode {op}")
            pc += 1

    def get(self, r: int, pc: int):
        v = self.regs[r]
        if v is _UNINIT:
            raise SafetyFault(pc, f"read of uninitialized r{r}")
        return v

    def set(self, r: int, v, pc: int):
        if r == FRAME_REG:
            raise SafetyFault(pc, "write to r10")
        self.regs[r] = v

    def alu(self, i: Instruction, pc: int):
        op, d = i.op, i.dst
        if op is Op.NEG:
            a = self.get(d, pc)
            if not isinstance(a, int):
                raise SafetyFault(pc, "neg on pointer")
            self.set(d, (-a) & M64, pc)
            return
        b = self.get(i.src, pc) if i.reg_src else i.imm & M64
        if op is Op.MOV:
            self.set(d, b, pc)
            return
        a = self.get(d, pc)
        if isinstance(a, int) and isinstance(b, int):
            if op in (Op.DIV, Op.MOD) and b == 0:
                raise SafetyFault(pc, f"{op.value} by zero")
            self.set(d, alu64(op, a, b), pc)
            return
        if op is Op.ADD and isinstance(a, int) and isinstance(b, Ptr):
            a, b = b, a
        if isinstance(a, Ptr) and isinstance(b, int) and op in (Op.ADD, Op.SUB):
            delta = _s64(b) if op is Op.ADD else -_s64(b)
            self.set(d, a.moved(delta), pc)
            return
        raise SafetyFault(pc, f"illegal {op.value} involving a pointer or map handle")

    def _region(self, base, off: int, width: int, pc: int, store: bool):
        if not isinstance(base, Ptr):
            what = "NULL" if base == 0 else type(base).__name__
            raise SafetyFault(pc, f"memory access through {what}")
        o = base.off + off
        if o < 0 or o + width > len(base.buf):
            raise SafetyFault(pc, f"{base.kind} access [{o},{o + width}) out of bounds "
                                  f"(size {len(base.buf)})")
        if store and base.kind == "ctx" and not self.layout.is_writable(o, o + width):
            raise SafetyFault(pc, f"write to read-only context bytes [{o},{o + width})")
        return base, o

    def load(self, base_reg: int, off: int, width: int, pc: int):
        base, o = self._region(self.get(base_reg, pc), off, width, pc, store=False)
        if base.kind == "stack":
            if not all(self.stack_init[o:o + width]):
                raise SafetyFault(pc, f"read of uninitialized stack bytes [{o},{o + width})")
            if o in self.spills:
                if width == 8:
                    return self.spills[o]
                raise SafetyFault(pc, "partial read of a spilled pointer")
            for s in self.spills:
                if s < o + width and o < s + 8:
                    raise SafetyFault(pc, "partial read of a spilled pointer")
        return int.from_bytes(base.buf[o:o + width], "little")

    def store(self, base_reg: int, off: int, width: int, value, pc: int):
        base, o = self._region(self.get(base_reg, pc), off, width, pc, store=True)
        if base.kind == "stack":
            for s in [s for s in self.spills if s < o + width and o < s + 8]:
                del self.spills[s]
            self.stack_init[o:o + width] = b"\x01" * width
            if not isinstance(value, int):
                if width != 8 or (o - self.max_stack) % 8:
                    raise SafetyFault(pc, "partial spill of a pointer")
                self.spills[o] = value
                value = value.addr if isinstance(value, Ptr) else value.slot
        elif not isinstance(value, int):
            raise SafetyFault(pc, f"pointer stored into {base.kind} memory")
        base.buf[o:o + width] = (value & _WMASK[width]).to_bytes(width, "little")

    def _stack_bytes(self, r: int, n: int, pc: int) -> bytes:
        p = self.get(r, pc)
        if not isinstance(p, Ptr) or p.kind != "stack":
            raise SafetyFault(pc, f"helper argument r{r} is not a stack pointer")
        o = p.off
        if o < 0 or o + n > self.max_stack:
            raise SafetyFault(pc, f"helper argument r{r} [{o},{o + n}) outside the stack")
        if not all(self.stack_init[o:o + n]):
            raise SafetyFault(pc, f"helper argument r{r} reads uninitialized stack")
        return bytes(p.buf[o:o + n])

    def _map(self, pc: int) -> MapInstance:
        h = self.get(1, pc)
        if not isinstance(h, MapHandle):
            raise SafetyFault(pc, "helper argument r1 is not a map handle")
        return self.maps[h.slot]

    def call(self, hid: int, pc: int):
        if hid not in self.allowed:
            raise SafetyFault(pc, f"helper {hid} not whitelisted")
        self.helper_calls[hid] += 1
        if hid == HELPER_MAP_LOOKUP:
            m = self._map(pc)
            v = m.lookup_ref(self._stack_bytes(2, m.key_size, pc))
            if v is None:
                return 0
            self.regions.append(v)
            return Ptr("map", len(self.regions) - 1, v, 0, m.name)
        if hid == HELPER_MAP_UPDATE:
            m = self._map(pc)
            key = self._stack_bytes(2, m.key_size, pc)
            value = self._stack_bytes(3, m.value_size, pc)
            flags = self.get(4, pc)
            if not isinstance(flags, int):
                raise SafetyFault(pc, "flags must be a scalar")
            return _helper_update(m, key, value, flags)
        if hid == HELPER_MAP_DELETE:
            m = self._map(pc)
            return _helper_delete(m, self._stack_bytes(2, m.key_size, pc))
        if hid == HELPER_TRACE_LOG:
            v = self.get(1, pc)
            if not isinstance(v, int):
                raise SafetyFault(pc, "trace_log argument must be a scalar")
            self.ring.append(v)
            return 0
        raise SafetyFault(pc, f"unknown helper {hid}")

    def cond(self, i: Instruction, pc: int) -> bool:
        a = self.get(i.dst, pc)
        b = self.get(i.src, pc) if i.reg_src else i.imm & M64
        if isinstance(a, MapHandle) or isinstance(b, MapHandle):
            raise SafetyFault(pc, "comparison on a map handle")
        a = a.addr if isinstance(a, Ptr) else a
        b = b.addr if isinstance(b, Ptr) else b
        return compare(i.op, a, b)


def alu64(op: Op, a: int, b: int) -> int:
    """Reference 64-bit ALU semantics on unsigned operands."""
    if op is Op.ADD:
        return (a + b) & M64
    if op is Op.SUB:
        return (a - b) & M64
    if op is Op.MUL:
        return (a * b) & M64
    if op is Op.DIV:
        return a // b
    if op is Op.MOD:
        return a % b
    if op is Op.AND:
        return a & b
    if op is Op.OR:
        return a | b
    if op is Op.XOR:
        return a ^ b
    if op is Op.LSH:
        return (a << (b & 63)) & M64
    if op is Op.RSH:
        return a >> (b & 63)
    if op is Op.ARSH:
        return (_s64(a) >> (b & 63)) & M64
    if op is Op.MOV:
        return b
    raise ValueError(op)


_CMP_FN = {Op.JEQ: operator.eq, Op.JNE: operator.ne, Op.JGT: operator.gt,
           Op.JGE: operator.ge, Op.JLT: operator.lt, Op.JLE: operator.le,
           Op.JSGT: operator.gt, Op.JSGE: operator.ge, Op.JSLT: operator.lt,
           Op.JSLE: operator.le}


def compare(op: Op, a: int, b: int) -> bool:
    if op in _SIGNED_JUMPS:
        a, b = _s64(a), _s64(b)
    return _CMP_FN[op](a, b)


# -- public entry points -----------------------------------------------------------

@dataclass
class ExecutionEnv:
    context: bytearray
    registry: MapRegistry
    layout: ContextLayout | None = None
    helpers: HelperTable = field(default_factory=HelperTable)
    mode: Mode = Mode.FAST
    max_stack: int = 512
    max_steps: int = 1_000_000
    ring: TraceRing = field(default_factory=TraceRing)


def execute(program: Program, env: ExecutionEnv) -> int:
    """Run ``program`` once against ``env.context``; returns r0."""
    if env.mode is Mode.FAST:
        return PreparedProgram(program, env.registry.resolve(program), env.ring,
                               env.max_stack).run(env.context)
    interp = CheckedInterpreter(program, env.registry.resolve(program),
                                env.layout or layout_for(program.hook),
                                env.helpers.allowed(program.hook), env.max_stack,
                                env.max_steps, env.ring)
    return interp.run(env.context)


_INTERESTING_U64 = (0, 1, 2, 4, 16, 32768, 32769, 1 << 20, 4 << 20, 1 << 31, UNSET32,
                    1 << 32, (1 << 63) - 1, 1 << 63, M64)


def random_context(layout: ContextLayout, rng: random.Random) -> bytearray:
    """Random record with a bias towards small keys and boundary values."""
    buf = bytearray(rng.randbytes(layout.size))
    for f in layout.fields:
        roll = rng.random()
        if roll < 0.4:
            v = rng.randrange(8)
        elif roll < 0.7:
            v = rng.choice(_INTERESTING_U64)
        else:
            continue
        buf[f.offset:f.offset + f.width] = (v & _WMASK[f.width]).to_bytes(f.width, "little")
    return buf


def random_maps(program: Program, rng: random.Random) -> MapRegistry:
    reg = MapRegistry()
    for inst in reg.resolve(program):
        if isinstance(inst, mapsmod.ArrayMap):
            for idx in range(min(inst.max_entries, 16)):
                if rng.random() < 0.7:
                    inst.update(idx.to_bytes(4, "little"), rng.randbytes(inst.value_size))
        else:
            for _ in range(rng.randrange(min(inst.max_entries, 8) + 1)):
                key = rng.randrange(8).to_bytes(inst.key_size, "little")
                try:
                    inst.update(key, rng.randbytes(inst.value_size))
                except MapError:
                    break
    return reg


def execute_checked_fuzz(program: Program, trials: int, seed: int,
                         config: VerifierConfig | None = None) -> int:
    """Run ``trials`` CHECKED executions on random contexts and maps; count faults."""
    config = config or VerifierConfig()
    rng = random.Random(seed)
    layout = layout_for(program.hook)
    allowed = config.helpers_for(program.hook)
    faults = 0
    for _ in range(trials):
        reg = random_maps(program, rng)
        ctx = random_context(layout, rng)
        interp = CheckedInterpreter(program, reg.resolve(program), layout, allowed,
                                    config.max_stack, config.max_total_instructions)
        try:
            interp.run(ctx)
        except SafetyFault:
            faults += 1
    return faults


def verified_prepare(program: Program, registry: MapRegistry,
                     config: VerifierConfig | None = None) -> PreparedProgram:
    """Verify then prepare; raises ValueError on rejection."""
    config = config or VerifierConfig()
    verdict = verify(program, config)
    if not verdict.accepted:
        raise ValueError(verdict.message)
    return prepare(program, registry, max_stack=config.max_stack, verdict=verdict)
