"""Policy instruction set, program container and the ``.cclpol`` text format.

The instruction set is the 64-bit core of eBPF: ALU64 operations in register
and immediate forms, LDX/STX/ST memory access with 1/2/4/8 byte widths,
conditional and unconditional jumps, helper CALL, LD_MAP and EXIT.

Text format, one instruction per line, ``;`` starts a comment::

    .name size_aware
    .hook tuner
    .map latency_map hash key=4 value=32 entries=64

        ldxw r2, [r1+20]
        stxw [r10-4], r2
        ld_map r1, latency_map
        mov r2, r10
        add r2, -4
        call 1
        jne r0, 0, have_state
        mov r0, 0
        exit
    have_state:
        ...

Jump offsets count instructions relative to the next instruction.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from pathlib import Path

MAX_INSNS = 65536
NUM_REGS = 11
FRAME_REG = 10


class ParseError(ValueError):
    def __init__(self, line: int, col: int, message: str):
        self.line = line
        self.col = col
        self.message = message
        super().__init__(f"{line}:{col}: {message}")


class Op(enum.Enum):
    MOV = "mov"
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    DIV = "div"
    MOD = "mod"
    AND = "and"
    OR = "or"
    XOR = "xor"
    LSH = "lsh"
    RSH = "rsh"
    ARSH = "arsh"
    NEG = "neg"
    LDX = "ldx"
    STX = "stx"
    ST = "st"
    JA = "ja"
    JEQ = "jeq"
    JNE = "jne"
    JGT = "jgt"
    JGE = "jge"
    JLT = "jlt"
    JLE = "jle"
    JSGT = "jsgt"
    JSGE = "jsge"
    JSLT = "jslt"
    JSLE = "jsle"
    CALL = "call"
    LD_MAP = "ld_map"
    EXIT = "exit"

    # members are singletons compared by identity; the inherited name hash
    # is a Python-level call on every set or dict probe in the interpreters
    __hash__ = object.__hash__


ALU_OPS = frozenset({Op.MOV, Op.ADD, Op.SUB, Op.MUL, Op.DIV, Op.MOD, Op.AND,
                     Op.OR, Op.XOR, Op.LSH, Op.RSH, Op.ARSH})
MEM_OPS = frozenset({Op.LDX, Op.STX, Op.ST})
COND_JUMPS = frozenset({Op.JEQ, Op.JNE, Op.JGT, Op.JGE, Op.JLT, Op.JLE,
                        Op.JSGT, Op.JSGE, Op.JSLT, Op.JSLE})
JUMP_OPS = COND_JUMPS | {Op.JA}

WIDTH_SUFFIX = {1: "b", 2: "h", 4: "w", 8: "dw"}
SUFFIX_WIDTH = {v: k for k, v in WIDTH_SUFFIX.items()}


class Hook(enum.Enum):
    TUNER = "tuner"
    PROFILER = "profiler"
    NET_TX = "net_tx"
    NET_RX = "net_rx"

    __hash__ = object.__hash__


class MapKind(enum.Enum):
    ARRAY = "array"
    HASH = "hash"


@dataclass(frozen=True)
class Instruction:
    op: Op
    dst: int = 0
    src: int = 0
    offset: int = 0
    imm: int = 0
    reg_src: bool = False
    width: int = 0

    @property
    def is_jump(self) -> bool:
        return self.op in JUMP_OPS

    def target(self, pc: int) -> int:
        return pc + 1 + self.offset


@dataclass(frozen=True)
class MapDescriptor:
    name: str
    kind: MapKind
    key_size: int
    value_size: int
    max_entries: int

    def __post_init__(self):
        if self.key_size < 1 or self.value_size < 1 or self.max_entries < 1:
            raise ValueError(f"map {self.name!r}: sizes and max_entries must be >= 1")
        if self.kind is MapKind.ARRAY and self.key_size != 4:
            raise ValueError(f"array map {self.name!r} requires key_size=4, got {self.key_size}")


@dataclass(frozen=True)
class Program:
    name: str
    hook: Hook
    instructions: tuple[Instruction, ...]
    maps: tuple[MapDescriptor, ...] = ()
    source: str | None = field(default=None, compare=False, repr=False)

    @property
    def map_slots(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.maps)

    def __len__(self):
        return len(self.instructions)

    def helper_calls(self, helper_id: int) -> int:
        """Static count of call sites for ``helper_id``."""
        return sum(1 for i in self.instructions if i.op is Op.CALL and i.imm == helper_id)


# -- assembler ---------------------------------------------------------------

_IDENT = r"[A-Za-z_][A-Za-z0-9_]*"
_LABEL_RE = re.compile(rf"^\s*({_IDENT})\s*:")
_MEM_RE = re.compile(r"^\[\s*(r\d+)\s*(?:([+-])\s*(\w+))?\s*\]$")
_MAP_OPT_RE = re.compile(r"^(key|value|entries)=(\d+)$")


def _strip_comment(line: str) -> str:
    i = line.find(";")
    return line if i < 0 else line[:i]


def _split_operands(text: str) -> list[str]:
    # commas inside [...] never occur, so a flat split is enough
    return [t.strip() for t in text.split(",")] if text.strip() else []


class _Line:
    def __init__(self, lineno: int, raw: str, col: int):
        self.lineno = lineno
        self.raw = raw
        self.col = col

    def error(self, message: str, token: str | None = None) -> ParseError:
        col = self.col
        if token:
            idx = self.raw.find(token)
            if idx >= 0:
                col = idx + 1
        return ParseError(self.lineno, col, message)


def _parse_int(tok: str, ln: _Line, what: str = "integer") -> int:
    try:
        return int(tok, 0)
    except ValueError:
        raise ln.error(f"bad {what} {tok!r}", tok) from None


def _parse_reg(tok: str, ln: _Line) -> int:
    m = re.fullmatch(r"r(\d+)", tok)
    if not m:
        raise ln.error(f"bad register {tok!r}", tok)
    n = int(m.group(1))
    if n >= NUM_REGS:
        raise ln.error(f"bad register {tok!r}: only r0-r10 exist", tok)
    return n


def _parse_imm32(tok: str, ln: _Line) -> int:
    v = _parse_int(tok, ln, "immediate")
    if not -(1 << 31) <= v < (1 << 32):
        raise ln.error(f"immediate {tok} does not fit in 32 bits", tok)
    if v >= 1 << 31:
        v -= 1 << 32
    return v


def _parse_mem(tok: str, ln: _Line) -> tuple[int, int]:
    m = _MEM_RE.match(tok)
    if not m:
        raise ln.error(f"bad memory operand {tok!r}", tok)
    reg = _parse_reg(m.group(1), ln)
    off = 0
    if m.group(2):
        off = _parse_int(m.group(3), ln, "displacement")
        if m.group(2) == "-":
            off = -off
    if not -(1 << 15) <= off < (1 << 15):
        raise ln.error(f"displacement {off} does not fit in 16 bits", tok)
    return reg, off


def _is_reg(tok: str) -> bool:
    return re.fullmatch(r"r\d+", tok) is not None


def _split_width(mnemonic: str, prefix: str) -> int | None:
    rest = mnemonic[len(prefix):]
    return SUFFIX_WIDTH.get(rest)


def assemble(source: str, name: str | None = None) -> Program:
    """Parse ``.cclpol`` text into a :class:`Program`.

    Raises :class:`ParseError` carrying line and column on any syntax problem.
    """
    prog_name = name
    hook = Hook.TUNER
    maps: dict[str, MapDescriptor] = {}
    pending: list[tuple[_Line, str, list[str]]] = []
    labels: dict[str, int] = {}

    for lineno, raw in enumerate(source.splitlines(), start=1):
        text = _strip_comment(raw)
        while True:
            m = _LABEL_RE.match(text)
            if not m:
                break
            label = m.group(1)
            if label in labels:
                raise ParseError(lineno, m.start(1) + 1, f"duplicate label {label!r}")
            labels[label] = len(pending)
            text = text[m.end():]
        body = text.strip()
        if not body:
            continue
        ln = _Line(lineno, raw, raw.find(body) + 1)
        head, _, tail = body.partition(" ")
        head = head.strip()
        if head.startswith("."):
            args = tail.split()
            if head == ".name":
                if len(args) != 1 or not re.fullmatch(_IDENT, args[0]):
                    raise ln.error(".name expects one identifier")
                prog_name = args[0]
            elif head == ".hook":
                if len(args) != 1:
                    raise ln.error(".hook expects one of tuner|profiler|net_tx|net_rx")
                try:
                    hook = Hook(args[0])
                except ValueError:
                    raise ln.error(f"unknown hook {args[0]!r}", args[0]) from None
            elif head == ".map":
                maps_decl = _parse_map(args, ln)
                if maps_decl.name in maps:
                    raise ln.error(f"duplicate map name {maps_decl.name!r}", maps_decl.name)
                maps[maps_decl.name] = maps_decl
            else:
                raise ln.error(f"unknown directive {head!r}", head)
            continue
        pending.append((ln, head.lower(), _split_operands(tail)))

    if not pending:
        raise ParseError(1, 1, "program has no instructions")
    if len(pending) > MAX_INSNS:
        raise ParseError(pending[MAX_INSNS][0].lineno, 1,
                         f"program exceeds {MAX_INSNS} instructions")

    slot_of = {n: i for i, n in enumerate(maps)}
    insns = [_encode(pc, ln, mn, ops, labels, slot_of) for pc, (ln, mn, ops) in enumerate(pending)]
    return Program(name=prog_name or "policy", hook=hook, instructions=tuple(insns),
                   maps=tuple(maps.values()), source=source)


def _parse_map(args: list[str], ln: _Line) -> MapDescriptor:
    if len(args) != 5:
        raise ln.error(".map expects: <name> array|hash key=<n> value=<n> entries=<n>")
    name, kind_tok = args[0], args[1]
    if not re.fullmatch(_IDENT, name):
        raise ln.error(f"bad map name {name!r}", name)
    try:
        kind = MapKind(kind_tok)
    except ValueError:
        raise ln.error(f"unknown map kind {kind_tok!r}", kind_tok) from None
    opts = {}
    for tok in args[2:]:
        m = _MAP_OPT_RE.match(tok)
        if not m:
            raise ln.error(f"bad map option {tok!r}", tok)
        opts[m.group(1)] = int(m.group(2))
    if set(opts) != {"key", "value", "entries"}:
        raise ln.error(".map needs key=, value= and entries=")
    try:
        return MapDescriptor(name, kind, opts["key"], opts["value"], opts["entries"])
    except ValueError as exc:
        raise ln.error(str(exc)) from None


def _jump_offset(tok: str, pc: int, ln: _Line, labels: dict[str, int]) -> int:
    if tok[:1] in "+-" and tok[1:].isdigit():
        off = int(tok)
    elif re.fullmatch(_IDENT, tok):
        if tok not in labels:
            raise ln.error(f"unresolved label {tok!r}", tok)
        off = labels[tok] - (pc + 1)
    else:
        raise ln.error(f"bad jump target {tok!r}", tok)
    if not -(1 << 15) <= off < (1 << 15):
        raise ln.error(f"jump to {tok!r} out of 16-bit range", tok)
    return off


def _want(ops: list[str], n: int, mn: str, ln: _Line):
    if len(ops) != n:
        raise ln.error(f"{mn} expects {n} operand(s), got {len(ops)}")


def _encode(pc, ln, mn, ops, labels, slot_of) -> Instruction:
    try:
        op = Op(mn)
    except ValueError:
        op = None

    if op in ALU_OPS:
        _want(ops, 2, mn, ln)
        dst = _parse_reg(ops[0], ln)
        if _is_reg(ops[1]):
            return Instruction(op, dst=dst, src=_parse_reg(ops[1], ln), reg_src=True)
        return Instruction(op, dst=dst, imm=_parse_imm32(ops[1], ln))
    if op is Op.NEG:
        _want(ops, 1, mn, ln)
        return Instruction(op, dst=_parse_reg(ops[0], ln))
    if op is Op.JA:
        _want(ops, 1, mn, ln)
        return Instruction(op, offset=_jump_offset(ops[0], pc, ln, labels))
    if op in COND_JUMPS:
        _want(ops, 3, mn, ln)
        dst = _parse_reg(ops[0], ln)
        off = _jump_offset(ops[2], pc, ln, labels)
        if _is_reg(ops[1]):
            return Instruction(op, dst=dst, src=_parse_reg(ops[1], ln), offset=off, reg_src=True)
        return Instruction(op, dst=dst, imm=_parse_imm32(ops[1], ln), offset=off)
    if op is Op.CALL:
        _want(ops, 1, mn, ln)
        return Instruction(op, imm=_parse_imm32(ops[0], ln))
    if op is Op.LD_MAP:
        _want(ops, 2, mn, ln)
        dst = _parse_reg(ops[0], ln)
        if ops[1] not in slot_of:
            raise ln.error(f"undeclared map {ops[1]!r}", ops[1])
        return Instruction(op, dst=dst, imm=slot_of[ops[1]])
    if op is Op.EXIT:
        _want(ops, 0, mn, ln)
        return Instruction(op)

    # memory ops carry the width in the mnemonic: ldxw, stxdw, stb, ...
    for prefix, mop in (("ldx", Op.LDX), ("stx", Op.STX), ("st", Op.ST)):
        if mn.startswith(prefix):
            width = _split_width(mn, prefix)
            if width is None:
                continue
            _want(ops, 2, mn, ln)
            if mop is Op.LDX:
                dst = _parse_reg(ops[0], ln)
                src, off = _parse_mem(ops[1], ln)
                return Instruction(mop, dst=dst, src=src, offset=off, width=width, reg_src=True)
            dst, off = _parse_mem(ops[0], ln)
            if mop is Op.STX:
                return Instruction(mop, dst=dst, src=_parse_reg(ops[1], ln), offset=off,
                                   width=width, reg_src=True)
            return Instruction(mop, dst=dst, offset=off, imm=_parse_imm32(ops[1], ln), width=width)
    raise ln.error(f"unknown mnemonic {mn!r}", mn)


def load_file(path: str | Path) -> Program:
    path = Path(path)
    return assemble(path.read_text(), name=path.stem)


# -- disassembler ------------------------------------------------------------

def _mem(reg: int, off: int) -> str:
    if off == 0:
        return f"[r{reg}]"
    return f"[r{reg}{off:+d}]"


def format_instruction(insn: Instruction, pc: int | None = None,
                       labels: dict[int, str] | None = None,
                       map_slots: tuple[str, ...] = ()) -> str:
    op = insn.op
    if op in ALU_OPS:
        rhs = f"r{insn.src}" if insn.reg_src else str(insn.imm)
        return f"{op.value} r{insn.dst}, {rhs}"
    if op is Op.NEG:
        return f"neg r{insn.dst}"
    if op in JUMP_OPS:
        tgt = f"{insn.offset:+d}"
        if pc is not None and labels is not None:
            tgt = labels.get(insn.target(pc), tgt)
        if op is Op.JA:
            return f"ja {tgt}"
        rhs = f"r{insn.src}" if insn.reg_src else str(insn.imm)
        return f"{op.value} r{insn.dst}, {rhs}, {tgt}"
    if op is Op.LDX:
        return f"ldx{WIDTH_SUFFIX[insn.width]} r{insn.dst}, {_mem(insn.src, insn.offset)}"
    if op is Op.STX:
        return f"stx{WIDTH_SUFFIX[insn.width]} {_mem(insn.dst, insn.offset)}, r{insn.src}"
    if op is Op.ST:
        return f"st{WIDTH_SUFFIX[insn.width]} {_mem(insn.dst, insn.offset)}, {insn.imm}"
    if op is Op.CALL:
        return f"call {insn.imm}"
    if op is Op.LD_MAP:
        name = map_slots[insn.imm] if 0 <= insn.imm < len(map_slots) else f"<slot{insn.imm}>"
        return f"ld_map r{insn.dst}, {name}"
    return "exit"


def disassemble(program: Program) -> str:
    """Render ``program`` as ``.cclpol`` text that assembles back to it."""
    n = len(program.instructions)
    targets = sorted({i.target(pc) for pc, i in enumerate(program.instructions)
                      if i.is_jump and 0 <= i.target(pc) < n})
    labels = {t: f"L{t}" for t in targets}
    lines = []
    header = bool(program.maps) or program.hook is not Hook.TUNER or program.name != "policy"
    if header:
        lines.append(f".name {program.name}")
        lines.append(f".hook {program.hook.value}")
        for m in program.maps:
            lines.append(f".map {m.name} {m.kind.value} key={m.key_size} "
                         f"value={m.value_size} entries={m.max_entries}")
    for pc, insn in enumerate(program.instructions):
        if pc in labels:
            lines.append(f"{labels[pc]}:")
        text = format_instruction(insn, pc, labels, program.map_slots)
        lines.append(f"    {text}" if header or labels else text)
    return "\n".join(lines)
