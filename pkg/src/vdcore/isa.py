"""Micro-op instruction set: opcodes, the 16-byte instruction word, handler
registration and stream validation.

Binary layout (little endian, 16 bytes)::

    byte  0      opcode (0 is reserved/invalid)
    byte  1      bits 0-3 flags, bits 4-5 lane, bits 6-7 address kind
    bytes 2-3    dep_id
    byte  4      virtual_flow_id
    bytes 5-11   address payload, or the 32-bit immediate when no address
    bytes 12-13  size
    byte  14/15  reg_ops[0], reg_ops[1]

Address payloads: literal = tensor(u8) + offset(u48); coord = tensor(u8) +
rank-1 (2 bits) + four 11-bit coordinates; descriptor = index(u16).
"""

from __future__ import annotations

import enum
import re
import struct
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence, Union

WORD_BYTES = 16
NUM_ACC = 8
MAX_LANES = 4
COORD_BITS = 11
MAX_RANK = 4


class IsaError(ValueError):
    """Base class for instruction-set errors."""


class EncodeError(IsaError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class DecodeError(IsaError):
    def __init__(self, offset: int, message: str):
        super().__init__(f"byte {offset}: {message}")
        self.offset = offset


class HandlerError(IsaError):
    pass


class OpClass(enum.Enum):
    MEMORY = "memory"
    COMPUTE = "compute"
    CONTROL = "control"


class Opcode(enum.IntEnum):
    # memory
    LOAD = 1
    STORE = 2
    LOAD_DEP = 3
    STORE_DEP = 4
    LOAD_LOCAL = 5
    STORE_LOCAL = 6
    ALLOC = 7
    FREE = 8
    # compute
    MATVEC = 16
    GEMM_TILE = 17
    ATTN = 18
    ROPE = 19
    RMSNORM = 20
    ELEMWISE = 21
    EMBED = 22
    # control
    LOOP = 32
    REPEAT = 33
    CONTINUE_IF = 34
    SET_ACC = 35
    ADD_ACC = 36
    HALT = 37

    @property
    def op_class(self) -> OpClass:
        if self.value < 16:
            return OpClass.MEMORY
        if self.value < 32:
            return OpClass.COMPUTE
        return OpClass.CONTROL


LOADS = frozenset({Opcode.LOAD, Opcode.LOAD_DEP, Opcode.LOAD_LOCAL})
STORES = frozenset({Opcode.STORE, Opcode.STORE_DEP, Opcode.STORE_LOCAL})
# producer / consumer side of a dep_id queue
DEP_PRODUCERS = frozenset({Opcode.STORE_DEP, Opcode.STORE_LOCAL})
DEP_CONSUMERS = frozenset({Opcode.LOAD_DEP, Opcode.LOAD_LOCAL})
LOCAL_OPS = frozenset({Opcode.LOAD_LOCAL, Opcode.STORE_LOCAL})


class Flag(enum.IntFlag):
    SEND = 1
    RECV = 2
    DYNAMIC = 4
    LAST = 8


# ---------------------------------------------------------------------------
# addresses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Literal:
    tensor: int
    offset: int


@dataclass(frozen=True)
class Coord:
    tensor: int
    coord: tuple

    def __post_init__(self):
        object.__setattr__(self, "coord", tuple(int(c) for c in self.coord))


@dataclass(frozen=True)
class DescriptorIndex:
    index: int


AddressSpec = Union[Literal, Coord, DescriptorIndex]

_ADDR_KIND = {type(None): 0, Literal: 1, Coord: 2, DescriptorIndex: 3}


def address_offset(addr: AddressSpec | None) -> int:
    """The scalar component that dynamic addressing advances."""
    if addr is None:
        return 0
    if isinstance(addr, Literal):
        return addr.offset
    if isinstance(addr, Coord):
        return addr.coord[0]
    return addr.index


def with_address_offset(addr: AddressSpec, value: int) -> AddressSpec:
    if isinstance(addr, Literal):
        return Literal(addr.tensor, value)
    if isinstance(addr, Coord):
        return Coord(addr.tensor, (value,) + addr.coord[1:])
    return DescriptorIndex(value)


def address_tensor(addr: AddressSpec | None) -> int | None:
    if isinstance(addr, (Literal, Coord)):
        return addr.tensor
    return None


# ---------------------------------------------------------------------------
# the instruction word
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UopWord:
    opcode: Opcode
    flags: Flag = Flag(0)
    dep_id: int = 0
    flow: int = 0
    address: AddressSpec | None = None
    size: int = 0
    reg_ops: tuple = (0, 0)
    imm: int = 0
    # local compute core targeted by SEND/RECV when a VMC serves several VCCs
    lane: int = 0

    @property
    def op_class(self) -> OpClass:
        return Opcode(self.opcode).op_class

    def check(self) -> None:
        """Raise :class:`EncodeError` if the word violates an invariant."""
        try:
            op = Opcode(self.opcode)
        except ValueError:
            raise EncodeError("opcode", f"unknown opcode {self.opcode!r}") from None
        _range("dep_id", self.dep_id, 0, 0xFFFF)
        _range("flow", self.flow, 0, 0xFF)
        _range("size", self.size, 0, 0xFFFF)
        _range("lane", self.lane, 0, MAX_LANES - 1)
        if len(self.reg_ops) != 2:
            raise EncodeError("reg_ops", "exactly two register slots")
        for r in self.reg_ops:
            _range("reg_ops", r, 0, 0xFF)
        _range("imm", self.imm, -(1 << 31), (1 << 31) - 1)
        flags = Flag(self.flags)
        if Flag.SEND in flags and Flag.RECV in flags:
            raise EncodeError("flags", "SEND and RECV are mutually exclusive")
        cls = op.op_class
        if cls is not OpClass.MEMORY:
            if flags & (Flag.SEND | Flag.RECV):
                raise EncodeError("flags", f"{op.name} cannot carry SEND/RECV")
            if self.dep_id:
                raise EncodeError("dep_id", f"{op.name} cannot carry a dep_id")
            if self.address is not None:
                raise EncodeError("address", f"{op.name} takes no address")
        if Flag.DYNAMIC in flags:
            if self.address is None and not self.dep_id:
                raise EncodeError("flags", "DYNAMIC needs an address or dep_id to offset")
            for r in self.reg_ops:
                _range("reg_ops", r, 0, NUM_ACC - 1)
        if self.address is not None and self.imm:
            raise EncodeError("imm", "immediate shares storage with the address")
        addr = self.address
        if isinstance(addr, Literal):
            _range("address.tensor", addr.tensor, 0, 0xFF)
            _range("address.offset", addr.offset, 0, (1 << 48) - 1)
        elif isinstance(addr, Coord):
            _range("address.tensor", addr.tensor, 0, 0xFF)
            if not 1 <= len(addr.coord) <= MAX_RANK:
                raise EncodeError("address.coord", f"rank {len(addr.coord)} outside 1..{MAX_RANK}")
            for c in addr.coord:
                _range("address.coord", c, 0, (1 << COORD_BITS) - 1)
        elif isinstance(addr, DescriptorIndex):
            _range("address.index", addr.index, 0, 0xFFFF)
        elif addr is not None:
            raise EncodeError("address", f"unsupported address {addr!r}")


def _range(name: str, value, lo: int, hi: int) -> None:
    if not isinstance(value, int) or isinstance(value, bool) or not lo <= value <= hi:
        raise EncodeError(name, f"{value!r} outside [{lo}, {hi}]")


def encode_uop(u: UopWord) -> bytes:
    u.check()
    kind = _ADDR_KIND[type(u.address)]
    head = struct.pack(
        "<BBHB",
        int(u.opcode),
        int(u.flags) | (u.lane << 4) | (kind << 6),
        u.dep_id,
        u.flow,
    )
    addr = u.address
    if addr is None:
        payload = struct.pack("<i", u.imm) + b"\x00\x00\x00"
    elif isinstance(addr, Literal):
        payload = bytes([addr.tensor]) + addr.offset.to_bytes(6, "little")
    elif isinstance(addr, Coord):
        packed = len(addr.coord) - 1
        for i, c in enumerate(addr.coord):
            packed |= c << (2 + COORD_BITS * i)
        payload = bytes([addr.tensor]) + packed.to_bytes(6, "little")
    else:
        payload = struct.pack("<H", addr.index) + b"\x00" * 5
    tail = struct.pack("<HBB", u.size, u.reg_ops[0], u.reg_ops[1])
    word = head + payload + tail
    assert len(word) == WORD_BYTES
    return word


def decode_uop(w: bytes) -> UopWord:
    if len(w) != WORD_BYTES:
        raise DecodeError(0, f"expected {WORD_BYTES} bytes, got {len(w)}")
    opcode, fl, dep_id, flow = struct.unpack_from("<BBHB", w, 0)
    if opcode == 0:
        raise DecodeError(0, "opcode 0 is reserved")
    try:
        op = Opcode(opcode)
    except ValueError:
        raise DecodeError(0, f"unknown opcode 0x{opcode:02x}") from None
    flags = Flag(fl & 0xF)
    lane = (fl >> 4) & 0x3
    kind = fl >> 6
    payload = w[5:12]
    imm = 0
    addr: AddressSpec | None = None
    if kind == 0:
        (imm,) = struct.unpack_from("<i", payload, 0)
        if any(payload[4:]):
            raise DecodeError(9, "nonzero padding after immediate")
    elif kind == 1:
        addr = Literal(payload[0], int.from_bytes(payload[1:], "little"))
    elif kind == 2:
        packed = int.from_bytes(payload[1:], "little")
        rank = (packed & 0x3) + 1
        mask = (1 << COORD_BITS) - 1
        coords = tuple((packed >> (2 + COORD_BITS * i)) & mask for i in range(MAX_RANK))
        if any(coords[rank:]) or packed >> (2 + COORD_BITS * MAX_RANK):
            raise DecodeError(6, "coordinate bits beyond declared rank")
        addr = Coord(payload[0], coords[:rank])
    else:
        (index,) = struct.unpack_from("<H", payload, 0)
        if any(payload[2:]):
            raise DecodeError(7, "nonzero padding after descriptor index")
        addr = DescriptorIndex(index)
    size, r0, r1 = struct.unpack_from("<HBB", w, 12)
    u = UopWord(op, flags, dep_id, flow, addr, size, (r0, r1), imm, lane)
    try:
        u.check()
    except EncodeError as exc:
        raise DecodeError(1, f"invalid word: {exc}") from None
    return u


def encode_stream(stream: Iterable[UopWord]) -> bytes:
    return b"".join(encode_uop(u) for u in stream)


def decode_stream(data: bytes) -> list[UopWord]:
    if len(data) % WORD_BYTES:
        raise DecodeError(len(data), "stream length is not a multiple of the word size")
    out = []
    for i in range(0, len(data), WORD_BYTES):
        try:
            out.append(decode_uop(data[i:i + WORD_BYTES]))
        except DecodeError as exc:
            raise DecodeError(i + exc.offset, str(exc).split(": ", 1)[1]) from None
    return out


# ---------------------------------------------------------------------------
# handler registration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HandlerSpec:
    """A registered device-side handler and the queues it touches."""

    fn: Callable
    op_class: OpClass
    pops_m2c: bool = False
    pushes_c2m: bool = False
    pushes_m2c: bool = False

    @property
    def name(self) -> str:
        return getattr(self.fn, "__name__", repr(self.fn))


class HandlerTable:
    def __init__(self):
        self._handlers: dict[Opcode, HandlerSpec] = {}

    def register(self, op: Opcode, spec: HandlerSpec) -> "HandlerTable":
        op = Opcode(op)
        if op in self._handlers:
            raise HandlerError(f"{op.name} already has handler {self._handlers[op].name}")
        if spec.op_class is not op.op_class:
            raise HandlerError(
                f"{op.name} is a {op.op_class.value} opcode, handler declares {spec.op_class.value}")
        self._handlers[op] = spec
        return self

    def __getitem__(self, op: Opcode) -> HandlerSpec:
        return self._handlers[Opcode(op)]

    def __contains__(self, op) -> bool:
        return Opcode(op) in self._handlers

    def __len__(self) -> int:
        return len(self._handlers)

    def opcodes(self) -> list[Opcode]:
        return sorted(self._handlers)


# ---------------------------------------------------------------------------
# control-flow interpretation
# ---------------------------------------------------------------------------

class ControlError(IsaError):
    pass


def loop_structure(stream: Sequence[UopWord]) -> dict[int, int]:
    """Map each LOOP index to its REPEAT index (and back). Raises on imbalance."""
    pairs: dict[int, int] = {}
    stack = []
    for i, u in enumerate(stream):
        if u.opcode == Opcode.LOOP:
            stack.append(i)
        elif u.opcode == Opcode.REPEAT:
            if not stack:
                raise ControlError(f"REPEAT at {i} without LOOP")
            j = stack.pop()
            pairs[j] = i
            pairs[i] = j
    if stack:
        raise ControlError(f"LOOP at {stack[-1]} without REPEAT")
    return pairs


def resolve_dynamic(u: UopWord, acc: Sequence[int]) -> UopWord:
    """Apply accumulator offsets to a DYNAMIC word, returning a static one."""
    if Flag.DYNAMIC not in Flag(u.flags):
        return u
    addr = u.address
    if addr is not None:
        addr = with_address_offset(addr, address_offset(addr) + acc[u.reg_ops[0]])
    dep = u.dep_id + acc[u.reg_ops[1]] if u.dep_id else 0
    return replace(u, flags=Flag(u.flags) & ~Flag.DYNAMIC, address=addr, dep_id=dep, reg_ops=(0, 0))


def unfold(stream: Sequence[UopWord], max_steps: int = 10_000_000,
           include_control: bool = False) -> list[tuple[int, UopWord]]:
    """Interpret control µops and return ``(static index, resolved word)`` pairs
    for every memory/compute µop in execution order.

    With ``include_control`` the executed control µops are listed too, so the
    result has one entry per CFU issue.
    """
    pairs = loop_structure(stream)
    acc = [0] * NUM_ACC
    frames: list[list[int]] = []  # [loop index, remaining]
    out: list[tuple[int, UopWord]] = []
    pc = 0
    steps = 0
    while pc < len(stream):
        steps += 1
        if steps > max_steps:
            raise ControlError("control flow did not terminate")
        u = stream[pc]
        op = u.opcode
        if include_control and op >= Opcode.LOOP:
            out.append((pc, u))
        if op == Opcode.SET_ACC:
            acc[u.reg_ops[0]] = u.imm
        elif op == Opcode.ADD_ACC:
            acc[u.reg_ops[0]] += u.imm
        elif op == Opcode.LOOP:
            if u.imm <= 0:
                pc = pairs[pc] + 1
                continue
            frames.append([pc, u.imm])
        elif op == Opcode.REPEAT:
            frame = frames[-1]
            frame[1] -= 1
            if frame[1] > 0:
                pc = frame[0] + 1
                continue
            frames.pop()
        elif op == Opcode.CONTINUE_IF:
            if not acc[u.reg_ops[0]] < u.imm:
                if not frames:
                    raise ControlError(f"CONTINUE_IF at {pc} outside a loop")
                pc = pairs[frames.pop()[0]] + 1
                continue
        elif op == Opcode.HALT:
            break
        else:
            out.append((pc, resolve_dynamic(u, acc)))
        pc += 1
    return out


def flatten(stream: Sequence[UopWord]) -> list[UopWord]:
    return [u for _, u in unfold(stream)]


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def validate_stream(stream: Sequence[UopWord], kind: str | None = None,
                    program: Iterable[Sequence[UopWord]] | None = None,
                    tile_grids: dict[int, tuple] | None = None,
                    match_deps: bool = True) -> list[str]:
    """Collect invariant violations for one µop stream.

    ``kind`` ("vmc" or "vcc") enables class discipline; ``program`` supplies
    the other streams for dep-id matching (defaults to ``stream`` alone);
    ``tile_grids`` maps tensor id to tile-grid extents for coordinate bounds.
    """
    problems: list[str] = []
    for i, u in enumerate(stream):
        try:
            u.check()
        except EncodeError as exc:
            problems.append(f"uop {i}: {exc}")
            continue
        cls = u.op_class
        if kind == "vmc" and cls is OpClass.COMPUTE:
            problems.append(f"uop {i}: compute opcode {Opcode(u.opcode).name} in a VMC stream")
        if kind == "vcc" and cls is OpClass.MEMORY:
            problems.append(f"uop {i}: memory opcode {Opcode(u.opcode).name} in a VCC stream")
        if cls is OpClass.MEMORY and u.dep_id:
            if u.opcode not in DEP_PRODUCERS and u.opcode not in DEP_CONSUMERS:
                problems.append(f"uop {i}: {Opcode(u.opcode).name} cannot carry a dep_id")
        if u.opcode in DEP_PRODUCERS | DEP_CONSUMERS and not u.dep_id:
            problems.append(f"uop {i}: {Opcode(u.opcode).name} requires a dep_id")
        if tile_grids is not None and isinstance(u.address, Coord) and Flag.DYNAMIC not in Flag(u.flags):
            grid = tile_grids.get(u.address.tensor)
            if grid is None:
                problems.append(f"uop {i}: unknown tensor {u.address.tensor}")
            elif len(u.address.coord) != len(grid) or any(
                    c >= g for c, g in zip(u.address.coord, grid)):
                problems.append(f"uop {i}: coordinate {u.address.coord} outside tile grid {grid}")
    try:
        loop_structure(stream)
    except ControlError as exc:
        problems.append(f"unbalanced control: {exc}")
        return problems
    if not match_deps:
        return problems

    streams = [stream] if program is None else list(program)
    producers: dict[int, int] = {}
    consumers: dict[int, int] = {}
    try:
        for s in streams:
            for _, u in unfold(s):
                if not u.dep_id:
                    continue
                if u.opcode in DEP_PRODUCERS:
                    producers[u.dep_id] = producers.get(u.dep_id, 0) + 1
                elif u.opcode in DEP_CONSUMERS:
                    consumers[u.dep_id] = consumers.get(u.dep_id, 0) + 1
    except ControlError as exc:
        problems.append(f"unbalanced control: {exc}")
        return problems
    own = set()
    for _, u in unfold(stream):
        if u.dep_id and u.opcode in DEP_CONSUMERS:
            own.add(u.dep_id)
    for d in sorted(own):
        n = producers.get(d, 0)
        if n == 0:
            problems.append(f"dep {d}: consumer has no matching producer")
        elif n > 1:
            problems.append(f"dep {d}: multiple inter-memory deps into one consumer ({n} producers)")
        if consumers.get(d, 0) > 1:
            problems.append(f"dep {d}: consumed {consumers[d]} times")
    return problems


# ---------------------------------------------------------------------------
# textual assembly
# ---------------------------------------------------------------------------

def format_address(addr: AddressSpec | None) -> str:
    if addr is None:
        return "-"
    if isinstance(addr, Literal):
        return f"lit({addr.tensor}:{addr.offset})"
    if isinstance(addr, Coord):
        return f"coord({addr.tensor}:{','.join(map(str, addr.coord))})"
    return f"desc({addr.index})"


def parse_address(text: str) -> AddressSpec | None:
    if text == "-":
        return None
    m = re.fullmatch(r"(lit|coord|desc)\(([^)]*)\)", text)
    if not m:
        raise IsaError(f"bad address spec {text!r}")
    kind, body = m.groups()
    if kind == "desc":
        return DescriptorIndex(int(body))
    tensor, _, rest = body.partition(":")
    if kind == "lit":
        return Literal(int(tensor), int(rest))
    return Coord(int(tensor), tuple(int(c) for c in rest.split(",")))


def format_uop(u: UopWord) -> str:
    flags = "|".join(f.name for f in Flag if f in Flag(u.flags))
    parts = [Opcode(u.opcode).name, f"[{flags}]", f"dep={u.dep_id}", f"flow={u.flow}",
             f"addr={format_address(u.address)}", f"size={u.size}"]
    if u.lane:
        parts.append(f"lane={u.lane}")
    if u.reg_ops != (0, 0):
        parts.append(f"regs={u.reg_ops[0]},{u.reg_ops[1]}")
    if u.imm:
        parts.append(f"imm={u.imm}")
    return " ".join(parts)


def parse_uop(line: str) -> UopWord:
    tokens = line.split()
    if not tokens:
        raise IsaError("empty line")
    try:
        op = Opcode[tokens[0]]
    except KeyError:
        raise IsaError(f"unknown opcode {tokens[0]!r}") from None
    flags = Flag(0)
    kw: dict = {}
    for tok in tokens[1:]:
        if tok.startswith("["):
            for name in filter(None, tok.strip("[]").split("|")):
                flags |= Flag[name]
            continue
        key, _, value = tok.partition("=")
        if key == "dep":
            kw["dep_id"] = int(value)
        elif key in ("flow", "size", "lane", "imm"):
            kw[key] = int(value)
        elif key == "addr":
            kw["address"] = parse_address(value)
        elif key == "regs":
            kw["reg_ops"] = tuple(int(r) for r in value.split(","))
        else:
            raise IsaError(f"unknown field {key!r}")
    return UopWord(op, flags, **kw)


def format_stream(stream: Iterable[UopWord]) -> str:
    return "".join(format_uop(u) + "\n" for u in stream)


def parse_stream(text: str) -> list[UopWord]:
    out = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.append(parse_uop(line))
    return out
