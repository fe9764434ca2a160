"""Miniature low-level IR: text format, structural validation, CFG and call graph.

A program is an ordered collection of functions, each an ordered collection of
basic blocks over 16 general-purpose registers plus an implicit stack pointer.
The word size is 8 bytes and every memory operation moves exactly one word.
Data convention: stores write the current value of r0; `corrupt` writes its
immediate operand; r0 is the return register.

Programs are immutable after parse/validate and safe to share across threads;
every operation in this module is a pure function of its inputs.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterator

WORD_SIZE = 8
NUM_REGS = 16
RETURN_REG = 0

TERMINATORS = frozenset({"br", "brc", "ret", "halt"})
STORE_OPCODES = frozenset({"store.sp", "store.reg", "store.global", "corrupt"})
SHADOW_OPCODES = frozenset({"spush", "spop", "rfpush", "rfpop"})

# Operand shape per opcode: r = register, i = signed integer, b = block id,
# g = global symbol, f = function symbol.
OPERAND_SHAPES = {
    "spadd": "i",
    "spmov": "r",
    "movi": "ri",
    "movr": "rr",
    "lea.sp": "ri",
    "binop": "rr",
    "store.sp": "i",
    "store.reg": "r",
    "store.global": "g",
    "load.sp": "ri",
    "load.reg": "rr",
    "call": "f",
    "icall": "r",
    "ret": "",
    "br": "b",
    "brc": "bb",
    "halt": "",
    "corrupt": "ii",
    "unwind": "i",
    "spush": "i",
    "spop": "",
    "rfpush": "r",
    "rfpop": "r",
}


class MirError(Exception):
    """Syntax or structural error in MIR text, with a source position."""

    def __init__(self, msg: str, line: int = 0, col: int = 0):
        self.msg = msg
        self.line = line
        self.col = col
        super().__init__(f"line {line}, col {col}: {msg}" if line else msg)


@dataclass(frozen=True)
class Instr:
    opcode: str
    args: tuple = ()

    def render(self) -> str:
        shape = OPERAND_SHAPES[self.opcode]
        parts = []
        for kind, arg in zip(shape, self.args):
            if kind == "r":
                parts.append(f"r{arg}")
            elif kind == "b":
                parts.append(f"b{arg}")
            else:
                parts.append(str(arg))
        return self.opcode if not parts else self.opcode + " " + ", ".join(parts)

    @property
    def is_store(self) -> bool:
        return self.opcode in STORE_OPCODES

    @property
    def is_terminator(self) -> bool:
        return self.opcode in TERMINATORS


@dataclass(eq=False)
class Block:
    bid: int
    instrs: tuple[Instr, ...]
    src_line: int = 0
    instr_lines: tuple[int, ...] = ()

    @property
    def terminator(self) -> Instr | None:
        return self.instrs[-1] if self.instrs else None

    @property
    def successors(self) -> tuple[int, ...]:
        term = self.terminator
        if term is None:
            return ()
        if term.opcode == "br":
            return (term.args[0],)
        if term.opcode == "brc":
            return (term.args[0], term.args[1])
        return ()

    def direct_call_targets(self) -> tuple[str, ...]:
        return tuple(i.args[0] for i in self.instrs if i.opcode == "call")

    @property
    def has_indirect_call(self) -> bool:
        return any(i.opcode == "icall" for i in self.instrs)

    def __eq__(self, other):
        return (
            isinstance(other, Block)
            and self.bid == other.bid
            and self.instrs == other.instrs
        )


@dataclass(eq=False)
class Function:
    name: str
    blocks: dict[int, Block]
    src_line: int = 0

    @property
    def entry_block(self) -> int:
        return next(iter(self.blocks))

    @property
    def exit_blocks(self) -> tuple[int, ...]:
        return tuple(
            bid
            for bid, b in self.blocks.items()
            if b.terminator is not None and b.terminator.opcode in ("ret", "halt")
        )

    def iter_instrs(self) -> Iterator[tuple[int, int, Instr]]:
        for bid, block in self.blocks.items():
            for idx, ins in enumerate(block.instrs):
                yield bid, idx, ins

    @property
    def is_leaf(self) -> bool:
        return not any(i.opcode in ("call", "icall") for _, _, i in self.iter_instrs())

    def __eq__(self, other):
        return (
            isinstance(other, Function)
            and self.name == other.name
            and list(self.blocks.items()) == list(other.blocks.items())
        )


@dataclass(eq=False)
class Program:
    functions: dict[str, Function]
    entry: str = ""
    adversarial: bool = False
    source_path: str = "<mir>"

    def __post_init__(self):
        if not self.entry and self.functions:
            self.entry = next(iter(self.functions))

    @property
    def globals(self) -> tuple[str, ...]:
        names = {
            ins.args[0]
            for fn in self.functions.values()
            for _, _, ins in fn.iter_instrs()
            if ins.opcode == "store.global"
        }
        return tuple(sorted(names))

    def function_index(self, name: str) -> int:
        """Position in declaration order; doubles as the function's address."""
        for i, n in enumerate(self.functions):
            if n == name:
                return i
        raise KeyError(name)

    def function_at(self, index: int) -> Function | None:
        if 0 <= index < len(self.functions):
            return list(self.functions.values())[index]
        return None

    def __eq__(self, other):
        return (
            isinstance(other, Program)
            and self.entry == other.entry
            and self.adversarial == other.adversarial
            and list(self.functions.items()) == list(other.functions.items())
        )


@dataclass(frozen=True)
class Diagnostic:
    function: str | None
    block: int | None
    reason: str
    line: int = 0

    def render(self, path: str = "<mir>") -> str:
        return f"{path}:{self.line}: {self.reason}"


@dataclass(frozen=True)
class CallGraph:
    nodes: tuple[str, ...]
    direct_edges: frozenset[tuple[str, str]]
    has_indirect_call: frozenset[str]


_FN_RE = re.compile(r"^fn\s+([A-Za-z_][\w.]*)\s*\{(.*)$")
_LABEL_RE = re.compile(r"^b(\d+):\s*(.*)$")
_REG_RE = re.compile(r"^r(\d+)$")
_BLOCK_REF_RE = re.compile(r"^b(\d+)$")
_NAME_RE = re.compile(r"^[A-Za-z_][\w.]*$")
_INT_RE = re.compile(r"^-?\d+$")


class _Parser:
    def __init__(self, text: str, path: str):
        self.lines = text.splitlines()
        self.path = path
        self.functions: dict[str, Function] = {}
        self.entry: str | None = None
        self.adversarial = False
        self.fn_name: str | None = None
        self.fn_line = 0
        self.blocks: dict[int, Block] = {}
        self.bid: int | None = None
        self.instrs: list[Instr] = []
        self.instr_lines: list[int] = []
        self.block_line = 0

    def error(self, msg: str, line: int, token: str = "") -> MirError:
        col = 1
        if token and 1 <= line <= len(self.lines):
            pos = self.lines[line - 1].find(token)
            if pos >= 0:
                col = pos + 1
        return MirError(msg, line, col)

    def run(self) -> Program:
        for no, raw in enumerate(self.lines, start=1):
            self.feed(raw.strip(), no)
        if self.fn_name is not None:
            raise self.error(f"unterminated function '{self.fn_name}'", self.fn_line)
        program = Program(
            self.functions,
            entry=self.entry or "",
            adversarial=self.adversarial,
            source_path=self.path,
        )
        self.resolve(program)
        return program

    def feed(self, line: str, no: int) -> None:
        if not line:
            return
        if line.startswith("#"):
            self.directive(line, no)
            return
        m = _FN_RE.match(line)
        if m:
            if self.fn_name is not None:
                raise self.error("nested function definition", no, "fn")
            name = m.group(1)
            if name in self.functions:
                raise self.error(f"duplicate function '{name}'", no, name)
            self.fn_name = name
            self.fn_line = no
            self.blocks = {}
            self.bid = None
            rest = m.group(2).strip()
            if rest:
                self.feed(rest, no)
            return
        if self.fn_name is None:
            raise self.error(f"statement outside function: '{line}'", no, line.split()[0])
        closing = False
        if line.endswith("}"):
            closing = True
            line = line[:-1].strip()
        if line:
            m = _LABEL_RE.match(line)
            if m:
                self.flush_block()
                bid = int(m.group(1))
                if bid in self.blocks:
                    raise self.error(f"duplicate block b{bid}", no, f"b{bid}")
                self.bid = bid
                self.block_line = no
                rest = m.group(2).strip()
                if rest:
                    self.instruction(rest, no)
            else:
                self.instruction(line, no)
        if closing:
            self.close_function(no)

    def directive(self, line: str, no: int) -> None:
        parts = line.split(None, 1)
        key = parts[0]
        if key == "#entry":
            if len(parts) != 2 or not _NAME_RE.match(parts[1].strip()):
                raise self.error("#entry expects a function name", no, key)
            self.entry = parts[1].strip()
        elif key == "#adversarial":
            val = parts[1].strip() if len(parts) == 2 else ""
            if val not in ("true", "false"):
                raise self.error("#adversarial expects true|false", no, key)
            self.adversarial = val == "true"
        # any other '#' line is a comment

    def instruction(self, text: str, no: int) -> None:
        if self.bid is None:
            raise self.error("instruction outside a block", no, text.split()[0])
        self.instrs.append(self.parse_instr(text, no))
        self.instr_lines.append(no)

    def parse_instr(self, text: str, no: int) -> Instr:
        parts = text.split(None, 1)
        opcode = parts[0]
        shape = OPERAND_SHAPES.get(opcode)
        if shape is None:
            raise self.error(f"unknown opcode '{opcode}'", no, opcode)
        raw_args = [a.strip() for a in parts[1].split(",")] if len(parts) > 1 else []
        if len(raw_args) != len(shape):
            raise self.error(
                f"'{opcode}' expects {len(shape)} operand(s), got {len(raw_args)}",
                no,
                opcode,
            )
        args = []
        for kind, tok in zip(shape, raw_args):
            if kind == "r":
                m = _REG_RE.match(tok)
                if not m or not 0 <= int(m.group(1)) < NUM_REGS:
                    raise self.error(f"bad register '{tok}'", no, tok)
                args.append(int(m.group(1)))
            elif kind == "b":
                m = _BLOCK_REF_RE.match(tok)
                if not m:
                    raise self.error(f"bad block reference '{tok}'", no, tok)
                args.append(int(m.group(1)))
            elif kind == "i":
                if not _INT_RE.match(tok):
                    raise self.error(f"bad integer '{tok}'", no, tok)
                args.append(int(tok))
            else:  # g or f
                if not _NAME_RE.match(tok):
                    raise self.error(f"bad symbol '{tok}'", no, tok)
                args.append(tok)
        return Instr(opcode, tuple(args))

    def flush_block(self) -> None:
        if self.bid is None:
            return
        self.blocks[self.bid] = Block(
            self.bid, tuple(self.instrs), self.block_line, tuple(self.instr_lines)
        )
        self.bid = None
        self.instrs = []
        self.instr_lines = []

    def close_function(self, no: int) -> None:
        self.flush_block()
        if not self.blocks:
            raise self.error(f"function '{self.fn_name}' has no blocks", self.fn_line)
        self.functions[self.fn_name] = Function(self.fn_name, self.blocks, self.fn_line)
        self.fn_name = None

    def resolve(self, program: Program) -> None:
        if not program.functions:
            raise MirError("no functions in program")
        if self.entry is not None and self.entry not in program.functions:
            raise MirError(f"unknown entry function '{self.entry}'")
        for fn in program.functions.values():
            for bid, block in fn.blocks.items():
                for idx, ins in enumerate(block.instrs):
                    line = block.instr_lines[idx] if idx < len(block.instr_lines) else 0
                    if ins.opcode in ("br", "brc"):
                        for target in ins.args:
                            if target not in fn.blocks:
                                raise self.error(f"unknown block b{target}", line, f"b{target}")
                    elif ins.opcode == "call":
                        if ins.args[0] not in program.functions:
                            raise self.error(f"unknown function '{ins.args[0]}'", line, ins.args[0])


def parse_program(text: str, path: str = "<mir>") -> Program:
    """Parse MIR text; raises MirError with line/column on malformed input."""
    return _Parser(text, path).run()


def print_program(program: Program) -> str:
    """Canonical text form; parse(print(p)) is structurally identical to p."""
    out = [f"#entry {program.entry}"]
    if program.adversarial:
        out.append("#adversarial true")
    for fn in program.functions.values():
        out.append("")
        out.append(f"fn {fn.name} {{")
        for bid, block in fn.blocks.items():
            out.append(f"b{bid}:")
            for ins in block.instrs:
                out.append(f"  {ins.render()}")
        out.append("}")
    return "\n".join(out) + "\n"


def validate_program(program: Program, allow_shadow: bool = False) -> list[Diagnostic]:
    """Structural validation; returns an empty list iff all invariants hold."""
    diags: list[Diagnostic] = []

    def diag(fn, bid, reason, line=0):
        diags.append(Diagnostic(fn, bid, reason, line))

    if program.entry not in program.functions:
        diag(None, None, f"entry function '{program.entry}' does not exist")
        return diags

    for fn in program.functions.values():
        if not fn.blocks:
            diag(fn.name, None, "function has no blocks", fn.src_line)
            continue
        for bid, block in fn.blocks.items():
            if not block.instrs:
                diag(fn.name, bid, f"{fn.name}.b{bid}: empty block", block.src_line)
                continue
            term = block.instrs[-1]
            if term.opcode not in TERMINATORS:
                diag(
                    fn.name,
                    bid,
                    f"{fn.name}.b{bid}: block does not end with a control transfer",
                    block.src_line,
                )
            for idx, ins in enumerate(block.instrs):
                line = block.instr_lines[idx] if idx < len(block.instr_lines) else block.src_line
                if ins.opcode in TERMINATORS and idx != len(block.instrs) - 1:
                    diag(
                        fn.name,
                        bid,
                        f"{fn.name}.b{bid}: control transfer '{ins.opcode}' before end of block",
                        line,
                    )
                if ins.opcode in SHADOW_OPCODES and not allow_shadow:
                    diag(
                        fn.name,
                        bid,
                        f"{fn.name}.b{bid}: shadow instruction '{ins.opcode}' in plain program",
                        line,
                    )
                if ins.opcode == "corrupt" and not program.adversarial:
                    diag(
                        fn.name,
                        bid,
                        f"{fn.name}.b{bid}: adversarial instruction in benign program",
                        line,
                    )
                if ins.opcode == "unwind" and ins.args[0] < 1:
                    diag(fn.name, bid, f"{fn.name}.b{bid}: unwind count must be >= 1", line)
                shape = OPERAND_SHAPES[ins.opcode]
                for kind, arg in zip(shape, ins.args):
                    if kind == "r" and not 0 <= arg < NUM_REGS:
                        diag(fn.name, bid, f"{fn.name}.b{bid}: register index out of range", line)
                if ins.opcode in ("br", "brc"):
                    for target in ins.args:
                        if target not in fn.blocks:
                            diag(
                                fn.name,
                                bid,
                                f"{fn.name}.b{bid}: branch to unknown block b{target}",
                                line,
                            )
                if ins.opcode == "brc" and ins.args[0] == ins.args[1]:
                    diag(fn.name, bid, f"{fn.name}.b{bid}: brc arms must differ", line)
                if ins.opcode == "call" and ins.args[0] not in program.functions:
                    diag(
                        fn.name,
                        bid,
                        f"{fn.name}.b{bid}: call to unknown function '{ins.args[0]}'",
                        line,
                    )
        # reachability over intra-procedural edges
        seen = set()
        work = [fn.entry_block]
        while work:
            b = work.pop()
            if b in seen or b not in fn.blocks:
                continue
            seen.add(b)
            work.extend(fn.blocks[b].successors)
        for bid, block in fn.blocks.items():
            if bid not in seen:
                diag(fn.name, bid, f"{fn.name}.b{bid}: unreachable block", block.src_line)
    return diags


def build_call_graph(program: Program) -> CallGraph:
    """Direct call edges plus the set of functions containing indirect calls."""
    edges = set()
    indirect = set()
    for fn in program.functions.values():
        for _, _, ins in fn.iter_instrs():
            if ins.opcode == "call":
                edges.add((fn.name, ins.args[0]))
            elif ins.opcode == "icall":
                indirect.add(fn.name)
    return CallGraph(tuple(program.functions), frozenset(edges), frozenset(indirect))
