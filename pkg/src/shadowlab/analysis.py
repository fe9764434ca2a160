"""Intra-procedural stack-height analysis, store classification, register liveness.

Heights are measured in bytes relative to the stack-pointer value at function
entry, which is the address of the local return-address slot; the return
address occupies heights [0, 8).  A store is a safe stack write when its
destination height is concrete and at most -8, i.e. strictly below the slot.

The height lattice is flat: Bottom below every concrete offset below Top.
For a register, Bottom means "not derived from the stack pointer" and Top
means "may be anything, possibly a stack address".  Transfers that produce
statically unknown values (loads, post-call registers, arithmetic on a
stack-derived operand) go to Top so a later join can never launder an
arbitrary runtime value into a concrete height.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .mir import NUM_REGS, RETURN_REG, WORD_SIZE, Function, Instr


class _Extreme:
    """Identity-compared lattice extreme."""

    __slots__ = ("_name",)

    def __init__(self, name: str):
        self._name = name

    def __repr__(self):
        return self._name


BOTTOM = _Extreme("<bottom>")
TOP = _Extreme("<top>")

# A height is a concrete byte offset (int) or one of the extremes.
Height = object

SAFE_STACK = "stack"
GLOBAL = "global"
UNSAFE = "unsafe"


def join_height(a, b):
    if a is BOTTOM:
        return b
    if b is BOTTOM:
        return a
    if a is TOP or b is TOP:
        return TOP
    return a if a == b else TOP


def is_safe_height(h) -> bool:
    return isinstance(h, int) and h <= -WORD_SIZE


@dataclass(frozen=True)
class InstrFacts:
    """Dataflow state holding at an instruction, plus its write destination.

    `sp` and `regs` describe the state immediately before the instruction
    executes; `dest` is the height of the word it writes (Bottom for
    instructions without a memory-write destination; store.global carries
    Bottom and is classified separately).
    """

    sp: Height
    regs: tuple
    dest: Height

    def reg(self, r: int):
        for k, v in self.regs:
            if k == r:
                return v
        return BOTTOM


@dataclass
class HeightMap:
    function: str
    facts: dict[tuple[int, int], InstrFacts]

    def at(self, bid: int, idx: int) -> InstrFacts:
        return self.facts[(bid, idx)]

    def dest(self, bid: int, idx: int):
        return self.facts[(bid, idx)].dest

    def sp_at_block_entry(self, bid: int):
        return self.facts[(bid, 0)].sp


def _step(sp, regs: dict, ins: Instr):
    """Transfer function; mutates `regs`, returns (sp', dest)."""
    op = ins.opcode
    dest = BOTTOM
    if op == "spadd":
        if isinstance(sp, int):
            sp = sp + ins.args[0]
    elif op == "spmov":
        v = regs.get(ins.args[0], BOTTOM)
        sp = v if isinstance(v, int) else TOP
    elif op == "movi":
        regs[ins.args[0]] = BOTTOM
    elif op == "movr":
        regs[ins.args[0]] = regs.get(ins.args[1], BOTTOM)
    elif op == "lea.sp":
        regs[ins.args[0]] = sp + ins.args[1] if isinstance(sp, int) else TOP
    elif op == "binop":
        a = regs.get(ins.args[0], BOTTOM)
        b = regs.get(ins.args[1], BOTTOM)
        regs[ins.args[0]] = BOTTOM if (a is BOTTOM and b is BOTTOM) else TOP
    elif op in ("load.sp", "load.reg"):
        regs[ins.args[0]] = TOP
    elif op in ("call", "icall"):
        # the callee may leave anything in the registers; sp is restored on return
        for r in range(NUM_REGS):
            regs[r] = TOP
    elif op == "store.sp":
        dest = sp + ins.args[0] if isinstance(sp, int) else TOP
    elif op == "store.reg":
        v = regs.get(ins.args[0], BOTTOM)
        dest = v if isinstance(v, int) else TOP
    elif op == "corrupt":
        dest = TOP
    elif op in ("rfpush", "rfpop"):
        regs[ins.args[0]] = TOP
    # store.global, spush, spop, br, brc, ret, halt, unwind: no effect
    return sp, dest


def _freeze_regs(regs: dict) -> tuple:
    return tuple(sorted((k, v) for k, v in regs.items() if v is not BOTTOM))


def stack_heights(fn: Function) -> HeightMap:
    """Forward dataflow fixpoint over the CFG.

    Entry state: stack pointer at height 0, all registers Bottom.
    """
    facts: dict[tuple[int, int], InstrFacts] = {}
    in_states: dict[int, tuple] = {fn.entry_block: (0, {})}
    work = deque([fn.entry_block])
    queued = {fn.entry_block}
    while work:
        bid = work.popleft()
        queued.discard(bid)
        sp, regs = in_states[bid]
        regs = dict(regs)
        block = fn.blocks[bid]
        for idx, ins in enumerate(block.instrs):
            before = (sp, _freeze_regs(regs))
            sp, dest = _step(sp, regs, ins)
            facts[(bid, idx)] = InstrFacts(before[0], before[1], dest)
        out = (sp, regs)
        for succ in block.successors:
            if succ not in in_states:
                merged = (out[0], dict(out[1]))
                changed = True
            else:
                cur_sp, cur_regs = in_states[succ]
                new_sp = join_height(cur_sp, out[0])
                new_regs = dict(cur_regs)
                for k in set(cur_regs) | set(out[1]):
                    new_regs[k] = join_height(cur_regs.get(k, BOTTOM), out[1].get(k, BOTTOM))
                merged = (new_sp, new_regs)
                changed = new_sp != cur_sp or _freeze_regs(new_regs) != _freeze_regs(cur_regs)
            if changed:
                in_states[succ] = merged
                if succ not in queued:
                    work.append(succ)
                    queued.add(succ)
    return HeightMap(fn.name, facts)


@dataclass(frozen=True)
class WriteSummary:
    stack: int
    global_: int
    unsafe: int

    @property
    def total(self) -> int:
        return self.stack + self.global_ + self.unsafe

    def to_json(self) -> dict:
        total = self.total
        pct = lambda n: (100.0 * n / total) if total else 0.0
        return {
            "stack_pct": pct(self.stack),
            "global_pct": pct(self.global_),
            "unsafe_pct": pct(self.unsafe),
            "total": total,
        }


def classify_writes(fn: Function, heights: HeightMap):
    """Total classification of every store: stack | global | unsafe."""
    classes: dict[tuple[int, int], str] = {}
    counts = {SAFE_STACK: 0, GLOBAL: 0, UNSAFE: 0}
    for bid, idx, ins in fn.iter_instrs():
        if not ins.is_store:
            continue
        if ins.opcode == "store.global":
            cls = GLOBAL
        elif is_safe_height(heights.dest(bid, idx)):
            cls = SAFE_STACK
        else:
            cls = UNSAFE
        classes[(bid, idx)] = cls
        counts[cls] += 1
    return classes, WriteSummary(counts[SAFE_STACK], counts[GLOBAL], counts[UNSAFE])


ALL_REGS = frozenset(range(NUM_REGS))


def instr_uses(ins: Instr) -> frozenset[int]:
    op = ins.opcode
    if op in ("call", "icall"):
        # calls may pass values in any register; never assume ABI compliance
        return ALL_REGS
    if op in ("ret", "halt"):
        return frozenset((RETURN_REG,))
    if op in ("store.sp", "store.global"):
        return frozenset((RETURN_REG,))
    if op == "store.reg":
        return frozenset((ins.args[0], RETURN_REG))
    if op in ("spmov", "rfpush", "rfpop"):
        return frozenset((ins.args[0],))
    if op == "movr" or op == "load.reg":
        return frozenset((ins.args[1],))
    if op == "binop":
        return frozenset((ins.args[0], ins.args[1]))
    return frozenset()


def instr_defs(ins: Instr) -> frozenset[int]:
    if ins.opcode in ("movi", "movr", "lea.sp", "binop", "load.sp", "load.reg", "rfpush", "rfpop"):
        return frozenset((ins.args[0],))
    return frozenset()


@dataclass
class LivenessMap:
    function: str
    dead: dict[tuple[int, int], frozenset[int]]

    def dead_at(self, bid: int, idx: int) -> frozenset[int]:
        return self.dead[(bid, idx)]


def dead_registers(fn: Function) -> LivenessMap:
    """Backward may-liveness; dead = registers never read before overwritten.

    The dead set at (block, index) describes the point just before that
    instruction executes.
    """
    block_use: dict[int, frozenset[int]] = {}
    block_def: dict[int, frozenset[int]] = {}
    for bid, block in fn.blocks.items():
        use: set[int] = set()
        defs: set[int] = set()
        for ins in block.instrs:
            use |= instr_uses(ins) - defs
            defs |= instr_defs(ins)
        block_use[bid] = frozenset(use)
        block_def[bid] = frozenset(defs)

    live_out: dict[int, frozenset[int]] = {bid: frozenset() for bid in fn.blocks}
    live_in: dict[int, frozenset[int]] = {
        bid: block_use[bid] for bid in fn.blocks
    }
    changed = True
    while changed:
        changed = False
        for bid, block in fn.blocks.items():
            out: frozenset[int] = frozenset()
            for succ in block.successors:
                out |= live_in[succ]
            if out != live_out[bid]:
                live_out[bid] = out
                changed = True
            new_in = block_use[bid] | (out - block_def[bid])
            if new_in != live_in[bid]:
                live_in[bid] = new_in
                changed = True

    dead: dict[tuple[int, int], frozenset[int]] = {}
    for bid, block in fn.blocks.items():
        live = set(live_out[bid])
        for idx in range(len(block.instrs) - 1, -1, -1):
            ins = block.instrs[idx]
            live -= instr_defs(ins)
            live |= instr_uses(ins)
            dead[(bid, idx)] = frozenset(ALL_REGS - live)
    return LivenessMap(fn.name, dead)
