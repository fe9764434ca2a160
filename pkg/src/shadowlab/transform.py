"""Instrumentation policy and mechanism.

Policy: safe-function elision drops instrumentation from provably safe
functions; safe-path elision clones the CFG of an unsafe function and moves
the push onto the edges entering its first unsafe blocks, so walks that stay
on safe blocks execute no shadow operations at all.

Mechanism: register frames keep a leaf function's shadow entry in an unused
register; direct calls to single-block leaf callees are inlined away; entry
pushes chase forward within their block to a point with two dead registers,
eliding the scratch save/restore.

Plans record every candidate; `apply_plan` resolves them per mode:

  FULL       entry/exit instrumentation on every function
  SFE        FULL minus safe functions
  PO         SFE plus path lowering
  MO         FULL plus mechanism optimizations
  LIGHT      PO plus mechanism optimizations
  ELIDE-ALL  no instrumentation (intentionally unsound control)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from .mir import (
    Block,
    Function,
    Instr,
    Program,
    SHADOW_OPCODES,
    STORE_OPCODES,
    TERMINATORS,
)
from .analysis import (
    HeightMap,
    LivenessMap,
    UNSAFE,
    classify_writes,
    instr_defs,
    instr_uses,
)
from .safety import SafetyResult

MODES = ("FULL", "SFE", "PO", "MO", "LIGHT", "ELIDE-ALL")

CLONE_OFFSET = 1000
TRANSITION_BASE = 2000

# (instructions, memory accesses) charged per executed shadow operation
COST_PUSH = (9, 6)
COST_POP = (11, 6)
COST_PUSH_CHASED = (5, 4)
COST_RF_PUSH = (2, 2)
COST_RF_POP = (3, 1)
COST_TRANSITION_EDGE = (1, 0)

FN_ELIDED = "elided"
FN_FULL = "full"
FN_LOWERED = "lowered"
FN_REGFRAME = "regframe"

PATH_COUNT_CAP = 1 << 16


class PlanError(Exception):
    pass


@dataclass(frozen=True)
class ShadowOp:
    kind: str                      # push | pop | rfpush | rfpop
    site: tuple                    # ("entry", bid) | ("instr", bid, idx) | ("edge", src, dst) | ("exit", bid)
    entry_height: int = 0          # stack height where the covered region is entered
    reg: int | None = None
    cost: tuple[int, int] = COST_PUSH
    chased: bool = False
    transition: bool = False


@dataclass(frozen=True)
class LoweredCfg:
    clone_map: dict[int, int]
    transition_edges: tuple[tuple[int, int], ...]          # (src, original dst) in DFS order
    push_heights: dict[tuple[int, int], int]
    reachable_originals: tuple[int, ...]
    reachable_clones: tuple[int, ...]
    clone_exits: tuple[int, ...]


@dataclass
class FunctionPlan:
    name: str
    ra_safe: bool
    safe_paths: int
    leaf: bool
    lowered: LoweredCfg | None = None
    free_reg: int | None = None
    entry_chase: tuple[int, int] | None = None   # (landing index, net sp delta over skipped prefix)
    edge_dead: dict[tuple[int, int], bool] = field(default_factory=dict)


@dataclass
class InstrumentationPlan:
    per_function: dict[str, FunctionPlan]
    inline_callees: frozenset[str]
    inline_sites: tuple[tuple[str, int, int, str], ...]    # (caller, bid, idx, callee)


def safe_function_elision(program: Program, safety: SafetyResult) -> frozenset[str]:
    """The functions that still need instrumentation: exactly the unsafe ones."""
    return frozenset(name for name in program.functions if not safety.ra_safe_fn(name))


@dataclass
class ProgramAnalysis:
    heights: dict[str, HeightMap]
    liveness: dict[str, LivenessMap]
    classes: dict[str, dict[tuple[int, int], str]]
    summaries: dict[str, object]
    safety: SafetyResult


def analyze_program(program: Program) -> ProgramAnalysis:
    """Run every per-function analysis plus the safety fixpoint."""
    from .analysis import dead_registers, stack_heights
    from .safety import calculate_ra_safety

    heights = {name: stack_heights(fn) for name, fn in program.functions.items()}
    liveness = {name: dead_registers(fn) for name, fn in program.functions.items()}
    classes = {}
    summaries = {}
    for name, fn in program.functions.items():
        classes[name], summaries[name] = classify_writes(fn, heights[name])
    safety = calculate_ra_safety(program, heights)
    return ProgramAnalysis(heights, liveness, classes, summaries, safety)


def plan_program(program: Program) -> tuple[ProgramAnalysis, InstrumentationPlan]:
    analysis = analyze_program(program)
    plan = plan_mechanism(program, analysis.safety, analysis.liveness, analysis.heights)
    return analysis, plan


def _block_sccs(block_ids: list[int], succs: Mapping[int, list[int]]):
    """Iterative Tarjan over a block subgraph; components in emission order."""
    index: dict[int, int] = {}
    lowlink: dict[int, int] = {}
    on_stack: dict[int, bool] = {}
    stack: list[int] = []
    counter = [0]
    components: list[tuple[int, ...]] = []
    comp_of: dict[int, int] = {}

    def connect(root: int) -> None:
        work = [(root, iter(succs[root]))]
        index[root] = lowlink[root] = counter[0]
        counter[0] += 1
        stack.append(root)
        on_stack[root] = True
        while work:
            node, it = work[-1]
            advanced = False
            for nxt in it:
                if nxt not in index:
                    index[nxt] = lowlink[nxt] = counter[0]
                    counter[0] += 1
                    stack.append(nxt)
                    on_stack[nxt] = True
                    work.append((nxt, iter(succs[nxt])))
                    advanced = True
                    break
                if on_stack.get(nxt):
                    lowlink[node] = min(lowlink[node], index[nxt])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                lowlink[parent] = min(lowlink[parent], lowlink[node])
            if lowlink[node] == index[node]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack[w] = False
                    comp.append(w)
                    if w == node:
                        break
                cid = len(components)
                components.append(tuple(sorted(comp)))
                for b in comp:
                    comp_of[b] = cid

    for b in block_ids:
        if b not in index:
            connect(b)
    return components, comp_of


def count_safe_paths(fn: Function, safety: SafetyResult, cap: int = PATH_COUNT_CAP) -> int:
    """Entry-to-exit paths through safe blocks only, loops collapsed, capped.

    Unsafe blocks are removed outright, then strongly connected groups of the
    remaining safe blocks collapse to single nodes so a loop contributes its
    enclosing path once.
    """
    safe = [bid for bid in fn.blocks if safety.ra_safe_block(fn.name, bid)]
    if fn.entry_block not in safe:
        return 0
    safe_set = set(safe)
    succs = {
        bid: sorted(s for s in fn.blocks[bid].successors if s in safe_set) for bid in safe
    }
    components, comp_of = _block_sccs(sorted(safe), succs)

    comp_succs: dict[int, set[int]] = {i: set() for i in range(len(components))}
    for bid in safe:
        for s in succs[bid]:
            if comp_of[bid] != comp_of[s]:
                comp_succs[comp_of[bid]].add(comp_of[s])

    exits = set(fn.exit_blocks)
    entry_comp = comp_of[fn.entry_block]
    # Tarjan emission order is reverse-topological; walk it backwards for the DP
    ways = [0] * len(components)
    ways[entry_comp] = 1
    total = 0
    for cid in range(len(components) - 1, -1, -1):
        w = ways[cid]
        if not w:
            continue
        if any(b in exits for b in components[cid]):
            total = min(cap, total + w)
        for s in sorted(comp_succs[cid]):
            ways[s] = min(cap, ways[s] + w)
    return total


def lower_instrumentation(
    fn: Function, safety: SafetyResult, heights: HeightMap
) -> LoweredCfg | None:
    """Clone the CFG and collect the transition edges entering unsafe blocks.

    Depth-first over intra-procedural edges in ascending block-id order with
    edge marking; the first unsafe block on a path redirects the traversed
    edge to that block's clone and carries the push, and the walk does not
    descend past it.  Returns None when lowering cannot apply: the entry
    block itself is unsafe, or a push site has no concrete stack height.
    """
    assert not safety.ra_safe_fn(fn.name), "lowering a safe function is a caller bug"
    if not safety.ra_safe_block(fn.name, fn.entry_block):
        return None
    if any(bid >= CLONE_OFFSET for bid in fn.blocks):
        raise PlanError(f"{fn.name}: block ids must be below {CLONE_OFFSET} for lowering")

    transitions: list[tuple[int, int]] = []
    visited: set[tuple[int, int]] = set()

    def visit(bid: int, in_edge: tuple[int, int] | None) -> None:
        if not safety.ra_safe_block(fn.name, bid):
            transitions.append(in_edge)
            return
        for succ in sorted(fn.blocks[bid].successors):
            edge = (bid, succ)
            if edge not in visited:
                visited.add(edge)
                visit(succ, edge)

    visit(fn.entry_block, None)

    push_heights: dict[tuple[int, int], int] = {}
    for src, dst in transitions:
        h = heights.at(dst, 0).sp
        if not isinstance(h, int):
            return None
        push_heights[(src, dst)] = h

    clone_map = {bid: bid + CLONE_OFFSET for bid in fn.blocks}
    tset = set(transitions)

    def final_succs(bid: int) -> list[int]:
        if bid >= CLONE_OFFSET:
            orig = bid - CLONE_OFFSET
            return [clone_map[s] for s in fn.blocks[orig].successors]
        out = []
        for s in fn.blocks[bid].successors:
            out.append(clone_map[s] if (bid, s) in tset else s)
        return out

    seen: set[int] = set()
    work = [fn.entry_block]
    while work:
        b = work.pop()
        if b in seen:
            continue
        seen.add(b)
        work.extend(final_succs(b))

    reachable_originals = tuple(bid for bid in fn.blocks if bid in seen)
    reachable_clones = tuple(
        clone_map[bid] for bid in fn.blocks if clone_map[bid] in seen
    )
    clone_exits = tuple(
        clone_map[bid]
        for bid in fn.blocks
        if clone_map[bid] in seen
        and fn.blocks[bid].terminator.opcode in ("ret", "halt")
    )
    return LoweredCfg(
        clone_map,
        tuple(transitions),
        push_heights,
        reachable_originals,
        reachable_clones,
        clone_exits,
    )


def find_free_register(fn: Function) -> int | None:
    """Lowest register never referenced by the function body; r0 is excluded."""
    used: set[int] = set()
    for _, _, ins in fn.iter_instrs():
        used |= instr_uses(ins) | instr_defs(ins)
    for r in range(1, 16):
        if r not in used:
            return r
    return None


_INLINE_FORBIDDEN = frozenset(
    {"call", "icall", "corrupt", "unwind", "spadd", "spmov", "lea.sp", "store.sp", "load.sp", "halt"}
) | SHADOW_OPCODES


def inline_eligible(fn: Function) -> bool:
    """Single straight-line block ending in ret, with no stack-relative effects.

    Bodies that adjust or address the stack pointer would change meaning when
    spliced into the caller's frame, so they are not inlined.
    """
    if len(fn.blocks) != 1:
        return False
    block = next(iter(fn.blocks.values()))
    if not block.instrs or block.instrs[-1].opcode != "ret":
        return False
    return all(i.opcode not in _INLINE_FORBIDDEN for i in block.instrs[:-1])


def _chase_point(
    block: Block,
    liveness: LivenessMap,
    classes: Mapping[tuple[int, int], str],
) -> tuple[int, int] | None:
    """Earliest in-block point with two dead registers reachable without
    crossing an unsafe store, a call, or a statically unknown sp change."""
    delta = 0
    for idx in range(len(block.instrs)):
        if len(liveness.dead_at(block.bid, idx)) >= 2:
            return idx, delta
        ins = block.instrs[idx]
        op = ins.opcode
        if op in ("call", "icall", "spmov", "unwind") or op in TERMINATORS:
            return None
        if op in STORE_OPCODES and classes.get((block.bid, idx)) == UNSAFE:
            return None
        if op == "spadd":
            delta += ins.args[0]
    return None


def plan_mechanism(
    program: Program,
    safety: SafetyResult,
    liveness: Mapping[str, LivenessMap],
    heights: Mapping[str, HeightMap],
) -> InstrumentationPlan:
    """Build the full per-function plan: policy candidates plus register-frame
    selection, inline sites, and dead-register chase points."""
    per_function: dict[str, FunctionPlan] = {}
    inline_callees = frozenset(
        name for name, fn in program.functions.items() if inline_eligible(fn)
    )
    inline_sites = tuple(
        (fn.name, bid, idx, ins.args[0])
        for fn in program.functions.values()
        for bid, idx, ins in fn.iter_instrs()
        if ins.opcode == "call" and ins.args[0] in inline_callees
    )

    for name, fn in program.functions.items():
        classes, _ = classify_writes(fn, heights[name])
        ra_safe = safety.ra_safe_fn(name)
        paths = count_safe_paths(fn, safety)
        plan = FunctionPlan(name, ra_safe, paths, fn.is_leaf)
        if not ra_safe and paths >= 1:
            plan.lowered = lower_instrumentation(fn, safety, heights[name])
        if fn.is_leaf:
            plan.free_reg = find_free_register(fn)
        entry = fn.blocks[fn.entry_block]
        plan.entry_chase = _chase_point(entry, liveness[name], classes)
        if plan.lowered is not None:
            for src, dst in plan.lowered.transition_edges:
                plan.edge_dead[(src, dst)] = (
                    len(liveness[name].dead_at(dst, 0)) >= 2
                )
        per_function[name] = plan
    return InstrumentationPlan(per_function, inline_callees, inline_sites)


def resolve_mode(plan: FunctionPlan, mode: str) -> str:
    if mode == "ELIDE-ALL":
        return FN_ELIDED
    if mode == "FULL":
        return FN_FULL
    if mode == "SFE":
        return FN_ELIDED if plan.ra_safe else FN_FULL
    if mode == "PO":
        if plan.ra_safe:
            return FN_ELIDED
        return FN_LOWERED if plan.lowered is not None else FN_FULL
    if mode == "MO":
        if plan.leaf and plan.free_reg is not None:
            return FN_REGFRAME
        return FN_FULL
    if mode == "LIGHT":
        if plan.ra_safe:
            return FN_ELIDED
        if plan.lowered is not None:
            return FN_LOWERED
        if plan.leaf and plan.free_reg is not None:
            return FN_REGFRAME
        return FN_FULL
    raise PlanError(f"unknown mode '{mode}'")


@dataclass
class ResolvedFunction:
    mode: str
    shadow_ops: tuple[ShadowOp, ...] = ()
    clone_map: dict[int, int] | None = None
    transition_blocks: dict[int, tuple[int, int]] = field(default_factory=dict)
    inlined_calls: tuple[tuple[int, int, str], ...] = ()
    chase_shifts: dict[str, tuple] = field(default_factory=dict)
    op_costs: dict[tuple[int, int], tuple[int, int]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "shadow_ops": [
                {
                    "kind": op.kind,
                    "site": list(op.site),
                    "entry_height": op.entry_height,
                    "reg": op.reg,
                    "cost": list(op.cost),
                    "chased": op.chased,
                    "transition": op.transition,
                }
                for op in self.shadow_ops
            ],
            "clone_map": (
                {str(k): v for k, v in self.clone_map.items()} if self.clone_map else None
            ),
            "transition_blocks": {
                str(tid): list(edge) for tid, edge in self.transition_blocks.items()
            },
            "inlined_calls": [list(c) for c in self.inlined_calls],
            "chase_shifts": {k: list(v) for k, v in self.chase_shifts.items()},
            "op_costs": {f"{b}:{i}": list(c) for (b, i), c in self.op_costs.items()},
        }

    @classmethod
    def from_json(cls, data: dict) -> "ResolvedFunction":
        rf = cls(data["mode"])
        rf.shadow_ops = tuple(
            ShadowOp(
                o["kind"],
                tuple(o["site"]),
                o["entry_height"],
                o["reg"],
                tuple(o["cost"]),
                o["chased"],
                o["transition"],
            )
            for o in data["shadow_ops"]
        )
        if data.get("clone_map"):
            rf.clone_map = {int(k): v for k, v in data["clone_map"].items()}
        rf.transition_blocks = {
            int(k): tuple(v) for k, v in data.get("transition_blocks", {}).items()
        }
        rf.inlined_calls = tuple(tuple(c) for c in data.get("inlined_calls", ()))
        rf.chase_shifts = {k: tuple(v) for k, v in data.get("chase_shifts", {}).items()}
        rf.op_costs = {
            (int(k.split(":")[0]), int(k.split(":")[1])): tuple(v)
            for k, v in data.get("op_costs", {}).items()
        }
        return rf


@dataclass
class InstrumentedProgram:
    program: Program
    mode: str
    functions: dict[str, ResolvedFunction]

    def op_cost(self, fn: str, bid: int, idx: int) -> tuple[int, int] | None:
        rf = self.functions.get(fn)
        return rf.op_costs.get((bid, idx)) if rf else None

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "functions": {n: rf.to_json() for n, rf in self.functions.items()},
        }


def _inline_block(
    instrs: tuple[Instr, ...],
    program: Program,
    callees: frozenset[str],
) -> tuple[tuple[Instr, ...], list[tuple[int, str]]]:
    out: list[Instr] = []
    inlined: list[tuple[int, str]] = []
    for idx, ins in enumerate(instrs):
        if ins.opcode == "call" and ins.args[0] in callees:
            body = next(iter(program.functions[ins.args[0]].blocks.values())).instrs
            out.extend(body[:-1])  # splice minus the trailing ret
            inlined.append((idx, ins.args[0]))
        else:
            out.append(ins)
    return tuple(out), inlined


def apply_plan(program: Program, plan: InstrumentationPlan, mode: str) -> InstrumentedProgram:
    """Splice shadow pseudo-instructions and cloned blocks per the plan."""
    if mode not in MODES:
        raise PlanError(f"unknown mode '{mode}'")
    mechanisms = mode in ("MO", "LIGHT")
    callees = plan.inline_callees if mechanisms else frozenset()

    new_functions: dict[str, Function] = {}
    resolved: dict[str, ResolvedFunction] = {}

    for name, fn in program.functions.items():
        fp = plan.per_function.get(name)
        if fp is None:
            raise PlanError(f"stale plan: no entry for function '{name}'")
        fn_mode = resolve_mode(fp, mode)
        rf = ResolvedFunction(fn_mode)
        ops: list[ShadowOp] = []

        def inlined(instrs, bid):
            body, hits = _inline_block(instrs, program, callees)
            if hits:
                rf.inlined_calls += tuple((bid, idx, callee) for idx, callee in hits)
            return body

        blocks: dict[int, Block] = {}

        if fn_mode in (FN_ELIDED, FN_FULL, FN_REGFRAME):
            for bid, block in fn.blocks.items():
                blocks[bid] = Block(bid, inlined(block.instrs, bid))
            if fn_mode != FN_ELIDED:
                entry_bid = fn.entry_block
                if fn_mode == FN_REGFRAME:
                    push = ShadowOp(
                        "rfpush", ("entry", entry_bid), 0, fp.free_reg, COST_RF_PUSH
                    )
                    pop_kind, pop_cost, pop_reg = "rfpop", COST_RF_POP, fp.free_reg
                    k = 0
                else:
                    if mechanisms and fp.entry_chase is not None:
                        k, delta = fp.entry_chase
                    else:
                        k, delta = 0, 0
                    chased = mechanisms and fp.entry_chase is not None
                    site = ("instr", entry_bid, k) if k else ("entry", entry_bid)
                    push = ShadowOp(
                        "push",
                        site,
                        delta,
                        None,
                        COST_PUSH_CHASED if chased else COST_PUSH,
                        chased,
                    )
                    if k:
                        rf.chase_shifts[f"b{entry_bid}:0"] = (entry_bid, k, -delta)
                    pop_kind, pop_cost, pop_reg = "pop", COST_POP, None
                ops.append(push)
                eb = blocks[entry_bid]
                push_ins = (
                    Instr("rfpush", (fp.free_reg,))
                    if fn_mode == FN_REGFRAME
                    else Instr("spush", (push.entry_height,))
                )
                blocks[entry_bid] = Block(
                    entry_bid, eb.instrs[:k] + (push_ins,) + eb.instrs[k:]
                )
                rf.op_costs[(entry_bid, k)] = push.cost
                for ebid in fn.exit_blocks:
                    ops.append(ShadowOp(pop_kind, ("exit", ebid), 0, pop_reg, pop_cost))
                    xb = blocks[ebid]
                    pop_ins = (
                        Instr("rfpop", (fp.free_reg,))
                        if fn_mode == FN_REGFRAME
                        else Instr("spop")
                    )
                    blocks[ebid] = Block(
                        ebid, xb.instrs[:-1] + (pop_ins, xb.instrs[-1])
                    )
                    rf.op_costs[(ebid, len(blocks[ebid].instrs) - 2)] = pop_cost
        else:  # FN_LOWERED
            low = fp.lowered
            rf.clone_map = dict(low.clone_map)
            tids = {
                edge: TRANSITION_BASE + i for i, edge in enumerate(low.transition_edges)
            }
            rf.transition_blocks = {tid: edge for edge, tid in tids.items()}
            tset = set(low.transition_edges)

            def remap_original(ins: Instr, src: int) -> Instr:
                if ins.opcode == "br":
                    t = ins.args[0]
                    if (src, t) in tset:
                        return Instr("br", (tids[(src, t)],))
                elif ins.opcode == "brc":
                    a, b = ins.args
                    na = tids[(src, a)] if (src, a) in tset else a
                    nb = tids[(src, b)] if (src, b) in tset else b
                    if (na, nb) != (a, b):
                        return Instr("brc", (na, nb))
                return ins

            for bid in low.reachable_originals:
                body = inlined(fn.blocks[bid].instrs, bid)
                body = body[:-1] + (remap_original(body[-1], bid),)
                blocks[bid] = Block(bid, body)
            for edge in low.transition_edges:
                tid = tids[edge]
                height = low.push_heights[edge]
                drc = fp.edge_dead.get(edge, False) if mechanisms else False
                base = COST_PUSH_CHASED if drc else COST_PUSH
                cost = (base[0] + COST_TRANSITION_EDGE[0], base[1] + COST_TRANSITION_EDGE[1])
                ops.append(
                    ShadowOp("push", ("edge",) + edge, height, None, cost, drc, True)
                )
                blocks[tid] = Block(
                    tid,
                    (Instr("spush", (height,)), Instr("br", (low.clone_map[edge[1]],))),
                )
                rf.op_costs[(tid, 0)] = cost
            clone_exit_set = set(low.clone_exits)
            for cid in low.reachable_clones:
                orig = fn.blocks[cid - CLONE_OFFSET]
                body = inlined(orig.instrs, cid)
                term = body[-1]
                if term.opcode in ("br", "brc"):
                    term = Instr(
                        term.opcode, tuple(low.clone_map[t] for t in term.args)
                    )
                instrs = body[:-1] + (term,)
                if cid in clone_exit_set:
                    ops.append(ShadowOp("pop", ("exit", cid), 0, None, COST_POP))
                    instrs = instrs[:-1] + (Instr("spop"), instrs[-1])
                    rf.op_costs[(cid, len(instrs) - 2)] = COST_POP
                blocks[cid] = Block(cid, instrs)

        rf.shadow_ops = tuple(ops)
        resolved[name] = rf
        new_functions[name] = Function(name, blocks)

    new_program = Program(
        new_functions,
        entry=program.entry,
        adversarial=program.adversarial,
        source_path=program.source_path,
    )
    return InstrumentedProgram(new_program, mode, resolved)


def strip_instrumentation(ip: InstrumentedProgram) -> Program:
    """Remove shadow instructions and merge cloned regions back onto the
    original block ids.  Inlined call sites are left as spliced."""
    functions: dict[str, Function] = {}
    for name, fn in ip.program.functions.items():
        rf = ip.functions[name]
        transition = rf.transition_blocks

        def remap(target: int) -> int:
            if target in transition:
                return transition[target][1]
            return target - CLONE_OFFSET if target >= CLONE_OFFSET else target

        merged: dict[int, Block] = {}
        for bid, block in fn.blocks.items():
            if bid in transition:
                continue
            orig_id = bid - CLONE_OFFSET if bid >= CLONE_OFFSET else bid
            if orig_id in merged:
                continue
            instrs = []
            for ins in block.instrs:
                if ins.opcode in SHADOW_OPCODES:
                    continue
                if ins.opcode in ("br", "brc"):
                    ins = Instr(ins.opcode, tuple(remap(t) for t in ins.args))
                instrs.append(ins)
            merged[orig_id] = Block(orig_id, tuple(instrs))
        ordered = {bid: merged[bid] for bid in sorted(merged)}
        entry = fn.entry_block
        if entry in ordered:  # keep the entry block first
            ordered = {entry: ordered[entry], **{b: v for b, v in ordered.items() if b != entry}}
        functions[name] = Function(name, ordered)
    return Program(
        functions,
        entry=ip.program.entry,
        adversarial=ip.program.adversarial,
    )
