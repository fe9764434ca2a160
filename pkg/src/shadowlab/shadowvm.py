"""Deterministic interpreter with a shadow region and attack injection.

Return addresses are opaque nonzero cookies identifying call sites, not code
addresses; `ret` transfers through the cookie stored in the frame's slot, so
any overwrite of that slot is either caught by a shadow check (Aborted) or
surfaces as UndetectedCorruption the moment a return consumes it.

The shadow region holds a stack of cookies plus one scratch word; the pop
operation unwinds the shadow until the on-stack return address matches or the
zeroed guard at the bottom is reached, which aborts.  Costs are charged per
executed shadow operation from the instrumentation plan's cost table rather
than by expanding shadow operations into micro-instructions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

from .mir import Program, RETURN_REG
from .analysis import HeightMap, LivenessMap, UNSAFE, instr_defs, instr_uses
from .transform import (
    CLONE_OFFSET,
    COST_POP,
    COST_PUSH,
    COST_RF_POP,
    COST_RF_PUSH,
    FN_LOWERED,
    InstrumentedProgram,
)

MEM_BYTES = 1 << 16
STACK_FLOOR = 8192          # call fault below this; [0, STACK_FLOOR) is the data arena
SHADOW_CAPACITY = 4096
COOKIE_BASE = 1 << 48
EXIT_COOKIE = 1 << 49
MASK = (1 << 64) - 1

DEFAULT_COSTS = {"spush": COST_PUSH, "spop": COST_POP, "rfpush": COST_RF_PUSH, "rfpop": COST_RF_POP}


class CallEv(NamedTuple):
    act: int
    fn: str
    shadow_top: int


class EnterEv(NamedTuple):
    act: int
    fn: str
    bid: int


class StoreEv(NamedTuple):
    act: int
    fn: str
    bid: int
    idx: int
    wclass: str | None
    addr: int
    height: int | None


class PushEv(NamedTuple):
    act: int
    fn: str
    bid: int
    idx: int
    rf: bool


class PopEv(NamedTuple):
    act: int
    fn: str
    bid: int
    idx: int
    matched_after: int
    rf: bool


class CorruptEv(NamedTuple):
    act: int
    depth: int
    target_act: int


class RetEv(NamedTuple):
    act: int
    fn: str
    ok: bool
    shadow_top: int


class AbortEv(NamedTuple):
    act: int
    fn: str
    bid: int
    idx: int


class HaltEv(NamedTuple):
    r0: int


class UnwindEv(NamedTuple):
    act: int
    count: int


class FaultEv(NamedTuple):
    reason: str


COMPLETED = "completed"
ABORTED = "aborted"
UNDETECTED = "undetected"
BUDGET = "budget"
FAULT = "fault"


@dataclass(frozen=True)
class Outcome:
    kind: str
    site: tuple | None = None
    evidence: tuple | None = None
    r0: int | None = None


@dataclass(frozen=True)
class ExecInput:
    decisions: tuple[bool, ...] = ()
    regs: tuple[int, ...] = (0,) * 16


@dataclass
class AnalysisChecks:
    """Per-function analysis results the VM validates while executing."""

    heights: Mapping[str, HeightMap] | None = None
    liveness: Mapping[str, LivenessMap] | None = None
    classes: Mapping[str, Mapping[tuple[int, int], str]] | None = None


@dataclass
class Trace:
    events: list
    instr_count: int = 0
    shadow_instr: int = 0
    shadow_mem: int = 0
    shadow_ops: int = 0
    mem_accesses: int = 0
    final_shadow_top: int = 0
    globals_log: list = field(default_factory=list)
    height_violations: list = field(default_factory=list)
    liveness_violations: list = field(default_factory=list)

    @property
    def total_instr(self) -> int:
        return self.instr_count + self.shadow_instr

    def to_lines(self) -> list[str]:
        return [f"{type(e).__name__[:-2].lower()} {' '.join(str(v) for v in e)}" for e in self.events]

    def to_json(self) -> dict:
        return {
            "events": [[type(e).__name__[:-2].lower(), *e] for e in self.events],
            "instr_count": self.instr_count,
            "shadow_instr": self.shadow_instr,
            "shadow_mem": self.shadow_mem,
            "shadow_ops": self.shadow_ops,
            "mem_accesses": self.mem_accesses,
            "globals": [list(g) for g in self.globals_log],
        }


@dataclass
class Frame:
    act: int
    fn: str
    ra_slot: int
    cookie: int
    ret_to: tuple | None
    poison: set = field(default_factory=set)

    @property
    def entry_sp(self) -> int:
        return self.ra_slot


class _VmFault(Exception):
    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


def observables(trace: Trace, outcome: Outcome) -> tuple:
    """What a benign run exposes: outcome kind, r0 at halt, global stores."""
    return outcome.kind, outcome.r0, tuple(trace.globals_log)


def build_checks(program: Program, with_liveness: bool = False) -> AnalysisChecks:
    """Analysis results for the given program, for the VM to validate live."""
    from .analysis import classify_writes, dead_registers, stack_heights

    heights = {name: stack_heights(fn) for name, fn in program.functions.items()}
    classes = {
        name: classify_writes(fn, heights[name])[0] for name, fn in program.functions.items()
    }
    liveness = None
    if with_liveness:
        liveness = {name: dead_registers(fn) for name, fn in program.functions.items()}
    return AnalysisChecks(heights, liveness, classes)


def execute(
    target: InstrumentedProgram | Program,
    inp: ExecInput = ExecInput(),
    budget: int = 10000,
    checks: AnalysisChecks | None = None,
) -> tuple[Trace, Outcome]:
    """Small-step execution; deterministic in (target, inp)."""
    if isinstance(target, InstrumentedProgram):
        program, ip = target.program, target
    else:
        program, ip = target, None

    code = {name: {bid: b.instrs for bid, b in fn.blocks.items()} for name, fn in program.functions.items()}
    entries = {name: fn.entry_block for name, fn in program.functions.items()}
    fn_by_index = tuple(program.functions)

    cookies: dict[tuple[str, int, int], int] = {}
    for name, fn in program.functions.items():
        for bid, idx, ins in fn.iter_instrs():
            if ins.opcode in ("call", "icall"):
                cookies[(name, bid, idx)] = COOKIE_BASE + len(cookies) + 1

    mem = [0] * (MEM_BYTES // 8)
    regs = [v & MASK for v in inp.regs] + [0] * (16 - len(inp.regs))
    decisions = inp.decisions
    di = 0

    sp = MEM_BYTES - 8
    mem[sp >> 3] = EXIT_COOKIE
    frames = [Frame(0, program.entry, sp, EXIT_COOKIE, None)]
    next_act = 1

    shadow = [0] * SHADOW_CAPACITY
    shadow_top = 0
    scratch = 0

    trace = Trace(events=[])
    ev = trace.events.append
    fname, bid, idx = program.entry, entries[program.entry], 0
    ev(EnterEv(0, fname, bid))
    steps = 0
    checks_enabled = checks is not None
    h_maps = checks.heights if checks else None
    l_maps = checks.liveness if checks else None
    c_maps = checks.classes if checks else None

    def word(addr: int) -> int:
        if addr % 8 or not 0 <= addr < MEM_BYTES:
            raise _VmFault(f"bad word address {addr}")
        return addr >> 3

    def stack_ra(frame: Frame) -> int:
        return mem[frame.ra_slot >> 3]

    outcome: Outcome | None = None
    try:
        while True:
            if steps >= budget:
                outcome = Outcome(BUDGET)
                break
            steps += 1
            ins = code[fname][bid][idx]
            op = ins.opcode
            frame = frames[-1]
            act = frame.act

            if checks_enabled:
                if l_maps is not None and fname in l_maps:
                    dead = l_maps[fname].dead.get((bid, idx))
                    if dead:
                        frame.poison |= dead
                    uses = instr_uses(ins)
                    bad = uses & frame.poison
                    if bad:
                        trace.liveness_violations.append((fname, bid, idx, tuple(sorted(bad))))
                    frame.poison -= instr_defs(ins)

            if op in ("spush", "spop", "rfpush", "rfpop"):
                cost = (ip.op_cost(fname, bid, idx) if ip else None) or DEFAULT_COSTS[op]
                trace.shadow_instr += cost[0]
                trace.shadow_mem += cost[1]
                trace.shadow_ops += 1
                if op == "spush":
                    ra_addr = sp - ins.args[0]
                    val = mem[word(ra_addr)]
                    if shadow_top >= SHADOW_CAPACITY:
                        raise _VmFault("shadow region overflow")
                    shadow[shadow_top] = val
                    shadow_top += 1
                    ev(PushEv(act, fname, bid, idx, False))
                elif op == "spop":
                    ra = stack_ra(frame)
                    matched = -1
                    k = 0
                    while shadow_top > 0:
                        shadow_top -= 1
                        if shadow[shadow_top] == ra:
                            matched = k
                            break
                        k += 1
                    if matched < 0:
                        ev(AbortEv(act, fname, bid, idx))
                        outcome = Outcome(ABORTED, site=(fname, bid, idx))
                        break
                    ev(PopEv(act, fname, bid, idx, matched, False))
                elif op == "rfpush":
                    r = ins.args[0]
                    scratch = regs[r]
                    regs[r] = stack_ra(frame)
                    ev(PushEv(act, fname, bid, idx, True))
                else:  # rfpop
                    r = ins.args[0]
                    ra = stack_ra(frame)
                    if regs[r] == ra:
                        regs[r] = scratch
                        ev(PopEv(act, fname, bid, idx, 0, True))
                    else:
                        matched = -1
                        k = 0
                        while shadow_top > 0:
                            shadow_top -= 1
                            if shadow[shadow_top] == ra:
                                matched = k
                                break
                            k += 1
                        if matched < 0:
                            ev(AbortEv(act, fname, bid, idx))
                            outcome = Outcome(ABORTED, site=(fname, bid, idx))
                            break
                        regs[r] = scratch
                        ev(PopEv(act, fname, bid, idx, matched, True))
                idx += 1
                continue

            trace.instr_count += 1

            if op == "movi":
                regs[ins.args[0]] = ins.args[1] & MASK
            elif op == "movr":
                regs[ins.args[0]] = regs[ins.args[1]]
            elif op == "binop":
                regs[ins.args[0]] = (regs[ins.args[0]] + regs[ins.args[1]]) & MASK
            elif op == "lea.sp":
                regs[ins.args[0]] = (sp + ins.args[1]) & MASK
            elif op == "spadd":
                sp += ins.args[0]
            elif op == "spmov":
                sp = regs[ins.args[0]]
            elif op in ("store.sp", "store.reg"):
                addr = sp + ins.args[0] if op == "store.sp" else regs[ins.args[0]]
                mem[word(addr)] = regs[RETURN_REG]
                trace.mem_accesses += 1
                height = addr - frame.ra_slot
                wclass = None
                if c_maps is not None and fname in c_maps:
                    wclass = c_maps[fname].get((bid, idx))
                if checks_enabled and h_maps is not None and fname in h_maps:
                    dest = h_maps[fname].dest(bid, idx)
                    if isinstance(dest, int) and height != dest:
                        trace.height_violations.append((fname, bid, idx, dest, height))
                ev(StoreEv(act, fname, bid, idx, wclass, addr, height))
            elif op == "store.global":
                name = ins.args[0]
                trace.globals_log.append((name, regs[RETURN_REG]))
                trace.mem_accesses += 1
                ev(StoreEv(act, fname, bid, idx, "global", -1, None))
            elif op == "load.sp":
                regs[ins.args[0]] = mem[word(sp + ins.args[1])]
                trace.mem_accesses += 1
            elif op == "load.reg":
                regs[ins.args[0]] = mem[word(regs[ins.args[1]])]
                trace.mem_accesses += 1
            elif op == "corrupt":
                depth = min(ins.args[0], len(frames) - 1)
                victim = frames[-1 - depth]
                mem[victim.ra_slot >> 3] = ins.args[1] & MASK
                trace.mem_accesses += 1
                ev(CorruptEv(act, depth, victim.act))
            elif op in ("call", "icall"):
                if op == "call":
                    callee = ins.args[0]
                else:
                    address = regs[ins.args[0]]
                    if not 0 <= address < len(fn_by_index):
                        raise _VmFault(f"indirect call to invalid address {address}")
                    callee = fn_by_index[address]
                cookie = cookies[(fname, bid, idx)]
                sp -= 8
                if sp < STACK_FLOOR:
                    raise _VmFault("stack overflow")
                mem[word(sp)] = cookie
                trace.mem_accesses += 1
                frames.append(Frame(next_act, callee, sp, cookie, (fname, bid, idx + 1)))
                ev(CallEv(next_act, callee, shadow_top))
                next_act += 1
                fname, bid, idx = callee, entries[callee], 0
                ev(EnterEv(frames[-1].act, fname, bid))
                continue
            elif op == "ret":
                value = stack_ra(frame)
                trace.mem_accesses += 1
                frames.pop()
                sp = frame.ra_slot + 8
                ok = value == frame.cookie
                ev(RetEv(act, fname, ok, shadow_top))
                if not ok:
                    outcome = Outcome(
                        UNDETECTED, evidence=(fname, frame.cookie, value)
                    )
                    break
                if frame.ret_to is None:
                    outcome = Outcome(COMPLETED, r0=regs[RETURN_REG])
                    break
                fname, bid, idx = frame.ret_to
                continue
            elif op == "halt":
                ev(HaltEv(regs[RETURN_REG]))
                outcome = Outcome(COMPLETED, r0=regs[RETURN_REG])
                break
            elif op == "br":
                bid, idx = ins.args[0], 0
                ev(EnterEv(act, fname, bid))
                continue
            elif op == "brc":
                take = decisions[di] if di < len(decisions) else False
                di += 1
                bid, idx = ins.args[0 if take else 1], 0
                ev(EnterEv(act, fname, bid))
                continue
            elif op == "unwind":
                k = ins.args[0]
                if k >= len(frames):
                    raise _VmFault(f"unwind {k} with {len(frames)} frames")
                del frames[-k:]
                sp = frames[-1].ra_slot
                checks_enabled = False  # frame/function pairing no longer matches the analyses
                ev(UnwindEv(act, k))
            else:
                raise _VmFault(f"unhandled opcode {op}")
            idx += 1
    except _VmFault as fault:
        ev(FaultEv(fault.reason))
        outcome = Outcome(FAULT, evidence=(fault.reason,))

    trace.final_shadow_top = shadow_top
    return trace, outcome


@dataclass
class CampaignCase:
    name: str
    mode: str
    target: InstrumentedProgram
    inp: ExecInput
    adversarial: bool
    checks: AnalysisChecks | None = None
    budget: int = 10000


@dataclass
class CampaignReport:
    cases: int = 0
    fired: int = 0
    detected: int = 0
    undetected: int = 0
    per_mode: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)
    counterexamples: list = field(default_factory=list)

    def mode_stats(self, mode: str) -> dict:
        return self.per_mode.setdefault(
            mode, {"runs": 0, "shadow_instr": 0, "total_instr": 0, "shadow_ops": 0}
        )

    def to_json(self) -> dict:
        per_mode = {}
        for mode, st in sorted(self.per_mode.items()):
            ratio = st["shadow_instr"] / st["total_instr"] if st["total_instr"] else 0.0
            per_mode[mode] = dict(st, overhead_ratio=ratio)
        return {
            "cases": self.cases,
            "fired": self.fired,
            "detected": self.detected,
            "undetected": self.undetected,
            "per_mode": per_mode,
            "violations": self.violations[:50],
        }


def check_activations(case: CampaignCase, trace: Trace, outcome: Outcome) -> list[str]:
    """Per-activation structural checks: one covering check per tainted walk,
    clean safe walks, ordered push/pop pairs, and shadow-depth balance."""
    problems: list[str] = []
    acts: dict[int, dict] = {}

    def rec(act, fn=None):
        r = acts.get(act)
        if r is None:
            r = acts[act] = {
                "fn": fn,
                "push": [],
                "pop": [],
                "clone": False,
                "unsafe": [],
                "call_top": None,
                "ret_top": None,
            }
        return r

    for pos, e in enumerate(trace.events):
        if isinstance(e, CallEv):
            rec(e.act, e.fn)["call_top"] = e.shadow_top
        elif isinstance(e, EnterEv):
            r = rec(e.act, e.fn)
            if e.bid >= CLONE_OFFSET:
                r["clone"] = True
        elif isinstance(e, PushEv):
            rec(e.act, e.fn)["push"].append(pos)
        elif isinstance(e, PopEv):
            rec(e.act, e.fn)["pop"].append(pos)
        elif isinstance(e, StoreEv) and e.wclass == UNSAFE:
            rec(e.act, e.fn)["unsafe"].append(pos)
        elif isinstance(e, RetEv):
            rec(e.act, e.fn)["ret_top"] = e.shadow_top

    plans = case.target.functions
    for act, r in acts.items():
        fn = r["fn"]
        if fn is None or fn not in plans:
            continue
        where = f"{case.name}/{case.mode} act {act} fn {fn}"
        if plans[fn].mode == FN_LOWERED:
            if r["clone"]:
                completed = r["ret_top"] is not None or outcome.kind == COMPLETED
                if len(r["push"]) != 1 or (completed and len(r["pop"]) != 1):
                    problems.append(
                        f"activation: {where}: tainted walk executed {len(r['push'])} pushes, {len(r['pop'])} pops"
                    )
                elif r["pop"] and r["pop"][0] < r["push"][0]:
                    problems.append(f"activation: {where}: pop before push")
                for pos in r["unsafe"]:
                    if r["push"] and pos < r["push"][0]:
                        problems.append(f"activation: {where}: unsafe store before the covering push")
                    if r["pop"] and pos > r["pop"][0]:
                        problems.append(f"activation: {where}: unsafe store after the covering pop")
            else:
                if r["push"] or r["pop"]:
                    problems.append(f"activation: {where}: safe walk executed shadow operations")
                if r["unsafe"]:
                    problems.append(f"activation: {where}: unsafe store on a walk that never left safe blocks")
        if r["call_top"] is not None and r["ret_top"] is not None:
            if r["call_top"] != r["ret_top"]:
                problems.append(
                    f"activation: {where}: shadow depth {r['ret_top']} at return, {r['call_top']} at call"
                )
    if outcome.kind == COMPLETED and trace.final_shadow_top != 0:
        problems.append(f"activation: {case.name}/{case.mode}: shadow not balanced at completion")
    return problems


def run_campaign(cases: list[CampaignCase], budget: int = 10000) -> CampaignReport:
    """Execute all cases, aggregate detection and overhead, check invariants."""
    report = CampaignReport()
    for case in cases:
        trace, outcome = execute(case.target, case.inp, case.budget or budget, case.checks)
        report.cases += 1
        st = report.mode_stats(case.mode)
        st["runs"] += 1
        st["shadow_instr"] += trace.shadow_instr
        st["total_instr"] += trace.total_instr
        st["shadow_ops"] += trace.shadow_ops

        fired = any(isinstance(e, CorruptEv) for e in trace.events)
        if fired:
            report.fired += 1
            if outcome.kind == ABORTED:
                report.detected += 1
            elif outcome.kind == UNDETECTED:
                report.undetected += 1
                report.counterexamples.append(
                    {"case": case.name, "mode": case.mode, "trace": trace.to_json()}
                )
            else:
                report.violations.append(
                    f"{case.name}/{case.mode}: corruption fired but run ended {outcome.kind}"
                )
        elif outcome.kind not in (COMPLETED,):
            report.violations.append(
                f"{case.name}/{case.mode}: benign-path run ended {outcome.kind}"
            )

        for v in trace.height_violations:
            report.violations.append(f"{case.name}/{case.mode}: height violation {v}")
        for v in trace.liveness_violations:
            report.violations.append(f"{case.name}/{case.mode}: liveness violation {v}")
        report.violations.extend(check_activations(case, trace, outcome))
    return report
