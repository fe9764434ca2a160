"""Command-line surface: analyze, instrument, run, gen, verify, stats."""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

from .mir import SHADOW_OPCODES, MirError, Program, parse_program, print_program, validate_program
from .transform import (
    FN_ELIDED,
    FN_FULL,
    FN_LOWERED,
    FN_REGFRAME,
    InstrumentedProgram,
    ResolvedFunction,
    analyze_program,
    apply_plan,
    plan_program,
)
from .shadowvm import (
    COMPLETED,
    CampaignCase,
    ExecInput,
    build_checks,
    check_activations,
    execute,
    observables,
    run_campaign,
)
from .gen import GenConfig, generate_corpus, generate_inputs

SOUND_MODES = ("FULL", "SFE", "PO", "MO", "LIGHT")
DETECTION_MODES = ("FULL", "SFE", "PO", "LIGHT")


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load(path: str) -> Program:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SystemExit(f"error: {exc}")
    try:
        program = parse_program(text, path)
    except MirError as exc:
        raise SystemExit(f"{path}:{exc.line}: {exc.msg}")
    has_shadow = any(
        ins.opcode in SHADOW_OPCODES
        for fn in program.functions.values()
        for _, _, ins in fn.iter_instrs()
    )
    diags = validate_program(program, allow_shadow=has_shadow)
    if diags:
        for d in diags:
            print(d.render(path), file=sys.stderr)
        raise SystemExit(1)
    return program


def _fn_modes(program: Program) -> dict[str, str]:
    """Per-function mode the fully optimized configuration would use."""
    _, plan = plan_program(program)
    from .transform import resolve_mode

    return {name: resolve_mode(plan.per_function[name], "LIGHT") for name in program.functions}


def _instr_stats(program: Program) -> dict:
    modes = _fn_modes(program)
    total = len(modes)
    count = lambda m: sum(1 for v in modes.values() if v == m)
    pct = lambda n: 100.0 * n / total if total else 0.0
    return {
        "sfe_pct": pct(count(FN_ELIDED)),
        "spe_pct": pct(count(FN_LOWERED)),
        "rf_pct": pct(count(FN_REGFRAME)),
        "total": total,
    }


def _write_stats(program: Program) -> dict:
    analysis = analyze_program(program)
    stack = sum(s.stack for s in analysis.summaries.values())
    globl = sum(s.global_ for s in analysis.summaries.values())
    unsafe = sum(s.unsafe for s in analysis.summaries.values())
    total = stack + globl + unsafe
    pct = lambda n: 100.0 * n / total if total else 0.0
    return {
        "stack_pct": pct(stack),
        "global_pct": pct(globl),
        "unsafe_pct": pct(unsafe),
        "total": total,
    }


def cmd_analyze(args) -> int:
    from .transform import count_safe_paths

    program = _load(args.file)
    analysis = analyze_program(program)
    out = {
        "safety": analysis.safety.to_json(),
        "instrumentation": _instr_stats(program),
        "writes": _write_stats(program),
        "safe_paths": {
            name: count_safe_paths(fn, analysis.safety)
            for name, fn in program.functions.items()
        },
    }
    if args.json:
        print(json.dumps(out, sort_keys=True, indent=2))
        return 0
    verdicts = out["safety"]["functions"]
    safe = sorted(n for n, v in verdicts.items() if v == "safe")
    unsafe = sorted(n for n, v in verdicts.items() if v == "unsafe")
    print(f"functions safe: {', '.join(safe) or '-'}")
    print(f"functions unsafe: {', '.join(unsafe) or '-'}")
    ist = out["instrumentation"]
    print(
        f"instrumentation: SFE {ist['sfe_pct']:.1f}%  SPE {ist['spe_pct']:.1f}%  "
        f"RF {ist['rf_pct']:.1f}%  of {ist['total']} functions"
    )
    wst = out["writes"]
    print(
        f"writes: stack {wst['stack_pct']:.1f}%  global {wst['global_pct']:.1f}%  "
        f"unsafe {wst['unsafe_pct']:.1f}%  of {wst['total']} stores"
    )
    return 0


def cmd_instrument(args) -> int:
    program = _load(args.file)
    _, plan = plan_program(program)
    ip = apply_plan(program, plan, args.mode)
    diags = validate_program(ip.program, allow_shadow=True)
    if diags:
        for d in diags:
            print(d.render(args.file), file=sys.stderr)
        return 1
    out = Path(args.out)
    _atomic_write(out, print_program(ip.program))
    _atomic_write(out.with_suffix(out.suffix + ".plan.json"), json.dumps(ip.to_json(), sort_keys=True))
    print(f"wrote {out} ({args.mode})")
    return 0


def _parse_input(args) -> ExecInput:
    decisions = ()
    if args.input:
        decisions = tuple(bool(int(tok)) for tok in args.input.split(",") if tok.strip())
    regs = [0] * 16
    for spec in args.reg or ():
        name, _, value = spec.partition("=")
        regs[int(name.lstrip("r"))] = int(value)
    return ExecInput(decisions, tuple(regs))


def cmd_run(args) -> int:
    program = _load(args.file)
    target: Program | InstrumentedProgram = program
    sidecar = Path(args.file + ".plan.json")
    if sidecar.exists():
        data = json.loads(sidecar.read_text())
        target = InstrumentedProgram(
            program,
            data["mode"],
            {n: ResolvedFunction.from_json(d) for n, d in data["functions"].items()},
        )
    trace, outcome = execute(target, _parse_input(args), args.budget)
    if args.json:
        print(
            json.dumps(
                {
                    "outcome": outcome.kind,
                    "r0": outcome.r0,
                    "site": list(outcome.site) if outcome.site else None,
                    "trace": trace.to_json(),
                },
                sort_keys=True,
            )
        )
        return 0
    if args.trace:
        for line in trace.to_lines():
            print(line)
    extra = f" r0={outcome.r0}" if outcome.kind == COMPLETED else ""
    if outcome.site:
        extra = f" at {outcome.site[0]}.b{outcome.site[1]}"
    print(f"outcome: {outcome.kind}{extra}")
    print(
        f"instructions: {trace.instr_count}  shadow: {trace.shadow_instr}  "
        f"memory accesses: {trace.mem_accesses}"
    )
    return 0


def _seed(args) -> int:
    env = os.environ.get("SHADOWLAB_SEED")
    return int(env) if env else args.seed


def cmd_gen(args) -> int:
    cfg = GenConfig(seed=_seed(args), count=args.count, attack_density=args.attack_density)
    out_dir = Path(args.out)
    names = []
    for name, program in generate_corpus(cfg):
        _atomic_write(out_dir / f"{name}.mir", print_program(program))
        names.append(f"{name}.mir")
    manifest = {
        "seed": cfg.seed,
        "count": cfg.count,
        "attack_density": cfg.attack_density,
        "files": names,
    }
    _atomic_write(out_dir / "manifest.json", json.dumps(manifest, sort_keys=True, indent=2))
    print(f"wrote {len(names)} programs to {out_dir}")
    return 0


def cmd_stats(args) -> int:
    rows = []
    for path in sorted(Path(args.dir).glob("*.mir")):
        program = _load(str(path))
        rows.append(
            {
                "name": path.stem,
                "instrumentation": _instr_stats(program),
                "writes": _write_stats(program),
            }
        )
    if not rows:
        print("no .mir files found", file=sys.stderr)
        return 1
    if args.json:
        print(json.dumps(rows, sort_keys=True, indent=2))
        return 0
    header = f"{'program':<12} {'SFE%':>6} {'SPE%':>6} {'RF%':>6} {'fns':>4}  {'stack%':>7} {'global%':>8} {'unsafe%':>8} {'writes':>7}"
    print(header)
    for r in rows:
        ist, wst = r["instrumentation"], r["writes"]
        print(
            f"{r['name']:<12} {ist['sfe_pct']:>6.1f} {ist['spe_pct']:>6.1f} {ist['rf_pct']:>6.1f} "
            f"{ist['total']:>4}  {wst['stack_pct']:>7.1f} {wst['global_pct']:>8.1f} "
            f"{wst['unsafe_pct']:>8.1f} {wst['total']:>7}"
        )
    return 0


@dataclass
class VerifyConfig:
    seed: int = 1
    benign_count: int = 30
    adversarial_count: int = 40
    inputs_per_program: int = 6
    budget: int = 20000
    max_decisions: int = 20


@dataclass
class _Prepared:
    name: str
    program: Program
    targets: dict[str, InstrumentedProgram]
    checks: dict[str, object]
    base_checks: object
    inputs: list[ExecInput]


def _input_seed(cfg: VerifyConfig, name: str) -> int:
    import zlib

    return cfg.seed * 7_919 + zlib.crc32(name.encode())


def _prepare(name: str, program: Program, cfg: VerifyConfig, modes: tuple[str, ...], violations: list[str]):
    diags = validate_program(program)
    if diags:
        violations.extend(f"{name}: {d.reason}" for d in diags)
        return None
    _, plan = plan_program(program)
    targets = {}
    checks = {}
    for mode in modes:
        ip = apply_plan(program, plan, mode)
        bad = validate_program(ip.program, allow_shadow=True)
        if bad:
            violations.extend(f"{name}/{mode}: {d.reason}" for d in bad)
            continue
        targets[mode] = ip
        checks[mode] = build_checks(ip.program)
    inputs = generate_inputs(_input_seed(cfg, name), cfg.inputs_per_program, cfg.max_decisions)
    return _Prepared(name, program, targets, checks, build_checks(program, with_liveness=True), inputs)


def verify_run(cfg: VerifyConfig) -> tuple[dict, bool]:
    """Generate corpora, instrument under every mode, execute, and check the
    whole invariant suite.  Returns (report, all-invariants-hold)."""
    violations: list[str] = []
    counterexamples: list[dict] = []

    benign = generate_corpus(
        GenConfig(seed=cfg.seed, count=cfg.benign_count, attack_density=0.0, budget=cfg.budget)
    )
    adversarial = generate_corpus(
        GenConfig(seed=cfg.seed + 1, count=cfg.adversarial_count, attack_density=1.0, budget=cfg.budget)
    )

    # ---- benign corpus: transparency, per-trace monotonicity, aggregates ----
    mode_totals = {m: {"shadow_instr": 0, "total_instr": 0, "shadow_ops": 0} for m in SOUND_MODES}
    transparency_pairs = 0
    transparency_bad = 0
    mono_bad = 0
    height_bad = 0
    liveness_bad = 0
    coverage = {FN_ELIDED: 0, FN_FULL: 0, FN_LOWERED: 0, FN_REGFRAME: 0}

    for name, program in benign:
        prepared = _prepare(name, program, cfg, SOUND_MODES, violations)
        if prepared is None:
            continue
        light = prepared.targets.get("LIGHT")
        if light:
            for rf in light.functions.values():
                coverage[rf.mode] += 1
        for i, inp in enumerate(prepared.inputs):
            base_trace, base_outcome = execute(program, inp, cfg.budget, prepared.base_checks)
            height_bad += len(base_trace.height_violations)
            liveness_bad += len(base_trace.liveness_violations)
            if base_outcome.kind != COMPLETED:
                violations.append(f"{name}[{i}]: benign base run ended {base_outcome.kind}")
                continue
            base_obs = observables(base_trace, base_outcome)
            ops = {}
            for mode in SOUND_MODES:
                ip = prepared.targets.get(mode)
                if ip is None:
                    continue
                trace, outcome = execute(ip, inp, cfg.budget, prepared.checks[mode])
                height_bad += len(trace.height_violations)
                transparency_pairs += 1
                if observables(trace, outcome) != base_obs:
                    transparency_bad += 1
                    violations.append(f"{name}[{i}]/{mode}: observables diverge from base")
                case = CampaignCase(name, mode, ip, inp, False, budget=cfg.budget)
                violations.extend(check_activations(case, trace, outcome))
                ops[mode] = trace.shadow_ops
                totals = mode_totals[mode]
                totals["shadow_instr"] += trace.shadow_instr
                totals["total_instr"] += trace.total_instr
                totals["shadow_ops"] += trace.shadow_ops
            chain = ("LIGHT", "PO", "SFE", "FULL")
            if all(m in ops for m in chain):
                if not (ops["LIGHT"] <= ops["PO"] <= ops["SFE"] <= ops["FULL"]):
                    mono_bad += 1
                    violations.append(f"{name}[{i}]: shadow-op counts not monotone {ops}")

    ratios = {}
    for mode, totals in mode_totals.items():
        ratios[mode] = totals["shadow_instr"] / totals["total_instr"] if totals["total_instr"] else 0.0
    ladder = ("FULL", "SFE", "PO", "LIGHT")
    ratio_ok = all(ratios[a] > ratios[b] for a, b in zip(ladder, ladder[1:]))
    if not ratio_ok:
        violations.append(f"aggregate overhead ratios not strictly decreasing: {ratios}")

    # ---- adversarial corpus: detection under sound modes, control mode ----
    cases = []
    control_cases = []
    for name, program in adversarial:
        prepared = _prepare(name, program, cfg, DETECTION_MODES + ("ELIDE-ALL",), violations)
        if prepared is None:
            continue
        for mode in DETECTION_MODES:
            ip = prepared.targets.get(mode)
            if ip is None:
                continue
            for inp in prepared.inputs:
                cases.append(
                    CampaignCase(name, mode, ip, inp, True, prepared.checks[mode], cfg.budget)
                )
        control_ip = prepared.targets.get("ELIDE-ALL")
        if control_ip is not None:
            for inp in prepared.inputs:
                control_cases.append(
                    CampaignCase(name, "ELIDE-ALL", control_ip, inp, True, None, cfg.budget)
                )
    report = run_campaign(cases, cfg.budget)
    violations.extend(report.violations)
    counterexamples.extend(report.counterexamples)

    control = run_campaign(control_cases, cfg.budget)
    violations.extend(control.violations)
    control_undetected = control.undetected

    # ---- determinism spot check ----
    determinism_ok = True
    for case in cases[:3]:
        t1, o1 = execute(case.target, case.inp, cfg.budget)
        t2, o2 = execute(case.target, case.inp, cfg.budget)
        if t1.events != t2.events or o1 != o2:
            determinism_ok = False
            violations.append(f"{case.name}/{case.mode}: nondeterministic trace")

    checks = {
        "validation_soundness": report.undetected == 0 and report.fired > 0,
        "detection_rate": report.fired > 0 and report.detected == report.fired,
        "control_detects_missing_instrumentation": control_undetected > 0,
        "transparency": transparency_bad == 0 and transparency_pairs > 0,
        "shadow_op_monotonicity": mono_bad == 0,
        "aggregate_overhead_ladder": ratio_ok,
        "height_soundness": height_bad == 0,
        "liveness_soundness": liveness_bad == 0,
        "exactly_one_check_and_balance": not any(v.startswith("activation: ") for v in violations),
        "plan_mode_coverage": all(coverage[m] > 0 for m in coverage),
        "determinism": determinism_ok,
        "no_other_violations": not violations,
    }
    out = {
        "seed": cfg.seed,
        "adversarial_executions": report.cases,
        "fired": report.fired,
        "detected": report.detected,
        "undetected": report.undetected,
        "control_undetected": control_undetected,
        "transparency_pairs": transparency_pairs,
        "overhead_ratios": ratios,
        "plan_coverage": coverage,
        "checks": checks,
        "violations": violations[:100],
        "counterexamples": counterexamples[:3],
    }
    return out, all(checks.values())


def cmd_verify(args) -> int:
    cfg = VerifyConfig(
        seed=_seed(args),
        benign_count=args.benign,
        adversarial_count=args.count,
        inputs_per_program=args.inputs,
        budget=args.budget,
    )
    report, ok = verify_run(cfg)
    if args.json:
        print(json.dumps(report, sort_keys=True, indent=2))
    else:
        for check, passed in report["checks"].items():
            print(f"{'PASS' if passed else 'FAIL'}: {check}")
        print(
            f"adversarial executions: {report['adversarial_executions']} "
            f"(fired {report['fired']}, detected {report['detected']}, "
            f"undetected {report['undetected']}, control undetected {report['control_undetected']})"
        )
        print("overhead ratios: " + "  ".join(f"{m}={r:.4f}" for m, r in report["overhead_ratios"].items()))
        for v in report["violations"][:10]:
            print(f"  violation: {v}")
    if args.out:
        _atomic_write(Path(args.out), json.dumps(report, sort_keys=True, indent=2))
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="shadowlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="safety verdicts and statistics for one program")
    p.add_argument("file")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("instrument", help="write an instrumented program")
    p.add_argument("file")
    p.add_argument("--mode", required=True, choices=["FULL", "SFE", "PO", "MO", "LIGHT", "ELIDE-ALL"])
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(fn=cmd_instrument)

    p = sub.add_parser("run", help="execute a program")
    p.add_argument("file")
    p.add_argument("--input", default="", help="comma-separated branch decisions, e.g. 1,0,1")
    p.add_argument("--reg", action="append", help="initial register, e.g. --reg r1=5")
    p.add_argument("--budget", type=int, default=100000)
    p.add_argument("--trace", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("gen", help="generate a corpus directory")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--out", required=True)
    p.add_argument("--attack-density", type=float, default=0.0)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("verify", help="run the full verification campaign")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--count", type=int, default=40, help="adversarial programs")
    p.add_argument("--benign", type=int, default=30, help="benign programs")
    p.add_argument("--inputs", type=int, default=6, help="inputs per program")
    p.add_argument("--budget", type=int, default=20000)
    p.add_argument("--json", action="store_true")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("stats", help="aggregate statistics over a corpus directory")
    p.add_argument("dir")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_stats)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
