import json

import pytest

from shadowlab.cli import main
from shadowlab.gen import GenConfig, generate_corpus, generate_inputs
from shadowlab.mir import parse_program, print_program, validate_program

from conftest import CALL_TREE, MEMO_CFG


def write_fixture(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_corpus_regeneration_is_identical():
    cfg = GenConfig(seed=1, count=10, attack_density=0.5)
    first = [(n, print_program(p)) for n, p in generate_corpus(cfg)]
    second = [(n, print_program(p)) for n, p in generate_corpus(cfg)]
    assert first == second


def test_corpus_density_zero_has_no_attacks():
    for _, p in generate_corpus(GenConfig(seed=3, count=10, attack_density=0.0)):
        assert not p.adversarial
        assert not any(
            ins.opcode == "corrupt" for fn in p.functions.values() for _, _, ins in fn.iter_instrs()
        )


def test_corpus_density_half_count_fixed_by_seed():
    corpus = generate_corpus(GenConfig(seed=5, count=20, attack_density=0.5))
    adversarial = sum(1 for _, p in corpus if p.adversarial)
    assert adversarial == 8  # frozen by seed 5
    assert 0 < adversarial < 20


def test_corpus_programs_validate():
    for _, p in generate_corpus(GenConfig(seed=11, count=25, attack_density=0.4)):
        assert validate_program(p) == []


def test_adversarial_mains_always_return():
    for _, p in generate_corpus(GenConfig(seed=13, count=15, attack_density=1.0)):
        main_fn = p.functions["main"]
        terminators = {main_fn.blocks[b].terminator.opcode for b in main_fn.exit_blocks}
        assert terminators == {"ret"}


def test_halt_only_in_entry_function():
    for _, p in generate_corpus(GenConfig(seed=17, count=20, attack_density=0.5)):
        for fn in p.functions.values():
            if fn.name == "main":
                continue
            assert not any(ins.opcode == "halt" for _, _, ins in fn.iter_instrs())


def test_safe_fraction_guarantee():
    from shadowlab.transform import analyze_program

    cfg = GenConfig(seed=19, count=10, safe_fraction=0.4)
    for _, p in generate_corpus(cfg):
        analysis = analyze_program(p)
        n = len(p.functions)
        want = min(n - 2, max(1, round(cfg.safe_fraction * n)))
        safe = sum(1 for name in p.functions if analysis.safety.ra_safe_fn(name))
        assert safe >= want


def test_generated_inputs_deterministic():
    assert generate_inputs(9, 4) == generate_inputs(9, 4)


def test_corpus_respects_size_bounds():
    cfg = GenConfig(seed=23, count=50, attack_density=0.5)
    for _, p in generate_corpus(cfg):
        assert cfg.min_functions <= len(p.functions) <= cfg.max_functions
        for fn in p.functions.values():
            assert len(fn.blocks) <= cfg.max_blocks
            assert all(len(b.instrs) <= cfg.max_instrs for b in fn.blocks.values())


def test_config_rejects_bad_bounds():
    with pytest.raises(ValueError):
        GenConfig(count=0)
    with pytest.raises(ValueError):
        GenConfig(max_blocks=2)


def test_cli_analyze_text(capsys, tmp_path):
    path = write_fixture(tmp_path, "a.mir", CALL_TREE)
    assert main(["analyze", path]) == 0
    out = capsys.readouterr().out
    assert "functions safe: b, d, e" in out
    assert "functions unsafe: a, c, f" in out


def test_cli_analyze_json_stable(capsys, tmp_path):
    path = write_fixture(tmp_path, "a.mir", CALL_TREE)
    assert main(["analyze", path, "--json"]) == 0
    out = capsys.readouterr().out
    parsed = json.loads(out)
    assert json.dumps(parsed, sort_keys=True, indent=2) == out.strip()
    assert parsed["safety"]["functions"]["c"] == "unsafe"


def test_cli_analyze_memo_cfg(capsys, tmp_path):
    path = write_fixture(tmp_path, "b.mir", MEMO_CFG)
    assert main(["analyze", path, "--json"]) == 0
    parsed = json.loads(capsys.readouterr().out)
    assert parsed["safety"]["blocks"]["memo.b4"] == "unsafe"
    assert parsed["safe_paths"]["memo"] == 2
    assert parsed["instrumentation"]["spe_pct"] == 100.0


def test_cli_analyze_rejects_invalid(capsys, tmp_path):
    path = write_fixture(tmp_path, "bad.mir", "fn f {\nb0:\n  corrupt 0, 1\n  ret\n}\n")
    with pytest.raises(SystemExit):
        main(["analyze", path])


def test_cli_instrument_modes(capsys, tmp_path):
    path = write_fixture(tmp_path, "a.mir", CALL_TREE)
    out = tmp_path / "a_sfe.mir"
    assert main(["instrument", path, "--mode", "SFE", "-o", str(out)]) == 0
    text = out.read_text()
    instrumented = parse_program(text)
    for name in ("a", "c", "f"):
        body = {i.opcode for _, _, i in instrumented.functions[name].iter_instrs()}
        assert "spush" in body and "spop" in body
    for name in ("b", "d", "e"):
        body = {i.opcode for _, _, i in instrumented.functions[name].iter_instrs()}
        assert not body & {"spush", "spop"}
    assert (tmp_path / "a_sfe.mir.plan.json").exists()


def test_cli_instrument_full_everywhere(capsys, tmp_path):
    path = write_fixture(tmp_path, "a.mir", CALL_TREE)
    out = tmp_path / "a_full.mir"
    assert main(["instrument", path, "--mode", "FULL", "-o", str(out)]) == 0
    instrumented = parse_program(out.read_text())
    for fn in instrumented.functions.values():
        assert any(i.opcode == "spush" for _, _, i in fn.iter_instrs())


def test_cli_instrument_light_keeps_transition_push(capsys, tmp_path):
    path = write_fixture(tmp_path, "b.mir", MEMO_CFG)
    out = tmp_path / "b_light.mir"
    assert main(["instrument", path, "--mode", "LIGHT", "-o", str(out)]) == 0
    instrumented = parse_program(out.read_text())
    memo_fn = instrumented.functions["memo"]
    transition = [b for b in memo_fn.blocks.values() if b.instrs[0].opcode == "spush" and len(b.instrs) == 2]
    assert len(transition) == 1


def test_cli_instrument_deterministic(capsys, tmp_path):
    path = write_fixture(tmp_path, "a.mir", CALL_TREE)
    out1, out2 = tmp_path / "o1.mir", tmp_path / "o2.mir"
    main(["instrument", path, "--mode", "LIGHT", "-o", str(out1)])
    main(["instrument", path, "--mode", "LIGHT", "-o", str(out2)])
    assert out1.read_bytes() == out2.read_bytes()


def test_cli_run_instrumented_file(capsys, tmp_path):
    path = write_fixture(tmp_path, "b.mir", MEMO_CFG)
    out = tmp_path / "b_po.mir"
    main(["instrument", path, "--mode", "PO", "-o", str(out)])
    capsys.readouterr()
    assert main(["run", str(out), "--input", "1,1,0", "--json"]) == 0
    blob = json.loads(capsys.readouterr().out)
    assert blob["outcome"] == "completed"
    # the sidecar plan prices the transition push at 10 instructions
    assert blob["trace"]["shadow_instr"] == 21


def test_cli_run_trace_lines(capsys, tmp_path):
    path = write_fixture(tmp_path, "a.mir", CALL_TREE)
    assert main(["run", path, "--input", "1", "--trace"]) == 0
    out = capsys.readouterr().out
    assert "outcome: completed" in out
    assert "call" in out


def test_cli_run_registers(capsys, tmp_path):
    path = write_fixture(
        tmp_path, "r.mir", "fn main {\nb0:\n  movr r0, r5\n  halt\n}\n"
    )
    assert main(["run", path, "--reg", "r5=77"]) == 0
    assert "r0=77" in capsys.readouterr().out


def test_cli_gen_and_stats(capsys, tmp_path):
    out_dir = tmp_path / "corpus"
    assert main(["gen", "--seed", "3", "--count", "4", "--out", str(out_dir)]) == 0
    capsys.readouterr()
    files = sorted(f.name for f in out_dir.glob("*.mir"))
    assert files == [f"prog_{i:04d}.mir" for i in range(4)]
    manifest = json.loads((out_dir / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["count"] == 4
    assert main(["stats", str(out_dir), "--json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert len(rows) == 4
    for row in rows:
        assert 0 <= row["writes"]["unsafe_pct"] <= 100


def test_cli_gen_seed_env_override(capsys, tmp_path, monkeypatch):
    a, b = tmp_path / "a", tmp_path / "b"
    monkeypatch.setenv("SHADOWLAB_SEED", "99")
    main(["gen", "--seed", "1", "--count", "2", "--out", str(a)])
    monkeypatch.delenv("SHADOWLAB_SEED")
    main(["gen", "--seed", "99", "--count", "2", "--out", str(b)])
    assert (a / "prog_0000.mir").read_text() == (b / "prog_0000.mir").read_text()


def test_cli_verify_small(capsys):
    rc = main(["verify", "--seed", "4", "--count", "6", "--benign", "5", "--inputs", "3", "--json"])
    out = capsys.readouterr().out
    report = json.loads(out)
    assert rc == 0
    assert report["undetected"] == 0
    assert report["control_undetected"] > 0
    assert all(report["checks"].values())


def test_cli_all_global_writes_program(capsys, tmp_path):
    text = "fn main {\nb0:\n  store.global g\n  store.global h\n  halt\n}\n"
    path = write_fixture(tmp_path, "g.mir", text)
    main(["analyze", path, "--json"])
    parsed = json.loads(capsys.readouterr().out)
    assert parsed["writes"]["global_pct"] == 100.0
