from hypothesis import given, settings, strategies as st

from shadowlab.mir import parse_program
from shadowlab.analysis import (
    BOTTOM,
    TOP,
    GLOBAL,
    SAFE_STACK,
    UNSAFE,
    classify_writes,
    dead_registers,
    is_safe_height,
    join_height,
    stack_heights,
    _freeze_regs,
    _step,
)
from shadowlab.gen import GenConfig, generate_program


def heights_of(text, name=None):
    p = parse_program(text)
    fn = p.functions[name or next(iter(p.functions))]
    return fn, stack_heights(fn)


def test_join_is_flat_lattice():
    assert join_height(BOTTOM, 5) == 5
    assert join_height(5, BOTTOM) == 5
    assert join_height(5, 5) == 5
    assert join_height(5, 6) is TOP
    assert join_height(TOP, 5) is TOP
    assert join_height(BOTTOM, BOTTOM) is BOTTOM


def test_store_after_frame_setup():
    _, h = heights_of("fn t {\nb0:\n  spadd -16\n  store.sp 8\n  ret\n}")
    assert h.dest(0, 1) == -8


def test_store_hits_return_slot():
    _, h = heights_of("fn t {\nb0:\n  spadd -16\n  store.sp 16\n  ret\n}")
    assert h.dest(0, 1) == 0


def test_loop_growth_goes_top():
    # stack grows inside a loop: the height at the post-loop store is unknown
    _, h = heights_of(
        "fn l {\nb0:\n  br b1\nb1:\n  spadd -8\n  brc b1, b2\nb2:\n  store.sp 0\n  ret\n}"
    )
    assert h.dest(2, 0) is TOP


def test_store_through_lea_register():
    _, h = heights_of("fn t {\nb0:\n  spadd -16\n  lea.sp r3, 4\n  store.reg r3\n  ret\n}")
    assert h.dest(0, 2) == -12


def test_store_through_constant_register_is_top():
    _, h = heights_of("fn t {\nb0:\n  movi r3, 256\n  store.reg r3\n  ret\n}")
    assert h.dest(0, 1) is TOP


def test_arithmetic_taints_stack_pointer_copy():
    _, h = heights_of(
        "fn t {\nb0:\n  lea.sp r3, -16\n  movi r4, 0\n  binop r3, r4\n  store.reg r3\n  ret\n}"
    )
    assert h.dest(0, 3) is TOP


def test_spmov_concrete_and_tainted():
    _, h = heights_of(
        "fn t {\nb0:\n  lea.sp r3, -16\n  spmov r3\n  store.sp 0\n  ret\n}"
    )
    assert h.dest(0, 2) == -16
    _, h2 = heights_of(
        "fn t {\nb0:\n  movi r3, 100\n  spmov r3\n  store.sp 0\n  ret\n}"
    )
    assert h2.dest(0, 2) is TOP


def test_call_clobbers_register_heights_but_not_sp():
    fn, h = heights_of(
        "fn t {\nb0:\n  spadd -16\n  lea.sp r3, 0\n  call u\n  store.reg r3\n  store.sp 8\n  ret\n}\n"
        "fn u { b0: ret }",
        "t",
    )
    assert h.dest(0, 3) is TOP   # register heights do not survive a call
    assert h.dest(0, 4) == -8    # the stack pointer does


def test_branch_join_of_unequal_heights():
    _, h = heights_of(
        "fn t {\nb0:\n  brc b1, b2\nb1:\n  spadd -8\n  br b3\nb2:\n  spadd -16\n  br b3\n"
        "b3:\n  store.sp 0\n  ret\n}"
    )
    assert h.dest(3, 0) is TOP


def test_classify_boundary_cases():
    fn, h = heights_of(
        "fn t {\nb0:\n  spadd -16\n  store.sp 8\n  store.sp 16\n  store.global g\n  ret\n}"
    )
    classes, summary = classify_writes(fn, h)
    assert classes[(0, 1)] == SAFE_STACK   # height -8: word strictly below the slot
    assert classes[(0, 2)] == UNSAFE       # height 0: the return-address slot itself
    assert classes[(0, 3)] == GLOBAL
    assert summary.total == 3
    assert summary.to_json()["unsafe_pct"] == 100.0 / 3


def test_classify_top_is_unsafe():
    fn, h = heights_of("fn t {\nb0:\n  movi r3, 256\n  store.reg r3\n  ret\n}")
    classes, _ = classify_writes(fn, h)
    assert classes[(0, 1)] == UNSAFE


def test_classify_corrupt_as_unknown_store():
    fn, h = heights_of("#adversarial true\nfn t {\nb0:\n  corrupt 0, 5\n  ret\n}")
    classes, _ = classify_writes(fn, h)
    assert classes[(0, 0)] == UNSAFE


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_classification_is_total(seed):
    p = generate_program(seed, GenConfig(), adversarial=seed % 2 == 0)
    for fn in p.functions.values():
        classes, summary = classify_writes(fn, stack_heights(fn))
        stores = [(b, i) for b, i, ins in fn.iter_instrs() if ins.is_store]
        assert sorted(classes) == sorted(stores)
        assert summary.total == len(stores)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_height_fixpoint_is_stable(seed):
    # applying the transfer functions once more on the fixpoint changes nothing
    p = generate_program(seed, GenConfig(), adversarial=False)
    for fn in p.functions.values():
        h = stack_heights(fn)
        for bid, block in fn.blocks.items():
            facts = h.at(bid, 0)
            sp, regs = facts.sp, dict(facts.regs)
            for idx, ins in enumerate(block.instrs):
                recorded = h.at(bid, idx)
                assert recorded.sp == sp and recorded.regs == _freeze_regs(regs)
                sp2, dest = _step(sp, regs, ins)
                assert dest == recorded.dest
                sp = sp2
            for succ in block.successors:
                entry = h.at(succ, 0)
                assert join_height(entry.sp, sp) == entry.sp
                for r, v in regs.items():
                    assert join_height(entry.reg(r), v) == entry.reg(r)


def test_is_safe_height_boundary():
    assert is_safe_height(-8)
    assert is_safe_height(-64)
    assert not is_safe_height(0)
    assert not is_safe_height(-7)
    assert not is_safe_height(TOP)
    assert not is_safe_height(BOTTOM)


def test_dead_after_write_before_read():
    p = parse_program("fn x {\nb0:\n  movi r1, 5\n  store.global g\n  ret\n}")
    lm = dead_registers(p.functions["x"])
    assert 1 in lm.dead_at(0, 2)   # at ret
    assert 1 in lm.dead_at(0, 0)   # written before any read


def test_all_but_return_register_dead_at_ret():
    p = parse_program("fn y { b0: ret }")
    lm = dead_registers(p.functions["y"])
    assert len(lm.dead_at(0, 0)) == 15
    assert 0 not in lm.dead_at(0, 0)


def test_saved_then_overwritten_registers(fixture_chase):
    # no dead registers at entry, exactly two once the saves are past
    lm = dead_registers(fixture_chase.functions["chasefn"])
    assert len(lm.dead_at(0, 0)) == 0
    assert len(lm.dead_at(0, 1)) == 0
    assert lm.dead_at(0, 2) == frozenset({1, 2})


def test_calls_keep_registers_live():
    p = parse_program("fn t {\nb0:\n  movi r5, 1\n  call u\n  ret\n}\nfn u { b0: ret }")
    lm = dead_registers(p.functions["t"])
    # r5 is written at 0, but everything else stays live into the call
    assert lm.dead_at(0, 0) == frozenset({5})


def test_stores_read_the_value_register():
    p = parse_program("fn t {\nb0:\n  store.sp -8\n  ret\n}")
    lm = dead_registers(p.functions["t"])
    assert 0 not in lm.dead_at(0, 0)
