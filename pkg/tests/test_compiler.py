"""Tests for nested compilation, expansion, decoys, cost, and artifacts.

The nested-evaluation oracle at degree 2 is the hand-derived relu fit
x/2 + x^2/sqrt(3) on [-1, 1]; structural behaviour (memoized single pass,
zero-edge skipping, chain lowering) is checked through invariants.
"""

import json
import math

import numpy as np
import pytest

from polydnn.approx import ApproxSpec, calibrate_intervals, max_chain
from polydnn.compiler import (
    ExpandedNetworkPoly,
    compile_nested,
    compile_report_rows,
    eval_nested,
    eval_nested_batch,
    expand,
    insert_pseudo_units,
    load_program,
    op_counts,
    program_from_dict,
    program_to_dict,
    save_program,
)
from polydnn.errors import (
    ExpansionTooLargeError,
    ModelParseError,
    ValidationError,
)
from polydnn.model import (
    IDENTITY,
    MAXPOOL,
    MEANPOOL,
    RELU,
    SIGMOID,
    SOFTMAX_OUTPUT,
    TANH,
    Layer,
    ModelGraph,
    model_to_dict,
    reference_infer,
    reference_infer_batch,
)
from polydnn.polyalg import mp_eval, uni_eval


def dense(in_w, out_w, W, b, act=IDENTITY, kind="dense"):
    return Layer(kind=kind, in_width=in_w, width=out_w, activation=act,
                 weights=np.asarray(W, float), bias=np.asarray(b, float))


def pool(kind, in_w, conns, act=IDENTITY, trained_as_mean=False):
    return Layer(kind=kind, in_width=in_w, width=len(conns), activation=act,
                 connectivity=[np.asarray(c, dtype=np.int64) for c in conns],
                 trained_as_mean=trained_as_mean)


def random_net(rng, widths, acts):
    layers = []
    for i in range(len(widths) - 1):
        layers.append(dense(widths[i], widths[i + 1],
                            rng.uniform(-1, 1, (widths[i + 1], widths[i])),
                            rng.uniform(-1, 1, widths[i + 1]), acts[i]))
    return ModelGraph(name="net", input_width=widths[0], layers=layers)


def compiled(m, degree, rng=None, **kw):
    rng = rng or np.random.default_rng(0)
    X = rng.uniform(0, 1, (256, m.input_width))
    return compile_nested(m, degree, calibrate_intervals(m, X), **kw)


# ---------------------------------------------------------------------------
# nested evaluation
# ---------------------------------------------------------------------------

def test_nested_matches_hand_fit_degree2():
    # One relu unit on [-1, 1] at degree 2 evaluates x/2 + x^2/sqrt(3).
    m = ModelGraph(name="one", input_width=1,
                   layers=[dense(1, 1, [[1.0]], [0.0], RELU),
                           dense(1, 1, [[1.0]], [0.0])])
    prog = compile_nested(m, 2, [1.0, 1.0])
    for x in (-0.8, -0.2, 0.0, 0.4, 0.9):
        want = x / 2.0 + x * x / math.sqrt(3.0)
        assert eval_nested(prog, np.array([x])).outputs[0] == pytest.approx(
            want, abs=1e-12)


def test_nested_single_pass_counts():
    rng = np.random.default_rng(31)
    m = random_net(rng, [4, 6, 5, 3], [RELU, TANH, IDENTITY])
    prog = compiled(m, 8, rng)
    res = eval_nested(prog, rng.uniform(0, 1, 4))
    assert np.array_equal(res.eval_counts, np.ones(len(prog.nodes)))


def test_nested_tracks_reference_within_fit_budget():
    rng = np.random.default_rng(32)
    m = random_net(rng, [3, 5, 2], [SIGMOID, IDENTITY])
    prog = compiled(m, 16, rng)
    budget = sum(r["max_err"] for r in prog.fit_rows)
    X = rng.uniform(0, 1, (64, 3))
    got, _, _ = eval_nested_batch(prog, X)
    want, _, _ = reference_infer_batch(m, X)
    # first-layer fit error passes through the linear output layer, scaled by
    # its weights; a loose structural bound is enough here
    assert np.max(np.abs(got - want)) < 20 * budget + 1e-9


def test_batch_matches_single():
    rng = np.random.default_rng(33)
    m = random_net(rng, [3, 4, 2], [RELU, IDENTITY])
    prog = compiled(m, 4, rng)
    X = rng.uniform(0, 1, (10, 3))
    outs, classes, _ = eval_nested_batch(prog, X)
    for i in range(10):
        r = eval_nested(prog, X[i])
        assert outs[i] == pytest.approx(r.outputs, rel=1e-13, abs=1e-13)
        assert classes[i] == r.predicted_class


def test_compile_rejects_unfolded_and_misaligned():
    m = ModelGraph(
        name="bn", input_width=1,
        layers=[Layer(kind="batch_norm", in_width=1, width=1,
                      bn_gamma=np.ones(1), bn_beta=np.zeros(1),
                      bn_mean=np.zeros(1), bn_var=np.ones(1)),
                dense(1, 1, [[1.0]], [0.0])])
    with pytest.raises(ValidationError, match="fold"):
        compile_nested(m, 2, [1.0, 1.0])
    m2 = ModelGraph(name="d", input_width=1,
                    layers=[dense(1, 1, [[1.0]], [0.0])])
    with pytest.raises(ValidationError, match="intervals"):
        compile_nested(m2, 2, [1.0, 1.0])


def test_softmax_drop_preserves_argmax_and_scores():
    rng = np.random.default_rng(34)
    m = ModelGraph(
        name="sm", input_width=3,
        layers=[dense(3, 4, rng.uniform(-1, 1, (4, 3)),
                      rng.uniform(-1, 1, 4), RELU),
                dense(4, 3, rng.uniform(-1, 1, (3, 4)),
                      rng.uniform(-1, 1, 3), kind=SOFTMAX_OUTPUT)])
    prog = compiled(m, 16, rng)
    assert prog.softmax_mode == "drop_argmax"
    X = rng.uniform(0, 1, (32, 3))
    got, classes, _ = eval_nested_batch(prog, X)
    logits, probs, ref_classes = reference_infer_batch(m, X)
    # scores approximate the pre-normalisation logits, not the probabilities
    assert np.max(np.abs(got - logits)) < 0.2
    assert np.mean(classes == ref_classes) > 0.9


def test_softmax_mode_none_refuses():
    m = ModelGraph(name="sm", input_width=2,
                   layers=[dense(2, 2, np.eye(2), np.zeros(2),
                                 kind=SOFTMAX_OUTPUT)])
    with pytest.raises(ValidationError, match="softmax"):
        compile_nested(m, 2, [1.0], softmax_mode="none")


# ---------------------------------------------------------------------------
# pooling lowerings
# ---------------------------------------------------------------------------

def test_max_chain_lowering_matches_scalar_gadget():
    m = ModelGraph(name="mx", input_width=3,
                   layers=[pool(MAXPOOL, 3, [[0, 1, 2]]),
                           dense(1, 1, [[1.0]], [0.0])])
    prog = compile_nested(m, 2, [1.0, 1.0], pool_mode="eq2")
    spec = ApproxSpec(degree=2, radius=1.0)
    rng = np.random.default_rng(35)
    for _ in range(50):
        x = rng.uniform(-1, 1, 3)
        want = max_chain(x, "poly_sqrt", spec)
        got = eval_nested(prog, x).outputs[0]
        assert got == pytest.approx(want, abs=2e-4)


def test_max_chain_single_pass_and_mixed_windows():
    m = ModelGraph(name="mx", input_width=5,
                   layers=[pool(MAXPOOL, 5, [[0, 1, 2], [3, 4]], act=TANH),
                           dense(2, 1, [[1.0, 1.0]], [0.0])])
    prog = compile_nested(m, 4, [2.0, 2.0], pool_mode="eq2")
    rng = np.random.default_rng(36)
    x = rng.uniform(-1, 1, 5)
    res = eval_nested(prog, x)
    assert np.array_equal(res.eval_counts, np.ones(len(prog.nodes)))
    want, _, _ = reference_infer_batch(m, x[None, :])
    # gadget error per pairwise max is bounded by half the sqrt fit error
    assert abs(res.outputs[0] - want[0, 0]) < 0.5


def test_maxpool_mean_mode_is_window_sum():
    m = ModelGraph(name="mx", input_width=4,
                   layers=[pool(MAXPOOL, 4, [[0, 1], [2, 3]],
                                trained_as_mean=True),
                           dense(2, 1, [[1.0, 1.0]], [0.0])])
    prog = compile_nested(m, 2, [1.0, 1.0])  # auto honours the flag
    x = np.array([0.1, 0.4, 0.2, 0.3])
    assert eval_nested(prog, x).outputs[0] == pytest.approx(1.0, abs=1e-14)


def test_meanpool_exact():
    m = ModelGraph(name="mp", input_width=4,
                   layers=[pool(MEANPOOL, 4, [[0, 1, 2, 3]]),
                           dense(1, 1, [[1.0]], [0.0])])
    prog = compiled(m, 2)
    x = np.array([0.1, 0.2, 0.3, 0.8])
    assert eval_nested(prog, x).outputs[0] == pytest.approx(0.35, abs=1e-14)


def test_max_gap_fit_row_reported():
    m = ModelGraph(name="mx", input_width=2,
                   layers=[pool(MAXPOOL, 2, [[0, 1]]),
                           dense(1, 1, [[1.0]], [0.0])])
    prog = compile_nested(m, 2, [1.5, 1.0], pool_mode="eq2")
    row = prog.fit_rows[0]
    assert row["kind"] == "max_gap"
    assert row["degree"] == 40
    assert row["interval"] == pytest.approx(3.0)
    assert row["max_err"] > 0


# ---------------------------------------------------------------------------
# expansion
# ---------------------------------------------------------------------------

def test_expand_matches_nested_everywhere():
    rng = np.random.default_rng(37)
    m = random_net(rng, [3, 4, 3, 2], [RELU, TANH, IDENTITY])
    prog = compiled(m, 3, rng)
    exp = expand(prog, seed=1)
    pts = rng.uniform(0, 1, (50, 3))
    nested, _, _ = eval_nested_batch(prog, pts)
    for i in range(50):
        got = exp.eval(pts[i])
        rel = np.abs(got - nested[i]) / (1.0 + np.abs(nested[i]))
        assert np.max(rel) <= 1e-6


def test_expand_degree_bookkeeping():
    rng = np.random.default_rng(38)
    m = random_net(rng, [2, 3, 2], [RELU, IDENTITY])
    prog = compiled(m, 4, rng)
    exp = expand(prog)
    assert exp.total_degree == 4
    assert exp.num_vars == 2
    assert exp.term_count == sum(p.term_count for p in exp.polys)


def test_expand_term_cap_trips_early():
    rng = np.random.default_rng(39)
    m = random_net(rng, [4, 4, 4, 2], [RELU, RELU, IDENTITY])
    prog = compiled(m, 4, rng)
    with pytest.raises(ExpansionTooLargeError, match="cap"):
        expand(prog, term_cap=50)


def test_expand_univariate_coefficients_match_composition():
    # x -> relu fit p at degree 2 on weights w=2, b=0.5: the expanded single
    # output must be p(2x + 0.5) with p = x/2 + x^2/sqrt(3), by hand:
    # p(u) = u/2 + u^2/s with u = 2x+0.5
    m = ModelGraph(name="u", input_width=1,
                   layers=[dense(1, 1, [[2.0]], [0.5], RELU),
                           dense(1, 1, [[1.0]], [0.0])])
    prog = compile_nested(m, 2, [1.0, 1.0])
    exp = expand(prog, self_check=False)
    s = math.sqrt(3.0)
    want = {(0,): 0.25 + 0.25 / s, (1,): 1.0 + 2.0 / s, (2,): 4.0 / s}
    got = exp.polys[0].terms
    assert set(got) == set(want)
    for k, v in want.items():
        assert got[k] == pytest.approx(v, rel=1e-12)


# ---------------------------------------------------------------------------
# decoy units
# ---------------------------------------------------------------------------

def test_pseudo_units_preserve_function():
    rng = np.random.default_rng(40)
    m = random_net(rng, [4, 6, 5, 3], [RELU, SIGMOID, IDENTITY])
    hidden = insert_pseudo_units(m, 3, seed=7)
    assert [l.width for l in hidden.layers] == [9, 8, 3]
    assert all(len(l.pseudo_units) == 3 for l in hidden.layers[:2])
    X = rng.uniform(0, 1, (64, 4))
    a, _, _ = reference_infer_batch(m, X)
    b, _, _ = reference_infer_batch(hidden, X)
    assert np.max(np.abs(a - b)) < 1e-12


def test_pseudo_units_sever_all_outgoing_edges():
    rng = np.random.default_rng(41)
    m = random_net(rng, [3, 4, 2], [RELU, IDENTITY])
    hidden = insert_pseudo_units(m, 2, seed=3)
    for p in hidden.layers[0].pseudo_units:
        assert np.all(hidden.layers[1].weights[:, p] == 0.0)


def test_pseudo_units_zero_count_is_identity():
    rng = np.random.default_rng(42)
    m = random_net(rng, [3, 4, 2], [RELU, IDENTITY])
    assert model_to_dict(insert_pseudo_units(m, 0, seed=1)) == model_to_dict(m)


def test_pseudo_units_expansion_term_maps_identical():
    rng = np.random.default_rng(43)
    m = random_net(rng, [3, 4, 3, 2], [RELU, TANH, IDENTITY])
    base = compiled(m, 3, np.random.default_rng(1))
    hidden = insert_pseudo_units(m, 2, seed=11)
    hid = compile_nested(hidden, 3, base.intervals)
    e0 = expand(base, self_check=False)
    e1 = expand(hid, self_check=False)
    for p0, p1 in zip(e0.polys, e1.polys):
        assert p0.terms == p1.terms  # bit-exact after zero pruning


def test_pseudo_units_nested_logits_close():
    rng = np.random.default_rng(44)
    m = random_net(rng, [4, 5, 4, 2], [RELU, RELU, IDENTITY])
    base = compiled(m, 4, np.random.default_rng(2))
    hidden = insert_pseudo_units(m, 3, seed=5)
    hid = compile_nested(hidden, 4, base.intervals)
    X = rng.uniform(0, 1, (32, 4))
    a, _, _ = eval_nested_batch(base, X)
    b, _, _ = eval_nested_batch(hid, X)
    assert np.max(np.abs(a - b)) < 1e-12


def test_pseudo_units_eligibility_and_seeding():
    rng = np.random.default_rng(45)
    m = ModelGraph(name="pp", input_width=4,
                   layers=[dense(4, 4, rng.uniform(-1, 1, (4, 4)),
                                 np.zeros(4), RELU),
                           pool(MAXPOOL, 4, [[0, 1], [2, 3]]),
                           dense(2, 2, np.eye(2), np.zeros(2))])
    # the layer before the pool is not eligible; nothing to do
    with pytest.raises(ValidationError, match="counts"):
        insert_pseudo_units(m, [1], seed=0)
    rng2 = np.random.default_rng(46)
    m2 = random_net(rng2, [3, 4, 2], [RELU, IDENTITY])
    h1 = insert_pseudo_units(m2, 2, seed=9)
    h2 = insert_pseudo_units(m2, 2, seed=9)
    assert model_to_dict(h1) == model_to_dict(h2)
    h3 = insert_pseudo_units(m2, 2, seed=10)
    assert model_to_dict(h3) != model_to_dict(h1)


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------

def test_op_counts_by_hand():
    # 1 -> relu(d=2) -> 1: affine (1 mult, 1 add) + horner (2, 2);
    # output affine (1, 1).  Totals: 4 mults, 4 adds.
    m = ModelGraph(name="one", input_width=1,
                   layers=[dense(1, 1, [[1.0]], [0.0], RELU),
                           dense(1, 1, [[1.0]], [0.0])])
    prog = compile_nested(m, 2, [1.0, 1.0])
    c = op_counts(prog)
    assert (c["mult"], c["add"], c["total"]) == (4, 4, 8)


def test_op_counts_linear_in_degree():
    rng = np.random.default_rng(47)
    m = random_net(rng, [4, 8, 6, 3], [RELU, TANH, IDENTITY])
    X = rng.uniform(0, 1, (128, 4))
    radii = calibrate_intervals(m, X)
    degrees = np.array([8, 16, 32])
    totals = np.array([
        op_counts(compile_nested(m, int(d), radii))["total"]
        for d in degrees], dtype=float)
    slope, intercept = np.polyfit(degrees, totals, 1)
    fitted = slope * degrees + intercept
    ss_res = float(np.sum((totals - fitted) ** 2))
    ss_tot = float(np.sum((totals - np.mean(totals)) ** 2))
    assert 1.0 - ss_res / ss_tot >= 0.999


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def test_program_round_trip(tmp_path):
    rng = np.random.default_rng(48)
    m = random_net(rng, [3, 4, 2], [RELU, IDENTITY])
    prog = compiled(m, 4, rng)
    exp = expand(prog, self_check=False)
    path = tmp_path / "prog.json"
    save_program(prog, str(path), expanded=exp)
    back, back_exp = load_program(str(path))
    assert program_to_dict(back, back_exp) == program_to_dict(prog, exp)
    x = rng.uniform(0, 1, 3)
    assert eval_nested(back, x).outputs == pytest.approx(
        eval_nested(prog, x).outputs, abs=0)
    assert back_exp.polys[0].terms == exp.polys[0].terms


def test_program_rejects_unknown_format():
    with pytest.raises(ModelParseError, match="format"):
        program_from_dict({"format": "something-else"})


def test_compile_report_rows_align_with_layers():
    rng = np.random.default_rng(49)
    m = random_net(rng, [3, 4, 4, 2], [RELU, SIGMOID, IDENTITY])
    prog = compiled(m, 8, rng)
    rows = compile_report_rows(prog)
    assert [r["layer"] for r in rows] == [0, 1, 2]
    assert rows[0]["kind"] == "relu"
    assert rows[2]["max_err"] == 0.0  # identity output layer is exact
