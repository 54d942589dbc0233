"""Compile a folded network into a polynomial program.

The nested form mirrors the network: one node per unit, each node an affine
combination of the previous layer's node values followed by an optional
univariate activation replacement.  Evaluation walks the layers once, so
every node value is computed exactly once and shared by all of its readers.

The expanded form substitutes everything symbolically until each network
output is a single sparse polynomial in the raw inputs.  Both forms compute
the same function; expansion exists because a single polynomial per output is
what the secret-sharing runtime consumes.

Max pooling has no polynomial, so windows are lowered to a chain of pairwise
max gadgets, max(a, b) = (a + b)/2 + T(a - b) with T the even gap polynomial
from :mod:`approx` (or to a plain window sum for networks trained with the
scaled-mean substitute).  The chain is laid out in internal sub-layers with
pass-through nodes so that strict layer-to-layer adjacency is preserved.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field

import numpy as np

from .approx import ApproxSpec, SQRT_DEGREE, approx_activation, pair_gap_poly, sqrt_series
from .errors import ExpansionTooLargeError, ModelParseError, ValidationError
from .model import (
    BATCH_NORM,
    CONV2D,
    DENSE,
    MAXPOOL,
    MEANPOOL,
    SOFTMAX_OUTPUT,
    Layer,
    ModelGraph,
)
from .polyalg import (
    TERM_CAP,
    SparseMultiPoly,
    UniPoly,
    compose_uni_with_mp,
    mp_add,
    mp_const,
    mp_eval,
    mp_from_dict,
    mp_scale,
    mp_to_dict,
    mp_var,
    uni_eval_many,
)

POOL_MODES = ("auto", "mean", "eq2")
SOFTMAX_MODES = ("drop", "none")


@dataclass
class PolyNode:
    """One computed value: an affine map of the previous layer, then an
    optional activation polynomial.  ``activation is None`` means identity."""

    id: int
    layer: int
    unit: int
    pred_ids: np.ndarray
    weights: np.ndarray
    bias: float
    activation: UniPoly | None = None
    is_pseudo: bool = False
    tag: str = "unit"


@dataclass
class PolyProgram:
    """A compiled network: layered nodes over ``input_width`` raw inputs.

    Input values occupy ids 0 .. input_width-1 at layer 0; node ids continue
    from there in construction order, which is also topological order.
    """

    name: str
    input_width: int
    degree: int
    intervals: list[float]
    nodes: list[PolyNode]
    output_ids: list[int]
    softmax_mode: str = "none"
    fit_rows: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self._plan = None

    @property
    def layer_count(self) -> int:
        return self.nodes[-1].layer if self.nodes else 0

    def node_index(self, node_id: int) -> int:
        return node_id - self.input_width


@dataclass
class NestedEval:
    outputs: np.ndarray
    predicted_class: int
    eval_counts: np.ndarray


@dataclass
class ExpandedNetworkPoly:
    """One sparse polynomial in the raw inputs per network output."""

    num_vars: int
    polys: list[SparseMultiPoly]
    total_degree: int
    term_count: int

    def eval(self, x) -> np.ndarray:
        return np.array([mp_eval(p, x) for p in self.polys])


# ---------------------------------------------------------------------------
# compilation
# ---------------------------------------------------------------------------

def compile_nested(m: ModelGraph, degree: int, intervals: list[float],
                   pool_mode: str = "auto", softmax_mode: str = "drop",
                   sqrt_degree: int = SQRT_DEGREE) -> PolyProgram:
    """Lower a folded model to a nested polynomial program.

    ``intervals`` must align with the model's layer list (one fit radius per
    layer, as produced by calibration on the same folded model).
    """
    if m.has_batch_norm():
        raise ValidationError(
            "compile needs a folded model; run fold_batch_norm first")
    if len(intervals) != len(m.layers):
        raise ValidationError(
            f"{len(intervals)} intervals for {len(m.layers)} layers")
    if any(r <= 0 for r in intervals):
        raise ValidationError("fit radii must be positive")
    if pool_mode not in POOL_MODES:
        raise ValidationError(f"pool_mode must be one of {POOL_MODES}")
    if softmax_mode not in SOFTMAX_MODES:
        raise ValidationError(f"softmax_mode must be one of {SOFTMAX_MODES}")

    nodes: list[PolyNode] = []
    fit_rows: list[dict] = []
    next_id = m.input_width
    prev_ids = list(range(m.input_width))
    layer_no = 0
    out_softmax_mode = "none"

    def new_node(layer, unit, preds, weights, bias, act, tag,
                 is_pseudo=False) -> int:
        nonlocal next_id
        nodes.append(PolyNode(
            id=next_id, layer=layer, unit=unit,
            pred_ids=np.asarray(preds, dtype=np.int64),
            weights=np.asarray(weights, dtype=np.float64),
            bias=float(bias), activation=act, is_pseudo=is_pseudo, tag=tag))
        next_id += 1
        return next_id - 1

    for li, layer in enumerate(m.layers):
        spec = ApproxSpec(degree=degree, radius=float(intervals[li]),
                          sqrt_degree=sqrt_degree)
        act_poly, report = approx_activation(layer.activation, spec)
        if layer.activation.tag == "identity":
            act_poly = None
        fit_rows.append({
            "layer": li, "kind": layer.activation.tag,
            "degree": degree, "interval": spec.radius,
            "max_err": report.max_abs_error,
            "mean_err": report.mean_abs_error,
        })

        if layer.kind in (DENSE, SOFTMAX_OUTPUT):
            act = act_poly
            if layer.kind == SOFTMAX_OUTPUT:
                if softmax_mode == "none":
                    raise ValidationError(
                        "model ends in softmax_output but softmax handling "
                        "is disabled; compile with softmax_mode='drop'")
                # The exponential normalisation is monotone, so the argmax
                # of the affine scores is the argmax of the probabilities;
                # the output map is dropped and the scores stand in.
                act = None
                out_softmax_mode = "drop_argmax"
            layer_no += 1
            pseudo = set(layer.pseudo_units)
            prev_ids = [
                new_node(layer_no, u, prev_ids, layer.weights[u],
                         layer.bias[u], act, "unit", is_pseudo=u in pseudo)
                for u in range(layer.width)
            ]
        elif layer.kind == CONV2D:
            layer_no += 1
            prev_ids = [
                new_node(layer_no, u,
                         [prev_ids[c] for c in layer.connectivity[u]],
                         layer.weights[u], layer.bias[u], act_poly, "unit")
                for u in range(layer.width)
            ]
        elif layer.kind == MEANPOOL:
            layer_no += 1
            prev_ids = [
                new_node(layer_no, u,
                         [prev_ids[c] for c in layer.connectivity[u]],
                         np.full(len(layer.connectivity[u]),
                                 1.0 / len(layer.connectivity[u])),
                         0.0, act_poly, "unit")
                for u in range(layer.width)
            ]
        elif layer.kind == MAXPOOL:
            mode = pool_mode
            if mode == "auto":
                mode = "mean" if layer.trained_as_mean else "eq2"
            if mode == "mean":
                # Window sum: the degree-1 power mean with the division
                # dropped, valid only for networks trained with it.
                layer_no += 1
                prev_ids = [
                    new_node(layer_no, u,
                             [prev_ids[c] for c in layer.connectivity[u]],
                             np.ones(len(layer.connectivity[u])),
                             0.0, act_poly, "unit")
                    for u in range(layer.width)
                ]
            else:
                gap = pair_gap_poly(spec)
                _, sq_rep = sqrt_series(spec)
                fit_rows[-1] = {
                    "layer": li, "kind": "max_gap", "degree": gap.degree,
                    "interval": 2.0 * spec.radius,
                    "max_err": 0.5 * sq_rep.max_abs_error,
                    "mean_err": 0.5 * sq_rep.mean_abs_error,
                }
                prev_ids, layer_no = _lower_max_chain(
                    layer, prev_ids, layer_no, gap, act_poly, new_node)
        else:
            raise ValidationError(f"layer {li}: cannot compile {layer.kind}")

    return PolyProgram(
        name=m.name, input_width=m.input_width, degree=degree,
        intervals=[float(r) for r in intervals], nodes=nodes,
        output_ids=prev_ids, softmax_mode=out_softmax_mode, fit_rows=fit_rows)


def _lower_max_chain(layer: Layer, prev_ids: list[int], layer_no: int,
                     gap: UniPoly, act_poly, new_node):
    """Chained pairwise maxes with pass-through nodes between sub-layers.

    Each round folds the last two pending values of every window:
    sub-layer A holds the gap nodes T(a - b) plus copies of every value
    still needed; sub-layer B holds the combine nodes (a + b)/2 + T and the
    remaining copies.  A final sub-layer applies the pool activation.
    """
    pend = [[prev_ids[c] for c in conn] for conn in layer.connectivity]
    rounds = max(len(p) for p in pend) - 1
    for _ in range(rounds):
        remap: dict[int, int] = {}
        gaps: dict[int, int] = {}
        layer_no += 1
        for u, ids in enumerate(pend):
            for v in ids:
                if v not in remap:
                    remap[v] = new_node(layer_no, u, [v], [1.0], 0.0, None,
                                        "pass")
            if len(ids) >= 2:
                gaps[u] = new_node(layer_no, u, [ids[-2], ids[-1]],
                                   [1.0, -1.0], 0.0, gap, "max_gap")
        layer_no += 1
        combined: dict[int, int] = {}
        remap2: dict[int, int] = {}
        for u, ids in enumerate(pend):
            if len(ids) >= 2:
                a, b = remap[ids[-2]], remap[ids[-1]]
                combined[u] = new_node(layer_no, u, [a, b, gaps[u]],
                                       [0.5, 0.5, 1.0], 0.0, None,
                                       "max_combine")
                keep = ids[:-2]
            else:
                keep = ids
            for v in keep:
                if remap[v] not in remap2:
                    remap2[remap[v]] = new_node(layer_no, u, [remap[v]],
                                                [1.0], 0.0, None, "pass")
            pend[u] = ([remap2[remap[v]] for v in keep]
                       + ([combined[u]] if u in combined else []))
    layer_no += 1
    out = [new_node(layer_no, u, [pend[u][0]], [1.0], 0.0, act_poly, "unit")
           for u in range(layer.width)]
    return out, layer_no


# ---------------------------------------------------------------------------
# nested evaluation
# ---------------------------------------------------------------------------

def _build_plan(program: PolyProgram):
    """Per-layer dense weight matrices and activation groups, built once."""
    by_layer: dict[int, list[PolyNode]] = {}
    for node in program.nodes:
        by_layer.setdefault(node.layer, []).append(node)
    if sorted(by_layer) != list(range(1, len(by_layer) + 1)):
        raise ValidationError("node layers are not contiguous")
    plan = []
    pos = {i: i for i in range(program.input_width)}
    for l in range(1, len(by_layer) + 1):
        nodes_l = by_layer[l]
        W = np.zeros((len(nodes_l), len(pos)))
        b = np.empty(len(nodes_l))
        groups: dict[UniPoly | None, list[int]] = {}
        for r, node in enumerate(nodes_l):
            if len(set(node.pred_ids.tolist())) != len(node.pred_ids):
                raise ValidationError(
                    f"node {node.id} references a predecessor twice")
            for pid, w in zip(node.pred_ids, node.weights):
                if int(pid) not in pos:
                    raise ValidationError(
                        f"node {node.id} reads {pid}, not in layer {l - 1}")
                W[r, pos[int(pid)]] = w
            b[r] = node.bias
            groups.setdefault(node.activation, []).append(r)
        grouped = [(poly, np.asarray(rows, dtype=np.int64))
                   for poly, rows in groups.items()]
        node_rows = np.asarray([program.node_index(n.id) for n in nodes_l],
                               dtype=np.int64)
        plan.append((W, b, grouped, node_rows))
        pos = {node.id: r for r, node in enumerate(nodes_l)}
    out_pos = [pos[i] for i in program.output_ids]
    return plan, np.asarray(out_pos, dtype=np.int64)


def _plan_of(program: PolyProgram):
    if program._plan is None:
        program._plan = _build_plan(program)
    return program._plan


def eval_nested_batch(program: PolyProgram, X: np.ndarray):
    """Single memoized pass per sample: every node computed exactly once.

    Returns (outputs, classes, eval_counts); counts accumulate one per node
    per sample, and a single pass leaves every node at exactly one.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != program.input_width:
        raise ValidationError(
            f"inputs must have shape (N, {program.input_width})")
    plan, out_pos = _plan_of(program)
    counts = np.zeros(len(program.nodes), dtype=np.int64)
    values = X
    for W, b, groups, node_rows in plan:
        pre = values @ W.T + b
        out = pre
        for poly, rows in groups:
            if poly is not None:
                out[:, rows] = _horner_cols(poly, pre[:, rows])
        counts[node_rows] += X.shape[0]
        values = out
    outputs = values[:, out_pos]
    classes = np.argmax(outputs, axis=1)
    return outputs, classes, counts


def _horner_cols(poly: UniPoly, xs: np.ndarray) -> np.ndarray:
    acc = np.zeros_like(xs)
    for c in reversed(poly.coeffs):
        acc = acc * xs + c
    return acc


def eval_nested(program: PolyProgram, x: np.ndarray) -> NestedEval:
    outputs, classes, counts = eval_nested_batch(
        program, np.asarray(x, dtype=np.float64)[None, :])
    return NestedEval(outputs=outputs[0], predicted_class=int(classes[0]),
                      eval_counts=counts)


# ---------------------------------------------------------------------------
# symbolic expansion
# ---------------------------------------------------------------------------

def _estimate_terms(program: PolyProgram) -> tuple[int, int]:
    """Upper bound on expanded size: total degree per node by DP, then the
    count of monomials of that degree in input_width variables."""
    deg = {i: 1 for i in range(program.input_width)}
    for node in program.nodes:
        affine = max(
            (deg[int(p)] for p, w in zip(node.pred_ids, node.weights)
             if w != 0.0), default=0)
        deg[node.id] = affine * (node.activation.degree
                                 if node.activation is not None else 1)
    total = 0
    worst = 0
    v = program.input_width
    for oid in program.output_ids:
        d = deg[oid]
        worst = max(worst, d)
        total += math.comb(d + v, v)
    return total, worst


def expand(program: PolyProgram, term_cap: int = TERM_CAP,
           self_check: bool = True, check_points: int = 100,
           check_box: tuple[float, float] = (0.0, 1.0),
           seed: int = 0) -> ExpandedNetworkPoly:
    """Substitute the whole program into one polynomial per output.

    Exact-zero affine weights are skipped during accumulation, so severed
    edges (for example to decoy units) leave the term maps bit-identical to
    a program without them.  With ``self_check`` the expanded polynomials
    are compared against nested evaluation at random points before return.
    """
    bound, _ = _estimate_terms(program)
    if bound > term_cap:
        raise ExpansionTooLargeError(
            f"expansion could reach {bound} terms, over the {term_cap} cap; "
            f"lower the degree or keep the nested form")
    w = program.input_width
    polys: dict[int, SparseMultiPoly] = {i: mp_var(w, i) for i in range(w)}
    for node in program.nodes:
        acc = mp_const(w, node.bias)
        for pid, wt in zip(node.pred_ids, node.weights):
            if wt != 0.0:
                acc = mp_add(acc, mp_scale(polys[int(pid)], wt))
        if node.activation is not None:
            acc = compose_uni_with_mp(node.activation, acc, degree_cap=None,
                                      term_cap=term_cap)
        polys[node.id] = acc
    outs = [polys[i] for i in program.output_ids]
    expanded = ExpandedNetworkPoly(
        num_vars=w, polys=outs,
        total_degree=max((p.total_degree for p in outs), default=0),
        term_count=sum(p.term_count for p in outs))
    if self_check:
        rng = np.random.default_rng(seed)
        pts = rng.uniform(check_box[0], check_box[1], (check_points, w))
        nested_out, _, _ = eval_nested_batch(program, pts)
        for i in range(check_points):
            got = expanded.eval(pts[i])
            rel = np.abs(got - nested_out[i]) / (1.0 + np.abs(nested_out[i]))
            if np.any(rel > 1e-6):
                raise ValidationError(
                    f"expanded and nested forms disagree by "
                    f"{float(np.max(rel)):.3e} relative at a check point")
    return expanded


# ---------------------------------------------------------------------------
# decoy units
# ---------------------------------------------------------------------------

def insert_pseudo_units(m: ModelGraph, counts, seed: int) -> ModelGraph:
    """Hide the architecture by planting decoy units in hidden dense layers.

    Each decoy gets random incoming weights and bias in [-1, 1] and every
    outgoing weight exactly zero, so the network function is unchanged while
    the layer widths and weight tables are not the trained ones.  Positions
    within each layer are seeded-random; relative order of real units is
    preserved.  ``counts`` is one int for all eligible layers or a sequence
    with one entry per eligible layer.  Eligible layers are dense layers
    (not the last) whose successor has weights to sever; a pool successor
    would see the decoy, so such layers are not eligible.
    """
    if m.has_batch_norm():
        raise ValidationError(
            "decoy insertion needs a folded model; run fold_batch_norm first")
    eligible = [
        i for i in range(len(m.layers) - 1)
        if m.layers[i].kind == DENSE
        and m.layers[i + 1].kind in (DENSE, SOFTMAX_OUTPUT, CONV2D)
    ]
    if isinstance(counts, int):
        counts = [counts] * len(eligible)
    counts = [int(c) for c in counts]
    if len(counts) != len(eligible):
        raise ValidationError(
            f"{len(counts)} counts for {len(eligible)} eligible layers")
    if any(c < 0 for c in counts):
        raise ValidationError("decoy counts must be non-negative")

    from .model import copy_layer, validate_model
    layers = [copy_layer(l) for l in m.layers]
    rng = random.Random(seed)
    for idx, count in zip(eligible, counts):
        if count == 0:
            continue
        layer, nxt = layers[idx], layers[idx + 1]
        new_w = layer.width + count
        positions = sorted(rng.sample(range(new_w), count))
        real_pos = [p for p in range(new_w) if p not in set(positions)]
        old_to_new = {old: new for old, new in enumerate(real_pos)}

        weights = np.empty((new_w, layer.in_width))
        bias = np.empty(new_w)
        for old, new in old_to_new.items():
            weights[new] = layer.weights[old]
            bias[new] = layer.bias[old]
        for p in positions:
            weights[p] = [rng.uniform(-1.0, 1.0)
                          for _ in range(layer.in_width)]
            bias[p] = rng.uniform(-1.0, 1.0)
        layer.weights, layer.bias, layer.width = weights, bias, new_w
        layer.pseudo_units = tuple(sorted(
            positions + [old_to_new[p] for p in layer.pseudo_units]))

        if nxt.kind in (DENSE, SOFTMAX_OUTPUT):
            nw = np.zeros((nxt.width, new_w))
            for old, new in old_to_new.items():
                nw[:, new] = nxt.weights[:, old]
            nxt.weights = nw
        else:  # conv2d: remap window indices, decoys fall outside windows
            nxt.connectivity = [
                np.asarray([old_to_new[int(i)] for i in conn], dtype=np.int64)
                for conn in nxt.connectivity]
        nxt.in_width = new_w
    hidden = ModelGraph(name=m.name, input_width=m.input_width, layers=layers,
                        metadata=dict(m.metadata))
    validate_model(hidden)
    return hidden


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------

def op_counts(program: PolyProgram) -> dict:
    """Exact multiply/add counts for one nested evaluation.

    Affine: one multiply per incoming edge, one add per edge plus the bias.
    Activation by Horner at degree d: d multiplies and d adds.  The affine
    part is fixed by the architecture, so total cost is linear in degree.
    """
    mults = adds = 0
    for node in program.nodes:
        e = len(node.pred_ids)
        mults += e
        adds += e  # e-1 to sum the terms, plus the bias
        if node.activation is not None:
            mults += node.activation.degree
            adds += node.activation.degree
    return {"mult": mults, "add": adds, "total": mults + adds,
            "nodes": len(program.nodes)}


# ---------------------------------------------------------------------------
# program artifact
# ---------------------------------------------------------------------------

PROGRAM_FORMAT = "polydnn-program-v1"


def program_to_dict(program: PolyProgram,
                    expanded: ExpandedNetworkPoly | None = None) -> dict:
    act_table: list[tuple[float, ...] | None] = []
    act_index: dict[UniPoly | None, int] = {}
    for node in program.nodes:
        if node.activation not in act_index:
            act_index[node.activation] = len(act_table)
            act_table.append(None if node.activation is None
                             else list(node.activation.coeffs))
    doc = {
        "format": PROGRAM_FORMAT,
        "name": program.name,
        "input_width": program.input_width,
        "degree": program.degree,
        "softmax_mode": program.softmax_mode,
        "intervals": program.intervals,
        "fit_rows": program.fit_rows,
        "activations": act_table,
        "nodes": [
            [n.layer, n.unit, act_index[n.activation], int(n.is_pseudo),
             n.bias, [int(p) for p in n.pred_ids],
             [float(w) for w in n.weights], n.tag]
            for n in program.nodes
        ],
        "output_ids": [int(i) for i in program.output_ids],
    }
    if expanded is not None:
        doc["expanded"] = {
            "total_degree": expanded.total_degree,
            "term_count": expanded.term_count,
            "polys": [mp_to_dict(p) for p in expanded.polys],
        }
    return doc


def program_from_dict(doc: dict) -> tuple[PolyProgram,
                                          ExpandedNetworkPoly | None]:
    if doc.get("format") != PROGRAM_FORMAT:
        raise ModelParseError(
            f"unknown program format {doc.get('format')!r}")
    try:
        acts = [None if c is None else UniPoly(tuple(c))
                for c in doc["activations"]]
        input_width = int(doc["input_width"])
        nodes = []
        for i, row in enumerate(doc["nodes"]):
            layer, unit, act_i, pseudo, bias, preds, weights, tag = row
            nodes.append(PolyNode(
                id=input_width + i, layer=int(layer), unit=int(unit),
                pred_ids=np.asarray(preds, dtype=np.int64),
                weights=np.asarray(weights, dtype=np.float64),
                bias=float(bias), activation=acts[act_i],
                is_pseudo=bool(pseudo), tag=tag))
        program = PolyProgram(
            name=doc.get("name", "unnamed"), input_width=input_width,
            degree=int(doc["degree"]), intervals=list(doc["intervals"]),
            nodes=nodes, output_ids=[int(i) for i in doc["output_ids"]],
            softmax_mode=doc.get("softmax_mode", "none"),
            fit_rows=list(doc.get("fit_rows", [])))
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ModelParseError(f"malformed program file: {exc}") from exc
    expanded = None
    if doc.get("expanded") is not None:
        e = doc["expanded"]
        polys = [mp_from_dict(p) for p in e["polys"]]
        expanded = ExpandedNetworkPoly(
            num_vars=program.input_width, polys=polys,
            total_degree=int(e["total_degree"]),
            term_count=int(e["term_count"]))
    return program, expanded


def save_program(program: PolyProgram, path: str,
                 expanded: ExpandedNetworkPoly | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(program_to_dict(program, expanded), fh,
                  separators=(",", ":"))
        fh.write("\n")


def load_program(path: str) -> tuple[PolyProgram, ExpandedNetworkPoly | None]:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelParseError(f"{path}: not valid JSON: {exc}") from exc
    return program_from_dict(doc)


def compile_report_rows(program: PolyProgram) -> list[dict]:
    """Rows for the compile report: layer, kind, degree, interval, errors."""
    return list(program.fit_rows)
