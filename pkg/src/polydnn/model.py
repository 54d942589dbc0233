"""Network description, reference inference, and dataset loading.

A model is a feed-forward stack of layers over a flat input vector.  The
on-disk form is JSON; weights for fully connected layers are stored row-major
(one row per output unit).  Convolutions and pooling layers carry explicit
per-unit connectivity (lists of input indices) rather than geometry, which
keeps the compiler free of any notion of image shape.

The affine convention everywhere is ``pre_activation = W x + b``.
"""

from __future__ import annotations

import csv
import gzip
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ModelParseError, UnsupportedStructureError, ValidationError

DENSE = "dense"
CONV2D = "conv2d"
MAXPOOL = "maxpool"
MEANPOOL = "meanpool"
BATCH_NORM = "batch_norm"
SOFTMAX_OUTPUT = "softmax_output"

AFFINE_KINDS = (DENSE, CONV2D, SOFTMAX_OUTPUT)
POOL_KINDS = (MAXPOOL, MEANPOOL)
LAYER_KINDS = AFFINE_KINDS + POOL_KINDS + (BATCH_NORM,)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ActivationKind:
    """One of the supported unit nonlinearities.

    The leaky slope is a fixed property of the kind, not a per-layer
    parameter: the compiler's replacement tables are keyed by (tag, degree,
    interval) and a free slope would silently break that.
    """

    tag: str
    leak_slope: float = 0.0

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.tag == "identity":
            return x
        if self.tag == "relu":
            return np.maximum(x, 0.0)
        if self.tag == "leaky_relu":
            return np.where(x > 0.0, x, self.leak_slope * x)
        if self.tag == "sigmoid":
            return expit(x)
        if self.tag == "tanh":
            return np.tanh(x)
        raise ValidationError(f"unknown activation tag {self.tag!r}")


IDENTITY = ActivationKind("identity")
RELU = ActivationKind("relu")
LEAKY_RELU = ActivationKind("leaky_relu", 0.01)
SIGMOID = ActivationKind("sigmoid")
TANH = ActivationKind("tanh")

_ACTIVATIONS = {a.tag: a for a in (IDENTITY, RELU, LEAKY_RELU, SIGMOID, TANH)}


def activation_from_name(name: str) -> ActivationKind:
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ModelParseError(
            f"unknown activation {name!r}; expected one of "
            f"{sorted(_ACTIVATIONS)}") from None


# ---------------------------------------------------------------------------
# layers and model graph
# ---------------------------------------------------------------------------

@dataclass
class Layer:
    """One layer of the stack.

    ``weights`` is an (out, in) float array for dense and softmax_output
    layers, and a list of per-unit 1-d arrays aligned with ``connectivity``
    for conv2d.  Pool layers have no weights; batch_norm carries the four
    per-unit statistics instead (``var`` already includes any stabilising
    epsilon the training framework added).
    """

    kind: str
    in_width: int
    width: int
    activation: ActivationKind = IDENTITY
    weights: object = None
    bias: np.ndarray | None = None
    connectivity: list[np.ndarray] | None = None
    bn_gamma: np.ndarray | None = None
    bn_beta: np.ndarray | None = None
    bn_mean: np.ndarray | None = None
    bn_var: np.ndarray | None = None
    trained_as_mean: bool = False
    pseudo_units: tuple[int, ...] = ()


@dataclass
class ModelGraph:
    name: str
    input_width: int
    layers: list[Layer]
    metadata: dict = field(default_factory=dict)

    @property
    def output_width(self) -> int:
        return self.layers[-1].width

    def has_batch_norm(self) -> bool:
        return any(l.kind == BATCH_NORM for l in self.layers)


def validate_model(m: ModelGraph) -> None:
    """Raise ValidationError naming the first inconsistent layer."""
    if m.input_width < 1:
        raise ValidationError("input_width must be at least 1")
    if not m.layers:
        raise ValidationError("model has no layers")
    prev = m.input_width
    for i, l in enumerate(m.layers):
        where = f"layer {i} ({l.kind})"
        if l.kind not in LAYER_KINDS:
            raise ValidationError(f"{where}: unknown kind")
        if l.in_width != prev:
            raise ValidationError(
                f"{where}: expects {l.in_width} inputs but gets {prev}")
        if l.width < 1:
            raise ValidationError(f"{where}: width must be at least 1")
        if l.kind in (DENSE, SOFTMAX_OUTPUT):
            w = l.weights
            if not isinstance(w, np.ndarray) or w.shape != (l.width, l.in_width):
                raise ValidationError(
                    f"{where}: weights must have shape "
                    f"({l.width}, {l.in_width})")
            if l.bias is None or l.bias.shape != (l.width,):
                raise ValidationError(f"{where}: bias must have length {l.width}")
            bad = [u for u in l.pseudo_units if not 0 <= u < l.width]
            if bad:
                raise ValidationError(f"{where}: pseudo unit {bad[0]} out of range")
        elif l.kind == CONV2D:
            if l.connectivity is None or len(l.connectivity) != l.width:
                raise ValidationError(
                    f"{where}: connectivity must list {l.width} windows")
            if not isinstance(l.weights, list) or len(l.weights) != l.width:
                raise ValidationError(
                    f"{where}: weights must list {l.width} rows")
            for j, (conn, row) in enumerate(zip(l.connectivity, l.weights)):
                if conn.size == 0:
                    raise ValidationError(f"{where}: unit {j} window is empty")
                if np.any(conn < 0) or np.any(conn >= l.in_width):
                    raise ValidationError(
                        f"{where}: unit {j} window index out of range")
                if row.shape != conn.shape:
                    raise ValidationError(
                        f"{where}: unit {j} weight row does not match window")
            if l.bias is None or l.bias.shape != (l.width,):
                raise ValidationError(f"{where}: bias must have length {l.width}")
        elif l.kind in POOL_KINDS:
            if l.connectivity is None or len(l.connectivity) != l.width:
                raise ValidationError(
                    f"{where}: connectivity must list {l.width} windows")
            for j, conn in enumerate(l.connectivity):
                if conn.size == 0:
                    raise ValidationError(f"{where}: unit {j} window is empty")
                if np.any(conn < 0) or np.any(conn >= l.in_width):
                    raise ValidationError(
                        f"{where}: unit {j} window index out of range")
        elif l.kind == BATCH_NORM:
            if l.width != l.in_width:
                raise ValidationError(f"{where}: width must equal input width")
            for nm, arr in (("gamma", l.bn_gamma), ("beta", l.bn_beta),
                            ("mean", l.bn_mean), ("var", l.bn_var)):
                if arr is None or arr.shape != (l.width,):
                    raise ValidationError(
                        f"{where}: bn.{nm} must have length {l.width}")
            if np.any(l.bn_var <= 0.0):
                raise ValidationError(f"{where}: bn.var must be positive")
        if l.kind == SOFTMAX_OUTPUT:
            if i != len(m.layers) - 1:
                raise ValidationError(f"{where}: must be the last layer")
            if l.activation.tag != "identity":
                raise ValidationError(
                    f"{where}: carries its own output map; activation must "
                    f"be identity")
        prev = l.width
    last = m.layers[-1]
    if last.kind != SOFTMAX_OUTPUT and not (
            last.kind == DENSE and last.activation.tag == "identity"):
        raise ValidationError(
            "last layer must be softmax_output or a dense layer with "
            "identity activation")


# ---------------------------------------------------------------------------
# JSON load / save
# ---------------------------------------------------------------------------

def _need(d: dict, key: str, where: str):
    if key not in d:
        raise ModelParseError(f"{where}: missing field {key!r}")
    return d[key]


def _parse_weights(raw, out_w: int, in_w: int, where: str) -> np.ndarray:
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim == 1:
        if arr.size != out_w * in_w:
            raise ModelParseError(
                f"{where}: flat weights have {arr.size} entries, expected "
                f"{out_w * in_w}")
        return arr.reshape(out_w, in_w)
    if arr.ndim == 2:
        if arr.shape != (out_w, in_w):
            raise ModelParseError(
                f"{where}: weights shape {arr.shape} != ({out_w}, {in_w})")
        return arr
    raise ModelParseError(f"{where}: weights must be a flat or nested list")


def _parse_layer(d: dict, i: int) -> Layer:
    where = f"layer {i}"
    kind = _need(d, "kind", where)
    if kind not in LAYER_KINDS:
        raise ModelParseError(f"{where}: unknown kind {kind!r}")
    widths = _need(d, "widths", where)
    if (not isinstance(widths, list) or len(widths) != 2
            or not all(isinstance(w, int) for w in widths)):
        raise ModelParseError(f"{where}: widths must be [in, out]")
    in_w, out_w = widths
    act = activation_from_name(d.get("activation", "identity"))
    layer = Layer(kind=kind, in_width=in_w, width=out_w, activation=act)

    if kind in (DENSE, SOFTMAX_OUTPUT):
        layer.weights = _parse_weights(_need(d, "weights", where), out_w, in_w,
                                       where)
        layer.bias = np.asarray(_need(d, "bias", where), dtype=np.float64)
        layer.pseudo_units = tuple(int(u) for u in d.get("pseudo_units", []))
    elif kind == CONV2D:
        conn_raw = _need(d, "connectivity", where)
        rows_raw = _need(d, "weights", where)
        if not isinstance(conn_raw, list) or not isinstance(rows_raw, list):
            raise ModelParseError(f"{where}: connectivity and weights must be lists")
        if len(conn_raw) != out_w or len(rows_raw) != out_w:
            raise ModelParseError(
                f"{where}: connectivity/weights must have {out_w} entries")
        layer.connectivity = [np.asarray(c, dtype=np.int64) for c in conn_raw]
        layer.weights = [np.asarray(r, dtype=np.float64) for r in rows_raw]
        layer.bias = np.asarray(_need(d, "bias", where), dtype=np.float64)
    elif kind in POOL_KINDS:
        conn_raw = _need(d, "connectivity", where)
        if not isinstance(conn_raw, list) or len(conn_raw) != out_w:
            raise ModelParseError(
                f"{where}: connectivity must have {out_w} windows")
        layer.connectivity = [np.asarray(c, dtype=np.int64) for c in conn_raw]
        layer.trained_as_mean = bool(d.get("trained_as_mean", False))
    elif kind == BATCH_NORM:
        bn = _need(d, "bn", where)
        for nm in ("gamma", "beta", "mean", "var"):
            if nm not in bn:
                raise ModelParseError(f"{where}: missing field bn.{nm!r}")
        layer.bn_gamma = np.asarray(bn["gamma"], dtype=np.float64)
        layer.bn_beta = np.asarray(bn["beta"], dtype=np.float64)
        layer.bn_mean = np.asarray(bn["mean"], dtype=np.float64)
        layer.bn_var = np.asarray(bn["var"], dtype=np.float64)
    return layer


def load_model(path: str) -> ModelGraph:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelParseError(f"{path}: not valid JSON: {exc}") from exc
    return model_from_dict(doc)


def model_from_dict(doc: dict) -> ModelGraph:
    if not isinstance(doc, dict):
        raise ModelParseError("model document must be a JSON object")
    name = doc.get("name", "unnamed")
    input_width = _need(doc, "input_width", "model")
    if not isinstance(input_width, int):
        raise ModelParseError("model: input_width must be an integer")
    layers_raw = _need(doc, "layers", "model")
    if not isinstance(layers_raw, list) or not layers_raw:
        raise ModelParseError("model: layers must be a non-empty list")
    layers = [_parse_layer(d, i) for i, d in enumerate(layers_raw)]
    m = ModelGraph(name=name, input_width=input_width, layers=layers,
                   metadata=dict(doc.get("metadata", {})))
    validate_model(m)
    return m


def model_to_dict(m: ModelGraph) -> dict:
    layers = []
    for l in m.layers:
        d: dict = {"kind": l.kind, "widths": [l.in_width, l.width]}
        if l.activation.tag != "identity":
            d["activation"] = l.activation.tag
        if l.kind in (DENSE, SOFTMAX_OUTPUT):
            d["weights"] = [float(v) for v in l.weights.ravel()]
            d["bias"] = [float(v) for v in l.bias]
            if l.pseudo_units:
                d["pseudo_units"] = list(l.pseudo_units)
        elif l.kind == CONV2D:
            d["connectivity"] = [[int(i) for i in c] for c in l.connectivity]
            d["weights"] = [[float(v) for v in r] for r in l.weights]
            d["bias"] = [float(v) for v in l.bias]
        elif l.kind in POOL_KINDS:
            d["connectivity"] = [[int(i) for i in c] for c in l.connectivity]
            if l.trained_as_mean:
                d["trained_as_mean"] = True
        elif l.kind == BATCH_NORM:
            d["bn"] = {
                "gamma": [float(v) for v in l.bn_gamma],
                "beta": [float(v) for v in l.bn_beta],
                "mean": [float(v) for v in l.bn_mean],
                "var": [float(v) for v in l.bn_var],
            }
        layers.append(d)
    return {"name": m.name, "input_width": m.input_width,
            "metadata": m.metadata, "layers": layers}


def save_model(m: ModelGraph, path: str) -> None:
    validate_model(m)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(m), fh, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# batch-norm folding
# ---------------------------------------------------------------------------

def fold_batch_norm(m: ModelGraph) -> ModelGraph:
    """Return an equivalent model with every batch_norm layer absorbed.

    A batch_norm directly after an affine layer with identity activation is
    folded backward into that layer's weights, and the normalisation's
    activation moves onto it.  A batch_norm with identity activation is
    instead folded forward into the next affine layer.  Anything else (for
    example normalising after a pool) has no affine neighbour to absorb the
    scale and is rejected.
    """
    out: list[Layer] = []
    pending: tuple[np.ndarray, np.ndarray] | None = None  # input map s*u + h
    for i, l in enumerate(m.layers):
        where = f"layer {i} ({l.kind})"
        if l.kind == BATCH_NORM:
            scale = l.bn_gamma / np.sqrt(l.bn_var)
            shift = l.bn_beta - l.bn_mean * scale
            if (pending is None and out and out[-1].kind in AFFINE_KINDS
                    and out[-1].activation.tag == "identity"):
                prev = out[-1]
                if prev.kind == CONV2D:
                    prev.weights = [r * scale[j]
                                    for j, r in enumerate(prev.weights)]
                else:
                    prev.weights = prev.weights * scale[:, None]
                prev.bias = prev.bias * scale + shift
                prev.activation = l.activation
                if prev.kind == SOFTMAX_OUTPUT and l.activation.tag != "identity":
                    raise UnsupportedStructureError(
                        f"{where}: non-identity activation cannot follow the "
                        f"output layer")
            elif l.activation.tag == "identity":
                if pending is not None:
                    ps, ph = pending
                    pending = (scale * ps, scale * ph + shift)
                else:
                    pending = (scale, shift)
            else:
                raise UnsupportedStructureError(
                    f"{where}: no adjacent affine layer can absorb this "
                    f"normalisation")
        else:
            nl = copy_layer(l)
            if pending is not None:
                s, h = pending
                if nl.kind in (DENSE, SOFTMAX_OUTPUT):
                    nl.bias = nl.bias + nl.weights @ h
                    nl.weights = nl.weights * s[None, :]
                elif nl.kind == CONV2D:
                    nl.bias = nl.bias + np.array(
                        [r @ h[c] for r, c in zip(nl.weights, nl.connectivity)])
                    nl.weights = [r * s[c]
                                  for r, c in zip(nl.weights, nl.connectivity)]
                else:
                    raise UnsupportedStructureError(
                        f"{where}: a pending normalisation cannot pass "
                        f"through a pool layer")
                pending = None
            out.append(nl)
    if pending is not None:
        raise UnsupportedStructureError(
            "trailing normalisation has no affine layer to fold into")
    folded = ModelGraph(name=m.name, input_width=m.input_width, layers=out,
                        metadata=dict(m.metadata))
    validate_model(folded)
    return folded


def copy_layer(l: Layer) -> Layer:
    return Layer(
        kind=l.kind, in_width=l.in_width, width=l.width,
        activation=l.activation,
        weights=(l.weights.copy() if isinstance(l.weights, np.ndarray)
                 else [r.copy() for r in l.weights] if l.weights is not None
                 else None),
        bias=None if l.bias is None else l.bias.copy(),
        connectivity=(None if l.connectivity is None
                      else [c.copy() for c in l.connectivity]),
        bn_gamma=None if l.bn_gamma is None else l.bn_gamma.copy(),
        bn_beta=None if l.bn_beta is None else l.bn_beta.copy(),
        bn_mean=None if l.bn_mean is None else l.bn_mean.copy(),
        bn_var=None if l.bn_var is None else l.bn_var.copy(),
        trained_as_mean=l.trained_as_mean,
        pseudo_units=l.pseudo_units,
    )


# ---------------------------------------------------------------------------
# reference inference
# ---------------------------------------------------------------------------

@dataclass
class InferResult:
    logits: np.ndarray
    probs: np.ndarray | None
    predicted_class: int


def _layer_forward(l: Layer, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (pre_activation, output) for a batch X of shape (N, in)."""
    if l.kind in (DENSE, SOFTMAX_OUTPUT):
        pre = X @ l.weights.T + l.bias
    elif l.kind == CONV2D:
        pre = np.empty((X.shape[0], l.width))
        for j, (conn, row) in enumerate(zip(l.connectivity, l.weights)):
            pre[:, j] = X[:, conn] @ row + l.bias[j]
    elif l.kind == MAXPOOL:
        pre = np.empty((X.shape[0], l.width))
        for j, conn in enumerate(l.connectivity):
            pre[:, j] = np.max(X[:, conn], axis=1)
    elif l.kind == MEANPOOL:
        pre = np.empty((X.shape[0], l.width))
        for j, conn in enumerate(l.connectivity):
            pre[:, j] = np.mean(X[:, conn], axis=1)
    elif l.kind == BATCH_NORM:
        scale = l.bn_gamma / np.sqrt(l.bn_var)
        pre = X * scale + (l.bn_beta - l.bn_mean * scale)
    else:
        raise ValidationError(f"unknown layer kind {l.kind!r}")
    if l.kind == SOFTMAX_OUTPUT:
        return pre, pre
    return pre, l.activation.apply(pre)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=1, keepdims=True)


def reference_infer_batch(m: ModelGraph, X: np.ndarray):
    """Float64 forward pass.  Returns (logits, probs_or_None, classes)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != m.input_width:
        raise ValidationError(
            f"inputs must have shape (N, {m.input_width})")
    out = X
    for l in m.layers:
        _, out = _layer_forward(l, out)
    logits = out
    probs = _softmax(logits) if m.layers[-1].kind == SOFTMAX_OUTPUT else None
    classes = np.argmax(logits, axis=1)
    return logits, probs, classes


def reference_infer(m: ModelGraph, x: np.ndarray) -> InferResult:
    logits, probs, classes = reference_infer_batch(
        m, np.asarray(x, dtype=np.float64)[None, :])
    return InferResult(logits=logits[0],
                       probs=None if probs is None else probs[0],
                       predicted_class=int(classes[0]))


def layer_preactivations(m: ModelGraph, X: np.ndarray) -> list[np.ndarray]:
    """Per layer, the values whose magnitude bounds that layer's fit interval.

    For affine and batch_norm layers this is the pre-activation; for pools it
    is the set of window inputs (the values a max gadget actually touches).
    """
    X = np.asarray(X, dtype=np.float64)
    traces = []
    out = X
    for l in m.layers:
        pre, nxt = _layer_forward(l, out)
        if l.kind in POOL_KINDS:
            cols = np.unique(np.concatenate(l.connectivity))
            traces.append(out[:, cols])
        else:
            traces.append(pre)
        out = nxt
    return traces


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class LabeledDataset:
    inputs: np.ndarray  # (N, width) float64, expected in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return self.inputs.shape[0]


def _open_maybe_gzip(path: str):
    if path.endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path: str, expected_magic: int) -> np.ndarray:
    with _open_maybe_gzip(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ModelParseError(f"{path}: truncated idx file")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise ModelParseError(
            f"{path}: magic number 0x{magic:08x}, expected "
            f"0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ModelParseError(f"{path}: truncated idx header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    body = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if body.size != count:
        raise ModelParseError(
            f"{path}: payload has {body.size} bytes, header promises {count}")
    return body.reshape(dims)


def load_idx_dataset(images_path: str, labels_path: str) -> LabeledDataset:
    """MNIST-style idx pair: unsigned bytes scaled into [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ModelParseError(
            f"{images_path}: {images.shape[0]} images but "
            f"{labels.shape[0]} labels")
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(inputs=flat, labels=labels.astype(np.int64))


def load_csv_dataset(path: str) -> LabeledDataset:
    """CSV rows of ``label, v1, v2, ...`` with values already in [0, 1]."""
    labels = []
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for ln, row in enumerate(csv.reader(fh)):
            if not row:
                continue
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise ModelParseError(f"{path}:{ln + 1}: {exc}") from exc
    if not rows:
        raise ModelParseError(f"{path}: no data rows")
    width = len(rows[0])
    for ln, r in enumerate(rows):
        if len(r) != width:
            raise ModelParseError(
                f"{path}: row {ln + 1} has {len(r)} values, expected {width}")
    return LabeledDataset(inputs=np.asarray(rows, dtype=np.float64),
                          labels=np.asarray(labels, dtype=np.int64))


def load_dataset(path: str, labels_path: str | None = None) -> LabeledDataset:
    """Dispatch on file type: .csv, or an idx images file plus labels file.

    For idx input the labels path can be omitted if the conventional naming
    is used (``...-images-idx3-ubyte`` next to ``...-labels-idx1-ubyte``).
    """
    stripped = path[:-3] if path.endswith(".gz") else path
    if stripped.endswith(".csv"):
        return load_csv_dataset(path)
    if labels_path is None:
        guess = (path.replace("images-idx3", "labels-idx1")
                 .replace("images.idx3", "labels.idx1"))
        if guess == path:
            raise ValidationError(
                f"{path}: cannot infer labels file; pass it explicitly")
        labels_path = guess
    return load_idx_dataset(path, labels_path)
