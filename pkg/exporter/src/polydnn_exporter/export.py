"""Convert a trained framework model to the portable schema the compiler reads.

Layout conventions, which must match the consumer's reader exactly:

  - dense weights are stored flat row-major as an (out, in) matrix -- the
    transpose of the framework kernel -- under ``pre_activation = W x + b``;
  - batch normalisation exports gamma/beta/mean/var with the framework's
    stabilising epsilon already added to var, so readers divide by
    ``sqrt(var)`` directly;
  - hidden batch normalisations are exported verbatim (the consumer owns
    folding, and an unfolded file stays inspectable), but the one feeding the
    final softmax is folded into the last affine block here, because the
    schema represents the output map as a single affine layer:
    with ``s = gamma / sqrt(var)`` the fold is ``W' = s W`` (row-wise) and
    ``b' = s b + beta - mean s``;
  - softmax may appear only at the output, where it marks that affine block
    as the classifier head rather than adding a layer of its own.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import keras
import numpy as np
import tensorflow as tf

from .data import DataPaths
from .errors import ManifestError, UnsupportedLayerError

# framework activation name -> portable tag ("linear" stays implicit)
_ACTIVATION_TAGS = {"relu": "relu", "sigmoid": "sigmoid", "tanh": "tanh",
                    "linear": None, "softmax": "softmax"}


def _activation_tag(name: str, where: str) -> str | None:
    if name not in _ACTIVATION_TAGS:
        raise UnsupportedLayerError(
            f"{where}: activation {name!r} has no portable equivalent; "
            f"supported: {sorted(k for k in _ACTIVATION_TAGS)}")
    return _ACTIVATION_TAGS[name]


def _attach_activation(entries: list[dict], tag: str | None, where: str) -> None:
    if tag is None:
        return
    if not entries:
        raise UnsupportedLayerError(
            f"{where}: activation has no preceding layer to attach to")
    target = entries[-1]
    if target["kind"] not in ("dense", "batch_norm") or "activation" in target:
        raise UnsupportedLayerError(
            f"{where}: no unclaimed dense or batch-norm layer to carry "
            f"this activation")
    target["activation"] = tag


def _dense_entry(layer: keras.layers.Dense) -> dict:
    kernel = np.asarray(layer.kernel, dtype=np.float64)
    in_w, out_w = kernel.shape
    bias = (np.zeros(out_w) if layer.bias is None
            else np.asarray(layer.bias, dtype=np.float64))
    return {"kind": "dense", "widths": [int(in_w), int(out_w)],
            "weights": [float(v) for v in kernel.T.ravel()],
            "bias": [float(v) for v in bias]}


def _batch_norm_entry(layer: keras.layers.BatchNormalization) -> dict:
    mean = np.asarray(layer.moving_mean, dtype=np.float64)
    width = mean.shape[0]
    var = np.asarray(layer.moving_variance, dtype=np.float64) + layer.epsilon
    gamma = (np.ones(width) if layer.gamma is None
             else np.asarray(layer.gamma, dtype=np.float64))
    beta = (np.zeros(width) if layer.beta is None
            else np.asarray(layer.beta, dtype=np.float64))
    return {"kind": "batch_norm", "widths": [int(width), int(width)],
            "bn": {"gamma": [float(v) for v in gamma],
                   "beta": [float(v) for v in beta],
                   "mean": [float(v) for v in mean],
                   "var": [float(v) for v in var]}}


def _fold_into_softmax_output(dense: dict, bn: dict) -> dict:
    out_w, in_w = dense["widths"][1], dense["widths"][0]
    w = np.asarray(dense["weights"]).reshape(out_w, in_w)
    b = np.asarray(dense["bias"])
    scale = np.asarray(bn["bn"]["gamma"]) / np.sqrt(np.asarray(bn["bn"]["var"]))
    shift = np.asarray(bn["bn"]["beta"]) - np.asarray(bn["bn"]["mean"]) * scale
    return {"kind": "softmax_output", "widths": dense["widths"],
            "weights": [float(v) for v in (w * scale[:, None]).ravel()],
            "bias": [float(v) for v in b * scale + shift]}


def model_to_portable(model: keras.Model, name: str = "reference",
                      metadata: dict | None = None) -> dict:
    """The portable document for a Dense/BatchNorm/Activation stack."""
    input_shape = model.inputs[0].shape
    if len(input_shape) != 2:
        raise UnsupportedLayerError(
            f"model input must be a flat vector, got shape {input_shape}")
    entries: list[dict] = []
    for i, layer in enumerate(model.layers):
        where = f"layer {i} ({type(layer).__name__})"
        if isinstance(layer, keras.layers.InputLayer):
            continue
        if isinstance(layer, keras.layers.Dense):
            entries.append(_dense_entry(layer))
            tag = _activation_tag(layer.get_config()["activation"], where)
            _attach_activation(entries, tag, where)
        elif isinstance(layer, keras.layers.BatchNormalization):
            entries.append(_batch_norm_entry(layer))
        elif isinstance(layer, keras.layers.Activation):
            tag = _activation_tag(layer.get_config()["activation"], where)
            _attach_activation(entries, tag, where)
        elif isinstance(layer, keras.layers.ReLU):
            cfg = layer.get_config()
            if cfg.get("max_value") or cfg.get("negative_slope"):
                raise UnsupportedLayerError(
                    f"{where}: clipped or leaky variants are not portable")
            _attach_activation(entries, "relu", where)
        elif isinstance(layer, keras.layers.Softmax):
            _attach_activation(entries, "softmax", where)
        else:
            raise UnsupportedLayerError(
                f"{where}: only dense, batch normalisation and activation "
                f"layers are exportable")

    for entry in entries[:-1]:
        if entry.get("activation") == "softmax":
            raise UnsupportedLayerError("softmax may only appear at the output")
    if not entries:
        raise UnsupportedLayerError("model has no exportable layers")

    last = entries[-1]
    if last.get("activation") == "softmax":
        if last["kind"] == "dense":
            last["kind"] = "softmax_output"
            del last["activation"]
        elif (last["kind"] == "batch_norm" and len(entries) >= 2
              and entries[-2]["kind"] == "dense"
              and "activation" not in entries[-2]):
            entries[-2:] = [_fold_into_softmax_output(entries[-2], last)]
        else:
            raise UnsupportedLayerError(
                "softmax must follow the final affine block (directly or "
                "through one batch normalisation)")
    elif not (last["kind"] == "dense" and "activation" not in last):
        raise UnsupportedLayerError(
            "network must end in a softmax or a plain affine layer")

    return {"name": name, "input_width": int(input_shape[1]),
            "metadata": dict(metadata or {}), "layers": entries}


def export_model(model: keras.Model, path: str, name: str = "reference",
                 metadata: dict | None = None) -> dict:
    doc = model_to_portable(model, name=name, metadata=metadata)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    return doc


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

MANIFEST_FORMAT = "polydnn-export-manifest-v1"


@dataclass(frozen=True)
class ExportManifest:
    """What one export run produced and how to reproduce it."""

    model_path: str
    data_paths: DataPaths
    accuracy: float
    framework: str
    seed: int
    data_source: str


def framework_version() -> str:
    return f"keras {keras.__version__} (tensorflow {tf.__version__})"


def _check_manifest(man: ExportManifest) -> None:
    if not 0.0 <= man.accuracy <= 1.0:
        raise ManifestError(f"accuracy {man.accuracy} outside [0, 1]")
    if not isinstance(man.seed, int):
        raise ManifestError("seed must be an integer")


def write_manifest(man: ExportManifest, path: str) -> None:
    _check_manifest(man)
    doc = {"format": MANIFEST_FORMAT,
           "model": man.model_path,
           "datasets": {"images": man.data_paths.images,
                        "labels": man.data_paths.labels,
                        "csv": man.data_paths.csv},
           "accuracy": man.accuracy,
           "framework": man.framework,
           "seed": man.seed,
           "data_source": man.data_source}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def read_manifest(path: str) -> ExportManifest:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: not a {MANIFEST_FORMAT} file")
    try:
        man = ExportManifest(
            model_path=doc["model"],
            data_paths=DataPaths(images=doc["datasets"]["images"],
                                 labels=doc["datasets"]["labels"],
                                 csv=doc["datasets"]["csv"]),
            accuracy=float(doc["accuracy"]),
            framework=doc["framework"],
            seed=int(doc["seed"]),
            data_source=doc.get("data_source", "unknown"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: malformed manifest: {exc}") from exc
    _check_manifest(man)
    return man
