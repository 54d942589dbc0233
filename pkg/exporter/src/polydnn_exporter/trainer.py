"""Build and train the reference classifier.

The network is a two-hidden-layer perceptron (300 then 100 units) over the
flattened 784-pixel input, with batch normalisation before every activation
and a ten-way softmax at the output.

Everything runs in float64.  The exported file stores decimal weights and is
checked by comparing framework logits against an independent float64 forward
pass, so training in the same precision keeps that comparison about layout
conventions rather than accumulation order.  Op determinism is switched on
and the thread pools are pinned to one thread so that a seed fully determines
the exported bytes on a given framework version.
"""

from __future__ import annotations

import os
import warnings

import keras
import numpy as np
import tensorflow as tf

from .data import NUM_CLASSES, DataBundle, flatten_images

HIDDEN = (300, 100)
EPOCHS = 6
BATCH_SIZE = 128
ACCURACY_FLOOR = 0.85

_configured = False


def _configure() -> None:
    """One-time framework setup; must run before any graph executes."""
    global _configured
    if _configured:
        return
    try:
        tf.config.threading.set_intra_op_parallelism_threads(1)
        tf.config.threading.set_inter_op_parallelism_threads(1)
    except RuntimeError:
        pass  # context already initialised by an earlier caller; keep going
    tf.config.experimental.enable_op_determinism()
    keras.backend.set_floatx("float64")
    _configured = True


def build_classifier(input_width: int = 784,
                     hidden: tuple[int, ...] = HIDDEN,
                     classes: int = NUM_CLASSES) -> keras.Model:
    """The reference stack: (dense, batch norm, relu)* then a normalised softmax."""
    _configure()
    inp = keras.Input(shape=(input_width,))
    h = inp
    for width in hidden:
        h = keras.layers.Dense(width)(h)
        h = keras.layers.BatchNormalization()(h)
        h = keras.layers.Activation("relu")(h)
    h = keras.layers.Dense(classes)(h)
    h = keras.layers.BatchNormalization()(h)
    out = keras.layers.Activation("softmax")(h)
    model = keras.Model(inp, out, name="reference_classifier")
    model.compile(optimizer="adam", loss="sparse_categorical_crossentropy",
                  metrics=["accuracy"])
    return model


def evaluate_accuracy(model: keras.Model, x_test: np.ndarray,
                      y_test: np.ndarray) -> float:
    _, acc = model.evaluate(flatten_images(x_test), y_test, verbose=0)
    return float(acc)


def train_classifier(bundle: DataBundle, seed: int = 0,
                     hidden: tuple[int, ...] = HIDDEN, epochs: int = EPOCHS,
                     batch_size: int = BATCH_SIZE) -> tuple[keras.Model, float]:
    """Train from scratch; returns the model and its test accuracy.

    Accuracy below the sanity floor is a warning, not an error: a weak model
    still exercises every export contract.
    """
    _configure()
    keras.utils.set_random_seed(seed)
    model = build_classifier(hidden=hidden)
    model.fit(flatten_images(bundle.x_train), bundle.y_train,
              epochs=epochs, batch_size=batch_size, verbose=0)
    acc = evaluate_accuracy(model, bundle.x_test, bundle.y_test)
    if acc < ACCURACY_FLOOR:
        warnings.warn(
            f"test accuracy {acc:.4f} is below the sanity floor "
            f"{ACCURACY_FLOOR}; exporting anyway", stacklevel=2)
    return model, acc


def train_or_load_reference(bundle: DataBundle, seed: int = 0,
                            cache_path: str | None = None,
                            hidden: tuple[int, ...] = HIDDEN,
                            epochs: int = EPOCHS,
                            batch_size: int = BATCH_SIZE,
                            ) -> tuple[keras.Model, float]:
    """Load a previously trained model from ``cache_path`` if present,
    otherwise train and (when a path is given) save there."""
    if cache_path and os.path.exists(cache_path):
        _configure()
        model = keras.models.load_model(cache_path)
        return model, evaluate_accuracy(model, bundle.x_test, bundle.y_test)
    model, acc = train_classifier(bundle, seed=seed, hidden=hidden,
                                  epochs=epochs, batch_size=batch_size)
    if cache_path:
        model.save(cache_path)
    return model, acc


def presoftmax_model(model: keras.Model) -> keras.Model:
    """The framework's own forward pass up to the tensor feeding the softmax.

    This is the logit oracle for round-trip checks; it must stay a framework
    evaluation, not a reimplementation of the layers.
    """
    last = model.layers[-1]
    if not (isinstance(last, keras.layers.Activation)
            and last.get_config().get("activation") == "softmax"):
        raise ValueError("model does not end in a softmax activation layer")
    return keras.Model(model.inputs, last.input)


def framework_logits(model: keras.Model, x: np.ndarray) -> np.ndarray:
    return np.asarray(presoftmax_model(model).predict(x, verbose=0),
                      dtype=np.float64)
