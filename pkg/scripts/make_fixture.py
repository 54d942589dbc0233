"""Regenerate the bundled fixture model and dataset.

Trains a small MLP (16-8-4-2) with batch normalisation before each hidden
relu on synthetic two-class data, then stores the learned parameters as
dense(identity) + batch_norm(relu) layers.  The batch_norm statistics are
the genuine running averages from training (variance stored with the
stabilising epsilon already added, matching the model convention), so
folding reproduces inference-mode behaviour exactly.  Outputs land in
tests/fixtures/ and are committed; this script only needs to run again if
the fixture should change.

Usage: python3 scripts/make_fixture.py
"""

import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from polydnn.model import (  # noqa: E402
    BATCH_NORM,
    DENSE,
    IDENTITY,
    RELU,
    SOFTMAX_OUTPUT,
    Layer,
    ModelGraph,
    fold_batch_norm,
    reference_infer_batch,
    save_model,
    validate_model,
)

OUT_DIR = os.path.join(os.path.dirname(__file__), "..", "tests", "fixtures")
SEED = 20240901
WIDTHS = (16, 8, 4, 2)
BN_EPS = 1e-5
N_TRAIN = 4000
N_FIXTURE = 1200
EPOCHS = 600
LR = 0.1


def make_data(rng, n):
    half = n // 2
    c0 = rng.uniform(0.25, 0.75, WIDTHS[0])
    shift = rng.uniform(-0.3, 0.3, WIDTHS[0])
    x0 = c0 + rng.normal(0.0, 0.21, (half, WIDTHS[0]))
    x1 = c0 + shift + rng.normal(0.0, 0.21, (n - half, WIDTHS[0]))
    X = np.clip(np.concatenate([x0, x1]), 0.0, 1.0)
    y = np.concatenate([np.zeros(half, np.int64), np.ones(n - half, np.int64)])
    perm = rng.permutation(n)
    return X[perm], y[perm]


def train(rng, X, y):
    """Full-batch SGD on dense -> batch norm -> relu -> ... -> affine."""
    nh = len(WIDTHS) - 2
    Ws = [rng.normal(0.0, np.sqrt(2.0 / WIDTHS[i]),
                     (WIDTHS[i + 1], WIDTHS[i]))
          for i in range(len(WIDTHS) - 1)]
    b_out = np.zeros(WIDTHS[-1])
    gam = [np.ones(WIDTHS[i + 1]) for i in range(nh)]
    bet = [np.zeros(WIDTHS[i + 1]) for i in range(nh)]
    r_mu = [np.zeros(WIDTHS[i + 1]) for i in range(nh)]
    r_var = [np.ones(WIDTHS[i + 1]) for i in range(nh)]
    onehot = np.eye(WIDTHS[-1])[y]
    n = len(X)
    for _ in range(EPOCHS):
        hs = [X]
        caches = []
        h = X
        for i in range(nh):
            z = h @ Ws[i].T
            mu, var = z.mean(0), z.var(0)
            inv = 1.0 / np.sqrt(var + BN_EPS)
            zin = (z - mu) * inv
            pre = gam[i] * zin + bet[i]
            h = np.maximum(pre, 0.0)
            hs.append(h)
            caches.append((z, mu, inv, zin, pre))
            r_mu[i] = 0.9 * r_mu[i] + 0.1 * mu
            r_var[i] = 0.9 * r_var[i] + 0.1 * var
        logits = h @ Ws[-1].T + b_out
        zz = logits - logits.max(1, keepdims=True)
        p = np.exp(zz)
        p /= p.sum(1, keepdims=True)
        g = (p - onehot) / n

        gW_out = g.T @ hs[-1]
        gb_out = g.sum(0)
        gh = g @ Ws[-1]
        for i in reversed(range(nh)):
            z, mu, inv, zin, pre = caches[i]
            gy = gh * (pre > 0.0)
            ggam = (gy * zin).sum(0)
            gbet = gy.sum(0)
            dzin = gy * gam[i]
            dvar = (dzin * (z - mu) * (-0.5) * inv**3).sum(0)
            dmu = (-dzin * inv).sum(0) + dvar * (-2.0) * (z - mu).mean(0)
            dz = dzin * inv + dvar * 2.0 * (z - mu) / n + dmu / n
            gh = dz @ Ws[i]
            Ws[i] -= LR * (dz.T @ hs[i])
            gam[i] -= LR * ggam
            bet[i] -= LR * gbet
        Ws[-1] -= LR * gW_out
        b_out -= LR * gb_out
    return Ws, b_out, gam, bet, r_mu, r_var


def build_model(Ws, b_out, gam, bet, r_mu, r_var):
    layers = []
    for i in range(len(WIDTHS) - 2):
        out_w, in_w = Ws[i].shape
        layers.append(Layer(kind=DENSE, in_width=in_w, width=out_w,
                            activation=IDENTITY, weights=Ws[i],
                            bias=np.zeros(out_w)))
        layers.append(Layer(kind=BATCH_NORM, in_width=out_w, width=out_w,
                            activation=RELU, bn_gamma=gam[i], bn_beta=bet[i],
                            bn_mean=r_mu[i], bn_var=r_var[i] + BN_EPS))
    layers.append(Layer(kind=SOFTMAX_OUTPUT, in_width=WIDTHS[-2],
                        width=WIDTHS[-1], activation=IDENTITY,
                        weights=Ws[-1], bias=b_out))
    return ModelGraph(name="fixture-16-8-4-2", input_width=WIDTHS[0],
                      layers=layers,
                      metadata={"source": "scripts/make_fixture.py",
                                "seed": SEED})


def main():
    rng = np.random.default_rng(SEED)
    X_all, y_all = make_data(rng, N_TRAIN + N_FIXTURE)
    X, y = X_all[:N_TRAIN], y_all[:N_TRAIN]
    Xf, yf = X_all[N_TRAIN:], y_all[N_TRAIN:]
    model = build_model(*train(rng, X, y))
    validate_model(model)

    # inference through batch_norm layers and through the folded model must
    # agree to float rounding
    folded = fold_batch_norm(model)
    logits_bn, _, pred_bn = reference_infer_batch(model, X)
    logits_f, _, _ = reference_infer_batch(folded, X)
    assert np.allclose(logits_bn, logits_f, atol=1e-9), "folding drifted"
    acc = float(np.mean(pred_bn == y))

    _, _, fix_pred = reference_infer_batch(model, Xf)
    fix_acc = float(np.mean(fix_pred == yf))
    print(f"train accuracy {acc:.4f}  fixture accuracy {fix_acc:.4f}")

    os.makedirs(OUT_DIR, exist_ok=True)
    save_model(model, os.path.join(OUT_DIR, "tiny_bn_mlp.json"))
    with open(os.path.join(OUT_DIR, "tiny_samples.csv"), "w",
              encoding="utf-8") as fh:
        for xi, yi in zip(Xf, yf):
            fh.write(",".join([str(int(yi))] + [repr(float(v)) for v in xi]))
            fh.write("\n")
    print(f"wrote {OUT_DIR}/tiny_bn_mlp.json and tiny_samples.csv")


if __name__ == "__main__":
    main()
