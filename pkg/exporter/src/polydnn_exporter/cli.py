"""Command line front end: fetch data, train, export model and subsets,
write the manifest.

Everything lands in one output directory; paths inside the manifest are
relative to it so the directory can be moved or shipped as a unit.
"""

from __future__ import annotations

import argparse
import os
import sys

from .data import SYNTH_TEST, SYNTH_TRAIN, export_data, get_dataset
from .errors import ExporterError
from .export import (ExportManifest, export_model, framework_version,
                     write_manifest)
from .trainer import (ACCURACY_FLOOR, BATCH_SIZE, EPOCHS, HIDDEN,
                      train_or_load_reference)


def _parse_hidden(text: str) -> tuple[int, ...]:
    try:
        widths = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated integers")
    if not widths or any(w < 1 for w in widths):
        raise argparse.ArgumentTypeError("widths must be positive")
    return widths


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="polydnn-export",
        description="Train the reference classifier and export it in the "
                    "portable formats the polynomial compiler consumes.")
    p.add_argument("--out-dir", required=True,
                   help="directory for model, subsets and manifest")
    p.add_argument("--name", default="reference",
                   help="basename for the exported files")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden", type=_parse_hidden, default=HIDDEN,
                   help="hidden layer widths, e.g. 300,100")
    p.add_argument("--epochs", type=int, default=EPOCHS)
    p.add_argument("--batch-size", type=int, default=BATCH_SIZE)
    p.add_argument("--train-samples", type=int, default=None,
                   help="cap the training split (default: full corpus, or "
                        f"{SYNTH_TRAIN} synthetic samples)")
    p.add_argument("--test-samples", type=int, default=None,
                   help=f"cap the test split (default: full corpus, or "
                        f"{SYNTH_TEST} synthetic samples)")
    p.add_argument("--subset", type=int, default=500,
                   help="test samples written to the idx subset")
    p.add_argument("--csv-rows", type=int, default=100,
                   help="test samples written to the CSV subset")
    p.add_argument("--cache", default=None,
                   help="framework-native model file to load from / save to")
    p.add_argument("--require-download", action="store_true",
                   help="fail instead of generating synthetic data when the "
                        "corpus cannot be fetched")
    return p


def run(args: argparse.Namespace) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    bundle = get_dataset(seed=args.seed, n_train=args.train_samples,
                         n_test=args.test_samples,
                         allow_synthetic=not args.require_download)
    print(f"data source {bundle.source}  train {len(bundle.x_train)} "
          f"test {len(bundle.x_test)}")
    model, acc = train_or_load_reference(
        bundle, seed=args.seed, cache_path=args.cache, hidden=args.hidden,
        epochs=args.epochs, batch_size=args.batch_size)
    floor_note = "" if acc >= ACCURACY_FLOOR else "  (below sanity floor)"
    print(f"test accuracy {acc:.4f}{floor_note}")

    model_path = os.path.join(args.out_dir, f"{args.name}.json")
    export_model(model, model_path, name=args.name,
                 metadata={"data_source": bundle.source, "seed": args.seed,
                           "test_accuracy": acc})
    paths = export_data(bundle.x_test, bundle.y_test, args.out_dir,
                        n=args.subset, stem=f"{args.name}-test",
                        csv_rows=args.csv_rows)
    rel = lambda p: os.path.relpath(p, args.out_dir)  # noqa: E731
    manifest = ExportManifest(
        model_path=rel(model_path),
        data_paths=type(paths)(images=rel(paths.images),
                               labels=rel(paths.labels), csv=rel(paths.csv)),
        accuracy=acc, framework=framework_version(), seed=args.seed,
        data_source=bundle.source)
    manifest_path = os.path.join(args.out_dir, "manifest.json")
    write_manifest(manifest, manifest_path)

    for label, path in (("model", model_path), ("images", paths.images),
                        ("labels", paths.labels), ("csv", paths.csv),
                        ("manifest", manifest_path)):
        print(f"wrote {label} {path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ExporterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
