"""polydnn-exporter: train the reference classifier and export it, together
with dataset subsets and a manifest, in the formats the compiler consumes."""

import os

# Both must be set before the first framework import anywhere in the package.
# Level 2 keeps graph-optimizer chatter out of tool output; the oneDNN
# rewriter is disabled because float64 graphs fall back to the generic
# kernels anyway and its reorderings are the one remaining source of
# run-to-run noise.
os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "2")
os.environ.setdefault("TF_ENABLE_ONEDNN_OPTS", "0")

__version__ = "0.1.0"
