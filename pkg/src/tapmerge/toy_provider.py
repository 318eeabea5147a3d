"""Reference feature provider for the toy encoder.

Usage: ``python -m tapmerge.toy_provider CHECKPOINT SAMPLES OUTPUT``. Reads an MKT1
checkpoint and an FTS1 file of inputs, writes the encoder's features as FTS1
carrying the input file's sample digest.
"""
from __future__ import annotations

import sys

from .errors import TapMergeError
from .tap import FeatureSet, load_features, save_features
from .tensor_store import load_checkpoint
from .toy_bench import config_from_weights, encode


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 3:
        print("usage: python -m tapmerge.toy_provider CHECKPOINT SAMPLES OUTPUT", file=sys.stderr)
        return 1
    ckpt, samples, out = argv
    try:
        weights = load_checkpoint(ckpt)
        inputs = load_features(samples, "inputs")
        feats = encode(weights, inputs.matrix, config_from_weights(weights))
        save_features(FeatureSet("features", feats, inputs.sample_digest, "toy_encoder"), out)
    except (TapMergeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", 2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
