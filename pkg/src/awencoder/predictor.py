"""Reference black-box predictor speaking the line protocol of ``awencoder verify --predictor``.

    python3 -m awencoder.predictor CHECKPOINT

reads ``<path.npy>:<row>`` lines on stdin and prints one label per line.
"""
from __future__ import annotations

import sys

import numpy as np

from .models import load_checkpoint, predict_labels


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if len(argv) != 1:
        print("usage: python3 -m awencoder.predictor CHECKPOINT", file=sys.stderr)
        return 2
    models, _ = load_checkpoint(argv[0])
    encoder, probe = models["encoder"], models["probe"]
    arrays: dict[str, np.ndarray] = {}
    refs = [line.strip().rsplit(":", 1) for line in sys.stdin if line.strip()]
    rows = []
    for path, row in refs:
        if path not in arrays:
            arrays[path] = np.load(path, mmap_mode="r")
        rows.append(np.asarray(arrays[path][int(row)]))
    if rows:
        labels = predict_labels(encoder, probe, np.stack(rows))
        sys.stdout.write("".join(f"{int(v)}\n" for v in labels))
    return 0


if __name__ == "__main__":
    sys.exit(main())
