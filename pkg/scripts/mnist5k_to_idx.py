"""Convert mlxtend's bundled 5000-sample MNIST CSV into an IDX file pair.

Usage:
    python scripts/mnist5k_to_idx.py path/to/mnist_5k.csv.gz OUT_DIR

The CSV (784 pixel columns then the label) ships inside the ``mlxtend``
wheel at ``mlxtend/data/data/mnist_5k.csv.gz``.
"""

import gzip
import os
import sys

import numpy as np

from neokd.data import write_idx


def main(csv_path, out_dir):
    with gzip.open(csv_path, "rt") as f:
        table = np.loadtxt(f, delimiter=",", dtype=np.int64)
    images, labels = table[:, :-1].astype(np.uint8), table[:, -1].astype(np.uint8)
    os.makedirs(out_dir, exist_ok=True)
    write_idx(
        images,
        labels,
        os.path.join(out_dir, "mnist5k-images-idx3-ubyte.gz"),
        os.path.join(out_dir, "mnist5k-labels-idx1-ubyte.gz"),
    )
    print(f"wrote {len(labels)} samples to {out_dir}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
