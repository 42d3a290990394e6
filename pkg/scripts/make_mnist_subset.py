"""Write the 5,000-digit MNIST subset shipped with mlxtend as gzipped IDX files.

The sandbox this project was developed in has no route to the MNIST mirrors,
but ``mlxtend`` bundles a 5k sample of the original training images as CSV.
This script re-encodes it in the IDX layout ``trlhpo.data`` reads:

    python scripts/make_mnist_subset.py data/mnist5k

Point ``MNIST_DIR`` at a directory with the full distribution to use the
complete dataset instead.
"""

import gzip
import struct
import sys
from pathlib import Path

import numpy as np


def main(outdir: str) -> None:
    from mlxtend.data import mnist_data

    images, labels = mnist_data()
    images = images.astype(np.uint8).reshape(-1, 28, 28)
    labels = labels.astype(np.uint8)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    with gzip.GzipFile(out / "train-images-idx3-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        fh.write(images.tobytes())
    with gzip.GzipFile(out / "train-labels-idx1-ubyte.gz", "wb", mtime=0) as fh:
        fh.write(struct.pack(">II", 2049, len(labels)))
        fh.write(labels.tobytes())
    print(f"wrote {len(images)} images to {out}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/mnist5k")
