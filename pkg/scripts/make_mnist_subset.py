"""Write the 5,000-sample MNIST subset bundled with mlxtend as an IDX pair.

    python scripts/make_mnist_subset.py data/mnist5k
"""

import os
import sys

import numpy as np
from mlxtend.data import mnist_data

from strokegraph.sketchio import write_mnist_idx


def main(out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    x, y = mnist_data()
    images = np.rint(x).astype(np.uint8).reshape(-1, 28, 28)
    write_mnist_idx(
        images,
        y,
        os.path.join(out_dir, "mnist5k-images-idx3-ubyte"),
        os.path.join(out_dir, "mnist5k-labels-idx1-ubyte"),
    )
    print(f"wrote {len(y)} samples to {out_dir}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data/mnist5k")
