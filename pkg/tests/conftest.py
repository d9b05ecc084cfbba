import os

import pytest


ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
MNIST_DIR = os.path.join(ROOT, "data", "mnist5k")
MNIST_IMAGES = os.path.join(MNIST_DIR, "mnist5k-images-idx3-ubyte")
MNIST_LABELS = os.path.join(MNIST_DIR, "mnist5k-labels-idx1-ubyte")


@pytest.fixture(scope="session")
def mnist_samples():
    from strokegraph.sketchio import load_mnist_idx

    if not os.path.exists(MNIST_IMAGES):
        pytest.importorskip("mlxtend")
        import subprocess
        import sys

        subprocess.check_call([sys.executable, os.path.join(ROOT, "scripts", "make_mnist_subset.py"), MNIST_DIR])
    return load_mnist_idx(MNIST_IMAGES, MNIST_LABELS)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
