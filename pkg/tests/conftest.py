import gzip
import struct
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = ROOT / "data" / "mnist5k"


def write_idx(dirpath, pixels, labels, prefix="", gz=False):
    """Write an IDX image/label pair and return their paths."""
    dirpath = Path(dirpath)
    n, rows, cols = pixels.shape
    img = struct.pack(">IIII", 0x803, n, rows, cols) + pixels.astype(np.uint8).tobytes()
    lab = struct.pack(">II", 0x801, n) + labels.astype(np.uint8).tobytes()
    suffix = ".gz" if gz else ""
    ip = dirpath / f"{prefix}images-idx3-ubyte{suffix}"
    lp = dirpath / f"{prefix}labels-idx1-ubyte{suffix}"
    ip.write_bytes(gzip.compress(img) if gz else img)
    lp.write_bytes(gzip.compress(lab) if gz else lab)
    return ip, lp


@pytest.fixture
def tiny_set():
    from alcn.data import LabeledImageSet

    rng = np.random.default_rng(0)
    images = rng.random((100, 1, 8, 8), dtype=np.float32)
    labels = np.repeat(np.arange(10), 10)
    return LabeledImageSet(images, labels, [str(i) for i in range(10)])


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def record(criterion, passed, detail=""):
    ACCEPTANCE[criterion] = (bool(passed), detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[criterion]
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")
