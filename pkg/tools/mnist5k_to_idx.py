"""Write the 5000-digit MNIST subset bundled with mlxtend as gzipped IDX files.

The sandbox this project was built in has no route to the canonical MNIST
mirrors, so the desk acceptance runs use this subset (500 digits per class,
taken from the original MNIST distribution).

    pip download mlxtend --no-deps -d /tmp/wheels
    python tools/mnist5k_to_idx.py /tmp/wheels/mlxtend-*.whl data/mnist5k
"""

import argparse
import gzip
import io
import struct
import zipfile
from pathlib import Path

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("wheel", type=Path)
    ap.add_argument("out_dir", type=Path)
    args = ap.parse_args()

    with zipfile.ZipFile(args.wheel) as zf:
        raw = gzip.decompress(zf.read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",", dtype=np.int64)
    pixels = table[:, :-1].astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    n = len(labels)

    args.out_dir.mkdir(parents=True, exist_ok=True)
    images_blob = struct.pack(">IIII", 0x803, n, 28, 28) + pixels.tobytes()
    labels_blob = struct.pack(">II", 0x801, n) + labels.tobytes()
    # mtime=0 keeps the gzip output byte-stable
    for name, blob in (("images-idx3-ubyte.gz", images_blob), ("labels-idx1-ubyte.gz", labels_blob)):
        with open(args.out_dir / name, "wb") as fh, gzip.GzipFile(fileobj=fh, mode="wb", mtime=0) as gz:
            gz.write(blob)
    print(f"wrote {n} digits to {args.out_dir}; per-class counts {np.bincount(labels).tolist()}")


if __name__ == "__main__":
    main()
