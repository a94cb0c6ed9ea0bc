#!/usr/bin/env python3
"""Writes MNIST as the four standard IDX files.

The pixel data comes from the mnist.pkl.gz pickle bundled in the mnist-hub
wheel (pip download --no-deps mnist-hub). Its 50k/10k/10k split is merged back
into the usual 60k train and 10k test sets. Pixels are stored as k/256, so
multiplying by 256 recovers the original bytes exactly.
"""

import argparse
import glob
import gzip
import hashlib
import os
import pickle
import struct
import subprocess
import sys
import tempfile
import zipfile

import numpy as np


def find_wheel(download_dir):
    subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", download_dir, "mnist-hub"],
                   check=True)
    wheels = glob.glob(os.path.join(download_dir, "mnist_hub-*.whl"))
    if not wheels:
        sys.exit("mnist-hub wheel not found after download")
    return wheels[0]


def write_split(out, prefix, images, labels):
    pixels = np.rint(images * 256).astype(np.uint8)
    with open(os.path.join(out, f"{prefix}-images-idx3-ubyte"), "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(pixels), 28, 28))
        f.write(pixels.tobytes())
    with open(os.path.join(out, f"{prefix}-labels-idx1-ubyte"), "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", help="output directory")
    ap.add_argument("--wheel", help="an already downloaded mnist_hub wheel")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel or find_wheel(tmp)
        blob = zipfile.ZipFile(wheel).read("mnist/data/mnist.pkl.gz")
    train, valid, test = pickle.loads(gzip.decompress(blob), encoding="latin1")
    write_split(args.out, "train", np.concatenate([train[0], valid[0]]), np.concatenate([train[1], valid[1]]))
    write_split(args.out, "t10k", test[0], test[1])
    for name in sorted(os.listdir(args.out)):
        with open(os.path.join(args.out, name), "rb") as f:
            print(hashlib.md5(f.read()).hexdigest(), name)


if __name__ == "__main__":
    main()
