#!/usr/bin/env python3
"""Convert the digits bundled in the `mnist` npm package into IDX files.

The npm package ships 10,000 MNIST digits as per-class JSON arrays of
pixel intensities in [0, 1] (rounded to 3 decimals). Each value maps back
to its original byte with round(v * 255).

The first `--train-per-class` digits of every class become the training
split; everything else becomes the test split.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 scripts/mnist_npm_to_idx.py package data/mnist
"""
import argparse
import json
import os
import struct

SIZE = 28 * 28


def write_idx(out_dir, prefix, images, labels):
    with open(os.path.join(out_dir, f"{prefix}-images-idx3-ubyte"), "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(labels), 28, 28))
        for img in images:
            f.write(bytes(img))
    with open(os.path.join(out_dir, f"{prefix}-labels-idx1-ubyte"), "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("package_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--train-per-class", type=int, default=500)
    args = ap.parse_args()

    per_class = []
    for digit in range(10):
        path = os.path.join(args.package_dir, "src", "digits", f"{digit}.json")
        with open(path) as f:
            raw = json.load(f)["data"]
        assert len(raw) % SIZE == 0
        samples = []
        for i in range(len(raw) // SIZE):
            px = [int(round(v * 255)) for v in raw[i * SIZE:(i + 1) * SIZE]]
            assert all(0 <= p <= 255 for p in px)
            samples.append(px)
        per_class.append(samples)

    # Round-robin over classes so both splits interleave labels.
    train, test = ([], []), ([], [])
    longest = max(len(s) for s in per_class)
    for i in range(longest):
        for digit, samples in enumerate(per_class):
            if i >= len(samples):
                continue
            split = train if i < args.train_per_class else test
            split[0].append(samples[i])
            split[1].append(digit)

    os.makedirs(args.out_dir, exist_ok=True)
    write_idx(args.out_dir, "train", *train)
    write_idx(args.out_dir, "t10k", *test)
    print(f"train={len(train[1])} test={len(test[1])}")


if __name__ == "__main__":
    main()
