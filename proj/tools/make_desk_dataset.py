#!/usr/bin/env python3
"""Builds the small natural-image set used by the tests and examples.

Crops come from the sample images bundled with scikit-image. Training and
held-out crops are taken from disjoint source images.
"""
import argparse
import os

import numpy as np
from PIL import Image
import skimage.data

TRAIN_SOURCES = ["astronaut.png", "brick.png", "chelsea.png", "coffee.png", "coins.png", "grass.png",
                 "gravel.png", "moon.png", "motorcycle_left.png", "rocket.jpg", "page.png", "ihc.png"]
TEST_SOURCES = ["camera.png", "cell.png", "text.png", "clock_motion.png", "retina.jpg", "hubble_deep_field.jpg"]
DATA_DIR = os.path.dirname(skimage.data.__file__)


def luma(name):
    img = np.asarray(Image.open(os.path.join(DATA_DIR, name)), dtype=np.float64)
    if img.ndim == 3:
        img = img[..., :3] @ np.array([0.299, 0.587, 0.114])
    elif img.max() <= 1.0:
        img = img * 255.0
    # Large sources are halved so a small crop still holds some structure.
    while min(img.shape) >= 700:
        h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
        img = img[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    return img


def crops(img, size, count, rng):
    out = []
    h, w = img.shape
    for _ in range(count):
        y = rng.integers(0, h - size + 1)
        x = rng.integers(0, w - size + 1)
        out.append(img[y:y + size, x:x + size])
    return out


def write(directory, prefix, patches):
    os.makedirs(directory, exist_ok=True)
    for i, p in enumerate(patches):
        arr = np.clip(np.rint(p), 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(os.path.join(directory, f"{prefix}_{i:02d}.pgm"))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__), "..", "tests", "data"))
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--train-per-source", type=int, default=10)
    ap.add_argument("--test-per-source", type=int, default=4)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    n_train = n_test = 0
    for name in TRAIN_SOURCES:
        patches = crops(luma(name), 80, args.train_per_source, rng)
        write(os.path.join(args.out, "train"), os.path.splitext(name)[0], patches)
        n_train += len(patches)
    for name in TEST_SOURCES:
        patches = crops(luma(name), 96, args.test_per_source, rng)
        write(os.path.join(args.out, "test"), os.path.splitext(name)[0], patches)
        n_test += len(patches)
    # small fixture for the command-line tests
    cli = os.path.join(args.out, "cli")
    os.makedirs(cli, exist_ok=True)
    corner = Image.open(os.path.join(args.out, "test", "camera_00.pgm")).crop((0, 0, 64, 64))
    corner.save(os.path.join(cli, "camera64.pgm"))
    corner.save(os.path.join(cli, "camera64.png"))
    print(f"train {n_train} crops (80x80), test {n_test} crops (96x96) -> {os.path.abspath(args.out)}")


if __name__ == "__main__":
    main()
