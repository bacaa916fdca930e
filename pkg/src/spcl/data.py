"""Datasets: in-memory arrays, .npz serialization, and a procedural toy set.

The on-disk format is a .npz archive with float32 images in [0, 1], layout
(N, C, H, W), under the keys ``train_images``/``train_labels`` and
``test_images``/``test_labels``. Pretraining ignores labels; the probe and
the distance diagnostics require them.
"""

import argparse
from dataclasses import dataclass

import numpy as np
import torch

from .config import derive_rng


class DataError(ValueError):
    pass


@dataclass
class ArrayDataset:
    """Fixed array of samples; sample ids are positions in [0, n)."""

    images: torch.Tensor
    labels: np.ndarray | None = None

    def __post_init__(self):
        if not isinstance(self.images, torch.Tensor):
            self.images = torch.as_tensor(np.asarray(self.images), dtype=torch.float32)
        if self.images.dtype != torch.float32:
            self.images = self.images.float()
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.images):
                raise DataError("labels and images disagree on sample count")

    def __len__(self):
        return self.images.shape[0]

    @property
    def sample_ids(self):
        return np.arange(len(self), dtype=np.int64)

    def take(self, ids):
        return self.images[torch.as_tensor(np.asarray(ids, dtype=np.int64))]


def save_npz(path, train_images, train_labels, test_images, test_labels):
    np.savez_compressed(
        path,
        train_images=np.asarray(train_images, dtype=np.float32),
        train_labels=np.asarray(train_labels, dtype=np.int64),
        test_images=np.asarray(test_images, dtype=np.float32),
        test_labels=np.asarray(test_labels, dtype=np.int64),
    )


def load_npz(path, split="train"):
    try:
        with np.load(path) as archive:
            images = archive[f"{split}_images"]
            labels = archive[f"{split}_labels"]
    except FileNotFoundError:
        raise DataError(f"dataset file not found: {path}") from None
    except KeyError as exc:
        raise DataError(f"dataset {path} lacks the {split!r} split ({exc})") from None
    if len(images) == 0:
        raise DataError(f"dataset {path} split {split!r} is empty")
    return ArrayDataset(torch.from_numpy(images.astype(np.float32, copy=False)), labels)


# ---------------------------------------------------------------------------
# Procedural 5-class toy images (32x32). The class cue is the spatial pattern;
# colors, positions and scales are per-sample nuisances so that augmentation-
# invariant structure exists without making instances trivially collapsible.
# ---------------------------------------------------------------------------

TOY_CLASSES = ("disk", "box", "cross", "hstripes", "checker")


def _random_colors(rng):
    # foreground/background with a minimum contrast so shapes stay visible
    while True:
        fg = rng.uniform(0.0, 1.0, size=3)
        bg = rng.uniform(0.0, 1.0, size=3)
        if np.abs(fg - bg).sum() > 0.9:
            return fg, bg


def _toy_image(label, rng, size=32):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    fg, bg = _random_colors(rng)
    cy = size / 2 + rng.uniform(-5, 5)
    cx = size / 2 + rng.uniform(-5, 5)
    if label == 0:  # filled disk
        r = rng.uniform(5.5, 10.5)
        mask = ((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r
    elif label == 1:  # hollow box outline
        half = rng.uniform(6.0, 11.0)
        t = rng.uniform(1.5, 3.5)
        dy, dx = np.abs(yy - cy), np.abs(xx - cx)
        outer = (dy <= half) & (dx <= half)
        inner = (dy <= half - t) & (dx <= half - t)
        mask = outer & ~inner
    elif label == 2:  # plus sign
        arm = rng.uniform(7.0, 12.0)
        w = rng.uniform(1.5, 3.0)
        dy, dx = np.abs(yy - cy), np.abs(xx - cx)
        mask = ((dy <= w) & (dx <= arm)) | ((dx <= w) & (dy <= arm))
    elif label == 3:  # horizontal stripes
        period = rng.uniform(4.0, 8.0)
        phase = rng.uniform(0, period)
        mask = ((yy + phase) % period) < period / 2
    elif label == 4:  # checkerboard
        cell = rng.uniform(4.0, 8.0)
        py, px = rng.uniform(0, cell, size=2)
        mask = (((yy + py) // cell) + ((xx + px) // cell)) % 2 == 0
    else:
        raise DataError(f"toy label {label} out of range")
    img = np.where(mask[None, :, :], fg[:, None, None], bg[:, None, None])
    img = img + rng.normal(0.0, 0.04, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_toy_arrays(n_per_class, seed, size=32, stream="toy"):
    n_classes = len(TOY_CLASSES)
    images = np.empty((n_per_class * n_classes, 3, size, size), dtype=np.float32)
    labels = np.empty(n_per_class * n_classes, dtype=np.int64)
    for label in range(n_classes):
        rng = derive_rng(seed, f"{stream}/class{label}")
        for i in range(n_per_class):
            idx = label * n_per_class + i
            images[idx] = _toy_image(label, rng, size=size)
            labels[idx] = label
    order = derive_rng(seed, f"{stream}/shuffle").permutation(len(labels))
    return images[order], labels[order]


def generate_toy_dataset(path, n_train_per_class=1000, n_test_per_class=200, seed=0, size=32):
    """Write the procedural toy dataset to a .npz file; returns the path."""
    train_x, train_y = generate_toy_arrays(n_train_per_class, seed, size=size, stream="toy-train")
    test_x, test_y = generate_toy_arrays(n_test_per_class, seed, size=size, stream="toy-test")
    save_npz(path, train_x, train_y, test_x, test_y)
    return path


def main(argv=None):
    parser = argparse.ArgumentParser(description="Generate the procedural toy dataset (.npz).")
    parser.add_argument("--out", required=True, help="output .npz path")
    parser.add_argument("--train-per-class", type=int, default=1000)
    parser.add_argument("--test-per-class", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    generate_toy_dataset(
        args.out,
        n_train_per_class=args.train_per_class,
        n_test_per_class=args.test_per_class,
        seed=args.seed,
    )
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
