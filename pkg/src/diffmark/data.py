"""Synthetic training images, PNG round-trip, and folder ingestion.

Images are 32x32 RGB in [-1, 1]: a smoothed random color field with one of
ten geometric shape classes drawn on top. Labels cycle 0..9 so the class
histogram is exactly uniform. Generation is deterministic per seed.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

NUM_CLASSES = 10


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(-0.6, 0.6, (3, 4, 4)).astype(np.float32)
    t = torch.from_numpy(coarse).unsqueeze(0)
    up = torch.nn.functional.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return up[0].numpy()


def _draw_shape(img: np.ndarray, label: int, rng: np.random.Generator) -> None:
    size = img.shape[-1]
    yy, xx = np.mgrid[0:size, 0:size]
    cy = rng.integers(size // 4, 3 * size // 4)
    cx = rng.integers(size // 4, 3 * size // 4)
    radius = rng.integers(size // 6, size // 3)
    color = rng.uniform(-1.0, 1.0, 3).astype(np.float32)

    if label == 0:  # filled circle
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    elif label == 1:  # square
        mask = (np.abs(yy - cy) <= radius) & (np.abs(xx - cx) <= radius)
    elif label == 2:  # triangle
        mask = (yy >= cy - radius) & (yy <= cy + radius) & (
            np.abs(xx - cx) <= (yy - (cy - radius)) / 2
        )
    elif label == 3:  # cross
        arm = max(radius // 3, 1)
        mask = (np.abs(yy - cy) <= arm) | (np.abs(xx - cx) <= arm)
        mask &= (np.abs(yy - cy) <= radius) & (np.abs(xx - cx) <= radius)
    elif label == 4:  # ring
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        mask = (d2 <= radius**2) & (d2 >= (radius // 2) ** 2)
    elif label == 5:  # horizontal stripes
        period = int(rng.integers(3, 6))
        mask = (yy // period) % 2 == 0
    elif label == 6:  # vertical stripes
        period = int(rng.integers(3, 6))
        mask = (xx // period) % 2 == 0
    elif label == 7:  # diagonal bands
        period = int(rng.integers(4, 8))
        mask = ((yy + xx) // period) % 2 == 0
    elif label == 8:  # checkerboard
        period = int(rng.integers(3, 6))
        mask = ((yy // period) + (xx // period)) % 2 == 0
    else:  # dot grid
        period = int(rng.integers(5, 9))
        mask = ((yy % period) <= 1) & ((xx % period) <= 1)

    blend = rng.uniform(0.6, 0.95)
    for c in range(3):
        img[c][mask] = (1 - blend) * img[c][mask] + blend * color[c]


def generate_images(n: int, seed: int, size: int = 32) -> tuple[torch.Tensor, torch.Tensor]:
    """n synthetic images and their labels (labels cycle 0..9, exactly uniform)."""
    rng = np.random.default_rng(seed)
    images = np.empty((n, 3, size, size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        label = i % NUM_CLASSES
        img = _background(rng, size)
        _draw_shape(img, label, rng)
        images[i] = np.clip(img, -1.0, 1.0)
        labels[i] = label
    return torch.from_numpy(images), torch.from_numpy(labels)


def tensor_to_png_array(img: torch.Tensor) -> np.ndarray:
    arr = ((img.clamp(-1, 1) + 1.0) * 0.5 * 255.0).round().to(torch.uint8)
    return arr.permute(1, 2, 0).numpy()


def png_array_to_tensor(arr: np.ndarray) -> torch.Tensor:
    t = torch.from_numpy(np.asarray(arr, dtype=np.float32) / 255.0)
    return t.permute(2, 0, 1) * 2.0 - 1.0


def save_png(path, img: torch.Tensor) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(tensor_to_png_array(img), mode="RGB").save(path)


def load_png(path) -> torch.Tensor:
    return png_array_to_tensor(np.asarray(Image.open(path).convert("RGB")))


def save_image_folder(directory, images: torch.Tensor, labels: torch.Tensor, seed: int) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (img, label) in enumerate(zip(images, labels)):
        name = f"img_{i:05d}.png"
        save_png(directory / name, img)
        rows.append((name, int(label)))
    with open(directory / "labels.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["filename", "label"])
        w.writerows(rows)
    with open(directory / "manifest.json", "w") as f:
        json.dump(
            {"count": len(rows), "seed": seed, "size": list(images.shape[1:])},
            f,
            indent=1,
            sort_keys=True,
        )


def load_image_folder(directory) -> tuple[torch.Tensor, torch.Tensor]:
    """Read back a dataset folder; labels.csv if present, else cycling labels."""
    directory = Path(directory)
    labels_file = directory / "labels.csv"
    if labels_file.exists():
        with open(labels_file) as f:
            entries = [(row["filename"], int(row["label"])) for row in csv.DictReader(f)]
    else:
        entries = [
            (p.name, i % NUM_CLASSES)
            for i, p in enumerate(sorted(directory.glob("*.png")))
        ]
    if not entries:
        return torch.zeros((0, 3, 32, 32)), torch.zeros((0,), dtype=torch.long)
    images = torch.stack([load_png(directory / name) for name, _ in entries])
    labels = torch.tensor([label for _, label in entries], dtype=torch.long)
    return images, labels


def generate_dataset(n: int, seed: int, out_dir) -> tuple[torch.Tensor, torch.Tensor]:
    """Generate and persist a dataset folder; returns the tensors as well."""
    images, labels = generate_images(n, seed)
    save_image_folder(out_dir, images, labels, seed)
    return images, labels
