"""Synthetic datasets, client sharding and evaluation metrics.

Two task families are provided:

* classification -- class ``k`` is a stripe pattern with its own orientation
  and its own base intensity.  The classes sit near the dark end of the
  intensity range, so clamped corruptions shift their statistics in a way a
  model trained on shifted data cannot undo on clean data.
* segmentation -- bright blobs on a dark textured background; the model
  labels each pixel from its 3x3 neighbourhood.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import InvalidConfig, ShapeError
from .nn_core import ModelParams, predict

TaskKind = Literal["classification", "segmentation"]


@dataclass(frozen=True, eq=False)
class TaskDataset:
    kind: TaskKind
    images: np.ndarray  # [n, H, W] in [0, 1]
    targets: np.ndarray  # [n] class ids or [n, H, W] binary masks
    num_classes: int
    gen_seed: int

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    @property
    def input_dim(self) -> int:
        h, w = self.image_size
        return h * w if self.kind == "classification" else 9

    def subset(self, idx: np.ndarray) -> "TaskDataset":
        return TaskDataset(self.kind, self.images[idx], self.targets[idx], self.num_classes, self.gen_seed)

    def features(self, images: np.ndarray | None = None) -> np.ndarray:
        """Model inputs for ``images`` (defaults to the dataset's own)."""
        imgs = self.images if images is None else images
        if self.kind == "classification":
            return imgs.reshape(imgs.shape[0], -1)
        return pixel_neighbourhoods(imgs)

    def labels(self) -> np.ndarray:
        """Flat integer labels aligned with :meth:`features` rows."""
        if self.kind == "classification":
            return self.targets.astype(np.int64)
        return self.targets.reshape(-1).astype(np.int64)


@dataclass
class ClientShard:
    client_id: int
    indices: np.ndarray  # positions in the training split
    rehearsal: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.indices.size

    def corruptible(self) -> np.ndarray:
        """Boolean mask over ``indices``: True where the sample may be shifted."""
        return ~np.isin(self.indices, self.rehearsal)


def pixel_neighbourhoods(images: np.ndarray) -> np.ndarray:
    """Flattened zero-padded 3x3 neighbourhood of every pixel, [n*H*W, 9]."""
    n, h, w = images.shape
    padded = np.pad(images, ((0, 0), (1, 1), (1, 1)))
    cols = [padded[:, dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)]
    return np.stack(cols, axis=-1).reshape(n * h * w, 9)


def _stripe_pattern(k: int, h: int, w: int, period: int = 4) -> np.ndarray:
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    phase = k // 2
    if k % 2 == 0:
        on = ((rows + phase) % period) < period // 2
    else:
        on = ((cols + phase) % period) < period // 2
    return np.broadcast_to(on, (h, w)).astype(np.float64)


def class_levels(num_classes: int, level_step: float = 0.2) -> np.ndarray:
    step = min(level_step, 0.8 / max(num_classes - 1, 1))
    return step * np.arange(num_classes)


def gen_classification(
    n: int,
    H: int = 16,
    W: int = 16,
    K: int = 2,
    noise_sigma: float = 0.05,
    seed: int = 0,
    *,
    stripe_amp: float = 0.065,
    level_step: float = 0.2,
    jitter: float = 0.1,
) -> TaskDataset:
    """Balanced stripe-classification dataset.

    Class ``k`` has base intensity ``k * level_step`` plus period-4 stripes of
    amplitude ``stripe_amp`` (even classes horizontal, odd classes vertical).
    Each sample gets i.i.d. pixel noise and a uniform brightness jitter in
    ``[-jitter, jitter]`` before clamping to [0, 1].
    """
    if K < 2 or n <= 0 or n % K:
        raise InvalidConfig(f"n={n} must be a positive multiple of K={K} (K >= 2)")
    if H < 8 or W < 8:
        raise InvalidConfig(f"image size must be at least 8x8, got {H}x{W}")
    if noise_sigma < 0:
        raise InvalidConfig("noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(K), n // K)
    rng.shuffle(labels)
    levels = class_levels(K, level_step)
    templates = np.stack([levels[k] + stripe_amp * _stripe_pattern(k, H, W) for k in range(K)])
    images = templates[labels]
    images = images + rng.normal(0.0, noise_sigma, size=images.shape)
    images = images + rng.uniform(-jitter, jitter, size=(n, 1, 1))
    return TaskDataset("classification", np.clip(images, 0.0, 1.0), labels, K, seed)


def gen_segmentation(n: int, H: int = 16, W: int = 16, seed: int = 0) -> TaskDataset:
    """Images with 1-3 bright elliptical blobs; the mask is the blob support."""
    if H < 8 or W < 8:
        raise InvalidConfig(f"image size must be at least 8x8, got {H}x{W}")
    if n <= 0:
        raise InvalidConfig("n must be positive")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    images = np.empty((n, H, W))
    masks = np.zeros((n, H, W), dtype=np.int64)
    r_max = max(2.0, min(H, W) / 5)
    for i in range(n):
        # background: dark level, smooth gradient and fine texture
        gx, gy = rng.uniform(-0.05, 0.05, size=2)
        bg = 0.15 + gx * (xx / W - 0.5) + gy * (yy / H - 0.5)
        bg = bg + rng.normal(0.0, 0.04, size=(H, W))
        blob = np.zeros((H, W), dtype=bool)
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(0, H), rng.uniform(0, W)
            ry, rx = rng.uniform(1.5, r_max, size=2)
            blob |= ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        fg = rng.uniform(0.6, 0.85) + rng.normal(0.0, 0.04, size=(H, W))
        images[i] = np.where(blob, fg, bg)
        masks[i] = blob
    return TaskDataset("segmentation", np.clip(images, 0.0, 1.0), masks, 2, seed)


def train_test_split(ds: TaskDataset, test_fraction: float = 0.2) -> tuple[TaskDataset, TaskDataset]:
    """Hold out the trailing ``test_fraction`` of samples (generation order is already random)."""
    if not 0.0 < test_fraction < 1.0:
        raise InvalidConfig("test_fraction must be in (0, 1)")
    n_test = int(round(len(ds) * test_fraction))
    cut = len(ds) - n_test
    idx = np.arange(len(ds))
    return ds.subset(idx[:cut]), ds.subset(idx[cut:])


def half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def shard_clients(ds: TaskDataset, c: int, seed: int) -> list[ClientShard]:
    """Seeded shuffle then contiguous split; earlier clients absorb the remainder."""
    n = len(ds)
    if c < 1 or c > n:
        raise InvalidConfig(f"cannot split {n} samples across {c} clients")
    perm = np.random.default_rng(seed).permutation(n)
    base, extra = divmod(n, c)
    shards, start = [], 0
    for cid in range(c):
        size = base + (1 if cid < extra else 0)
        shards.append(ClientShard(cid, np.sort(perm[start:start + size])))
        start += size
    return shards


def assign_rehearsal(shards: list[ClientShard], fraction: float, seed: int) -> list[ClientShard]:
    """Return copies of ``shards`` with ``half_up(fraction * |shard|)`` clean-buffer samples each."""
    if not 0.0 <= fraction < 1.0:
        raise InvalidConfig(f"rehearsal_fraction must be in [0, 1), got {fraction}")
    out = []
    for shard in shards:
        size = half_up(fraction * len(shard))
        rng = np.random.default_rng([seed, shard.client_id])
        buf = np.sort(rng.choice(shard.indices, size=size, replace=False)) if size else shard.rehearsal[:0]
        out.append(ClientShard(shard.client_id, shard.indices, buf.astype(np.int64)))
    return out


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise ShapeError(f"prediction/label shapes differ or are empty: {predictions.shape} vs {labels.shape}")
    return float(np.mean(predictions == labels))


def dice(pred_mask, true_mask) -> float:
    """2|A n B| / (|A| + |B|); two empty masks agree perfectly (1.0)."""
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(true_mask).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def evaluate_model(params: ModelParams, ds: TaskDataset, images: np.ndarray | None = None) -> float:
    """Accuracy (classification) or pooled dice over all pixels (segmentation).

    ``images`` replaces the dataset's inputs (e.g. a corrupted copy) while the
    targets stay the clean ones.
    """
    pred = predict(params, ds.features(images))
    if ds.kind == "classification":
        return accuracy(pred, ds.targets)
    return dice(pred, ds.targets.reshape(-1))


def dump_csv(ds: TaskDataset, path: str | Path) -> None:
    """Debug dump: one header row with kind/H/W/K/seed, then pixels + target per sample."""
    h, w = ds.image_size
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow([ds.kind, h, w, ds.num_classes, ds.gen_seed])
        for img, tgt in zip(ds.images, ds.targets):
            tail = [int(tgt)] if ds.kind == "classification" else [int(v) for v in tgt.ravel()]
            wr.writerow([format(v, ".17g") for v in img.ravel()] + tail)


def load_csv(path: str | Path) -> TaskDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    kind, h, w, k, seed = rows[0][0], *map(int, rows[0][1:])
    npx = h * w
    images = np.array([[float(v) for v in r[:npx]] for r in rows[1:]]).reshape(-1, h, w)
    if kind == "classification":
        targets = np.array([int(r[npx]) for r in rows[1:]], dtype=np.int64)
    else:
        targets = np.array([[int(v) for v in r[npx:]] for r in rows[1:]], dtype=np.int64).reshape(-1, h, w)
    return TaskDataset(kind, images, targets, k, seed)  # type: ignore[arg-type]
