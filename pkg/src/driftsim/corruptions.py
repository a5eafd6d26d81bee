"""Severity-controlled image corruptions and transform calibration.

Five kinds stand in for the usual noise / blur / photometric / overlay
families.  Discrete levels 0-5 follow fixed parameter tables (level 0 is the
identity); a continuous ``coverage`` in [0, 1] interpolates the same tables
(and is literally the occluded area fraction for ``occlusion_overlay``).

Every corrupted sample draws its randomness from ``default_rng([salt, index])``
so corrupting a dataset is order independent.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import CalibrationInfeasible, InvalidConfig, InvalidInput
from .nn_core import ModelParams
from .tasks import TaskDataset, evaluate_model

KINDS = ("gaussian_noise", "brightness", "contrast", "box_blur", "occlusion_overlay")
MAX_LEVEL = 5

NOISE_SIGMA = (0.0, 0.05, 0.10, 0.18, 0.26, 0.38)
BRIGHTNESS_SHIFT = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
CONTRAST_SCALE = (1.0, 0.75, 0.6, 0.45, 0.3, 0.2)
BLUR_KERNEL = (1, 3, 3, 5, 5, 7)
BLUR_PASSES = (1, 1, 2, 2, 3, 3)

DEFAULT_TABLES = {
    "gaussian_noise": NOISE_SIGMA,
    "brightness": BRIGHTNESS_SHIFT,
    "contrast": CONTRAST_SCALE,
    "occlusion_overlay": tuple(lvl / MAX_LEVEL for lvl in range(MAX_LEVEL + 1)),
}


@dataclass(frozen=True)
class CorruptionSpec:
    """One corruption kind at a discrete ``level`` or a continuous ``coverage``.

    ``table`` optionally replaces the per-level parameter table of the
    noise/brightness/contrast/occlusion kinds (six values, level 0 first).
    """

    kind: str
    level: int | None = None
    coverage: float | None = None
    opacity: float = 1.0
    salt: int = 0
    table: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidConfig(f"unknown corruption kind {self.kind!r}; expected one of {KINDS}")
        if (self.level is None) == (self.coverage is None):
            raise InvalidConfig("exactly one of level / coverage must be set")
        if self.level is not None and not 0 <= self.level <= MAX_LEVEL:
            raise InvalidConfig(f"level must be in [0, {MAX_LEVEL}], got {self.level}")
        if self.coverage is not None and not 0.0 <= self.coverage <= 1.0:
            raise InvalidConfig(f"coverage must be in [0, 1], got {self.coverage}")
        if not 0.0 <= self.opacity <= 1.0:
            raise InvalidConfig(f"opacity must be in [0, 1], got {self.opacity}")
        if self.table is not None and len(self.table) != MAX_LEVEL + 1:
            raise InvalidConfig(f"severity table needs {MAX_LEVEL + 1} entries")

    @property
    def is_identity(self) -> bool:
        return self.position == 0.0

    @property
    def position(self) -> float:
        """Severity on the continuous 0..5 level scale."""
        return float(self.level) if self.level is not None else self.coverage * MAX_LEVEL

    def with_kind(self, kind: str) -> "CorruptionSpec":
        return CorruptionSpec(kind, self.level, self.coverage, self.opacity, self.salt, self.table)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["table"] = list(self.table) if self.table is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorruptionSpec":
        table = d.get("table")
        return cls(
            kind=d["kind"],
            level=d.get("level"),
            coverage=d.get("coverage"),
            opacity=d.get("opacity", 1.0),
            salt=d.get("salt", 0),
            table=tuple(table) if table is not None else None,
        )


def severity_param(spec: CorruptionSpec) -> float:
    """Kind parameter at the spec's severity (linear between table levels)."""
    table = spec.table or DEFAULT_TABLES[spec.kind]
    return float(np.interp(spec.position, np.arange(MAX_LEVEL + 1), table))


def _box_blur(image: np.ndarray, position: float) -> np.ndarray:
    # blur has no continuous knob: round to the nearest level
    lvl = int(np.floor(position + 0.5))
    out = image
    for _ in range(BLUR_PASSES[lvl]):
        out = uniform_filter(out, size=BLUR_KERNEL[lvl], mode="nearest")
    return out


def _occlude(image: np.ndarray, area: float, opacity: float, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape
    target = area * h * w
    aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
    rh = int(np.clip(np.floor(np.sqrt(target * aspect) + 0.5), 1, h))
    rw = int(np.clip(np.floor(target / rh + 0.5), 1, w))
    if rw == w:
        rh = int(np.clip(np.floor(target / w + 0.5), 1, h))
    oy = int(np.floor(rng.uniform() * (h - rh + 1)))
    ox = int(np.floor(rng.uniform() * (w - rw + 1)))
    out = image.copy()
    # dark occluder blended at the given opacity
    out[oy:oy + rh, ox:ox + rw] *= 1.0 - opacity
    return out


def apply_corruption(image: np.ndarray, spec: CorruptionSpec, sample_seed) -> np.ndarray:
    """Corrupt one [H, W] image; the result is clamped to [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise InvalidInput(f"expected a 2-D image, got shape {image.shape}")
    if image.size and (image.min() < 0.0 or image.max() > 1.0 or not np.all(np.isfinite(image))):
        raise InvalidInput("image pixels must lie in [0, 1]")
    if spec.is_identity:
        return image.copy()
    rng = np.random.default_rng(sample_seed)
    param = severity_param(spec) if spec.kind != "box_blur" else 0.0
    if spec.kind == "gaussian_noise":
        out = image + rng.normal(0.0, param, size=image.shape)
    elif spec.kind == "brightness":
        out = image + param
    elif spec.kind == "contrast":
        out = 0.5 + param * (image - 0.5)
    elif spec.kind == "box_blur":
        out = _box_blur(image, spec.position)
    else:
        if param == 0.0:
            return image.copy()
        out = _occlude(image, param, spec.opacity, rng)
    return np.clip(out, 0.0, 1.0)


def sample_seed(salt: int, index: int) -> list[int]:
    return [int(salt), int(index)]


def pick_kind(kinds: Sequence[str], salt: int, index: int) -> str:
    """Per-sample kind for multi-kind mixes, drawn from its own stream."""
    if len(kinds) == 1:
        return kinds[0]
    rng = np.random.default_rng([int(salt), int(index), 0x6B696E64])
    return kinds[int(rng.integers(len(kinds)))]


def client_kind(kinds: Sequence[str], salt: int, client_id: int) -> str:
    """Fixed kind for a whole client (``per_client_kind`` mode)."""
    if len(kinds) == 1:
        return kinds[0]
    rng = np.random.default_rng([int(salt), int(client_id), 0x636C6E74])
    return kinds[int(rng.integers(len(kinds)))]


def corrupt_images(
    images: np.ndarray,
    spec: CorruptionSpec,
    indices: Sequence[int] | None = None,
    kinds: Sequence[str] | None = None,
) -> np.ndarray:
    """Corrupt a stack of images; sample ``i`` is seeded by ``(spec.salt, indices[i])``.

    With several ``kinds`` each sample picks one of them uniformly.
    """
    if indices is None:
        indices = range(images.shape[0])
    kinds = tuple(kinds) if kinds else (spec.kind,)
    out = np.empty_like(images, dtype=np.float64)
    for j, (img, idx) in enumerate(zip(images, indices)):
        kind = pick_kind(kinds, spec.salt, idx)
        s = spec if kind == spec.kind else spec.with_kind(kind)
        out[j] = apply_corruption(img, s, sample_seed(spec.salt, idx))
    return out


def relative_drop(baseline: float, value: float) -> float:
    return (baseline - value) / baseline


def calibrate_transform(
    model: ModelParams,
    test: TaskDataset,
    kind: str,
    target_rel_drop: float,
    tol: float,
    *,
    opacity: float = 1.0,
    salt: int = 0,
    max_iter: int = 30,
) -> tuple[CorruptionSpec, float]:
    """Binary-search the continuous severity knob for a target relative drop.

    The drop is measured by evaluating ``model`` on ``test`` corrupted at the
    candidate severity, relative to its clean score.  Returns the spec and
    its measured drop.
    """

    def evaluate(spec: CorruptionSpec | None) -> float:
        if spec is None:
            return evaluate_model(model, test)
        return evaluate_model(model, test, corrupt_images(test.images, spec))

    return search_severity(evaluate, kind, target_rel_drop, tol, opacity=opacity, salt=salt, max_iter=max_iter)


def search_severity(
    evaluate: Callable[[CorruptionSpec | None], float],
    kind: str,
    target_rel_drop: float,
    tol: float,
    *,
    opacity: float = 1.0,
    salt: int = 0,
    max_iter: int = 30,
) -> tuple[CorruptionSpec, float]:
    """Bisection core of :func:`calibrate_transform` over any ``evaluate(spec)``."""
    if not 0.0 <= target_rel_drop < 1.0:
        raise InvalidConfig("target_rel_drop must be in [0, 1)")
    if kind == "box_blur":
        raise InvalidConfig("box_blur has no continuous severity knob")
    make = lambda cov: CorruptionSpec(kind, coverage=cov, opacity=opacity, salt=salt)  # noqa: E731
    if target_rel_drop == 0.0:
        return make(0.0), 0.0

    clean = evaluate(None)
    drop_at = lambda cov: relative_drop(clean, evaluate(make(cov)))  # noqa: E731
    max_drop = drop_at(1.0)
    if max_drop < target_rel_drop - tol:
        raise CalibrationInfeasible(
            f"{kind}: full severity only reaches a relative drop of {max_drop:.4f} "
            f"(target {target_rel_drop} +/- {tol})",
            max_drop,
        )
    if abs(max_drop - target_rel_drop) <= tol:
        return make(1.0), max_drop
    lo, hi = 0.0, 1.0
    best = (float("inf"), 1.0, max_drop)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        drop = drop_at(mid)
        best = min(best, (abs(drop - target_rel_drop), mid, drop))
        if abs(drop - target_rel_drop) <= tol:
            return make(mid), drop
        if drop < target_rel_drop:
            lo = mid
        else:
            hi = mid
    raise CalibrationInfeasible(
        f"{kind}: no severity within tolerance after {max_iter} steps "
        f"(closest drop {best[2]:.4f} at coverage {best[1]:.4f})",
        max_drop,
    )
