"""Controllable interventions: batch plans and seeded augmentation kernels.

An instrument bundles a mini-batch index set, an augmentation kernel, a
micro-step count, and optional optimizer overrides.  Batch plans control
the overlap between the first and second instrument's batches exactly and
can match class histograms.  Augmentations are deterministic maps given
(kind, seed, params, input), so a branch pair that shares a kernel sees
bit-identical batches.

Vector-mode augmentations (desk-scale analogs of the image transforms,
ordered none < weak < color/blur in perturbation strength):

* weak:  circular shift of the feature axis by one position plus additive
         Gaussian noise at 5% of the batch's feature standard deviation
* color: weak, then per-feature multiplicative jitter in [0.6, 1.4] and,
         per example with probability 0.2, projection onto the example mean
* blur:  weak, then window-3 moving-average smoothing with a mixing weight
         drawn from the kernel's strength range

When the kernel's params carry ``image_shape`` (or the inputs are already
N x H x W), the image forms are used instead: weak = reflect-pad-4 random
crop + horizontal flip, color adds brightness/contrast jitter, blur adds a
3-tap Gaussian.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset

AUG_KINDS = ("none", "weak", "color", "blur")


@dataclass
class AugmentationKernel:
    kind: str
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in AUG_KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")


@dataclass
class BatchPlan:
    indices_a: np.ndarray
    indices_b: np.ndarray
    overlap: float
    same_classes: bool
    shortfall: int = 0


@dataclass
class Instrument:
    batch_indices: np.ndarray
    aug: AugmentationKernel
    k: int
    optimizer_overrides: tuple[float, float] | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")


def sample_batch_plan(
    dataset: Dataset,
    batch_size: int,
    overlap: float,
    same_classes: bool,
    seed: int,
) -> BatchPlan:
    """Draw the first batch and a second batch with exact prescribed overlap.

    The intersection size is exactly floor(overlap * batch_size).  With
    ``same_classes`` the second batch reproduces the first batch's class
    histogram as far as the remaining pool allows; any shortfall is filled
    from other classes and recorded on the plan.
    """
    if not 0.0 <= overlap <= 1.0:
        raise ValueError("overlap must lie in [0, 1]")
    train = dataset.train_indices
    n_shared = math.floor(overlap * batch_size)
    needed = 2 * batch_size - n_shared
    if len(train) < needed:
        raise ValueError(
            f"dataset has {len(train)} train examples, need {needed} "
            f"for batch_size={batch_size}, overlap={overlap}"
        )
    rng = np.random.default_rng(seed)
    idx_a = rng.choice(train, size=batch_size, replace=False)
    shared = rng.choice(idx_a, size=n_shared, replace=False) if n_shared else np.array([], dtype=idx_a.dtype)
    pool = np.setdiff1d(train, idx_a)
    n_rest = batch_size - n_shared
    shortfall = 0

    if n_rest == 0:
        rest = np.array([], dtype=idx_a.dtype)
    elif same_classes:
        labels = dataset.labels
        want = np.bincount(labels[idx_a], minlength=dataset.num_classes) - np.bincount(
            labels[shared], minlength=dataset.num_classes
        )
        picked = []
        for c in np.flatnonzero(want > 0):
            available = pool[labels[pool] == c]
            take = min(int(want[c]), len(available))
            shortfall += int(want[c]) - take
            if take:
                picked.append(rng.choice(available, size=take, replace=False))
        rest = np.concatenate(picked) if picked else np.array([], dtype=idx_a.dtype)
        if shortfall:
            leftovers = np.setdiff1d(pool, rest)
            rest = np.concatenate([rest, rng.choice(leftovers, size=shortfall, replace=False)])
    else:
        rest = rng.choice(pool, size=n_rest, replace=False)

    idx_b = np.concatenate([shared, rest])
    return BatchPlan(
        indices_a=np.sort(idx_a),
        indices_b=np.sort(idx_b),
        overlap=overlap,
        same_classes=same_classes,
        shortfall=shortfall,
    )


def make_pair_A_Aprime(
    plan: BatchPlan,
    aug_a: AugmentationKernel,
    aug_aprime: AugmentationKernel,
    k: int,
    overrides: tuple[float, float] | None = None,
) -> tuple[Instrument, Instrument]:
    """Two first-step instruments identical except for the augmentation kernel.

    Both read the plan's first batch; passing equal kernels produces the
    placebo pair whose branches coincide exactly.
    """
    a = Instrument(plan.indices_a, aug_a, k, overrides)
    a_prime = Instrument(plan.indices_a, aug_aprime, k, overrides)
    return a, a_prime


# ---------------------------------------------------------------------------
# Augmentation kernels.


def _moving_average3(x: np.ndarray) -> np.ndarray:
    padded = np.pad(x, ((0, 0), (1, 1)), mode="edge")
    return (padded[:, :-2] + padded[:, 1:-1] + padded[:, 2:]) / 3.0


def _weak_vec(rng: np.random.Generator, x: np.ndarray) -> np.ndarray:
    shift = 1 if rng.integers(0, 2) else -1
    out = np.roll(x, shift, axis=1)
    scale = 0.05 * float(x.std())
    return out + scale * rng.normal(size=out.shape)


def _color_vec(rng: np.random.Generator, x: np.ndarray) -> np.ndarray:
    out = _weak_vec(rng, x)
    jitter = rng.uniform(0.6, 1.4, size=out.shape[1])
    out = out * jitter
    gray = rng.random(out.shape[0]) < 0.2
    if gray.any():
        out[gray] = out[gray].mean(axis=1, keepdims=True)
    return out


def _blur_vec(rng: np.random.Generator, x: np.ndarray) -> np.ndarray:
    out = _weak_vec(rng, x)
    sigma = rng.uniform(0.1, 2.0)
    weight = min(1.0, sigma / 2.0)
    return (1.0 - weight) * out + weight * _moving_average3(out)


def _random_crops(rng: np.random.Generator, images: np.ndarray, pad: int = 4) -> np.ndarray:
    n, h, w = images.shape
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    out = np.empty_like(images)
    for i in range(n):
        r, c = offsets[i]
        out[i] = padded[i, r : r + h, c : c + w]
    return out


def _weak_img(rng: np.random.Generator, images: np.ndarray) -> np.ndarray:
    out = _random_crops(rng, images)
    flip = rng.random(out.shape[0]) < 0.5
    out[flip] = out[flip, :, ::-1]
    return out


def _color_img(rng: np.random.Generator, images: np.ndarray) -> np.ndarray:
    out = _weak_img(rng, images)
    n = out.shape[0]
    brightness = rng.uniform(0.6, 1.4, size=(n, 1, 1))
    contrast = rng.uniform(0.6, 1.4, size=(n, 1, 1))
    means = out.mean(axis=(1, 2), keepdims=True)
    return (out * brightness - means) * contrast + means


def _blur_img(rng: np.random.Generator, images: np.ndarray) -> np.ndarray:
    out = _weak_img(rng, images)
    sigma = rng.uniform(0.1, 2.0, size=out.shape[0])
    side = np.exp(-0.5 / (sigma * sigma))
    for i in range(out.shape[0]):
        tap = np.array([side[i], 1.0, side[i]])
        tap /= tap.sum()
        rows = np.pad(out[i], ((1, 1), (0, 0)), mode="edge")
        blurred = tap[0] * rows[:-2] + tap[1] * rows[1:-1] + tap[2] * rows[2:]
        cols = np.pad(blurred, ((0, 0), (1, 1)), mode="edge")
        out[i] = tap[0] * cols[:, :-2] + tap[1] * cols[:, 1:-1] + tap[2] * cols[:, 2:]
    return out


_VECTOR_FORMS = {"weak": _weak_vec, "color": _color_vec, "blur": _blur_vec}
_IMAGE_FORMS = {"weak": _weak_img, "color": _color_img, "blur": _blur_img}


def apply_augmentation(aug: AugmentationKernel, inputs) -> np.ndarray:
    """Apply the kernel; same (kernel, inputs) always yields the same output."""
    x = np.asarray(inputs, dtype=np.float64)
    if aug.kind == "none":
        return x.copy()
    rng = np.random.default_rng(aug.seed)

    image_shape = aug.params.get("image_shape")
    if x.ndim == 3:
        return _IMAGE_FORMS[aug.kind](rng, x.copy())
    if x.ndim != 2:
        raise ValueError("inputs must be N x d feature vectors or N x H x W grids")
    if image_shape is not None:
        h, w = image_shape
        if x.shape[1] != h * w:
            raise ValueError(f"flat width {x.shape[1]} does not match image_shape {image_shape}")
        out = _IMAGE_FORMS[aug.kind](rng, x.reshape(-1, h, w).copy())
        return out.reshape(x.shape)
    return _VECTOR_FORMS[aug.kind](rng, x)
