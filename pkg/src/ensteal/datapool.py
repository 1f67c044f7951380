"""Datasets, the unlabeled attack pool, and input augmentation.

A Dataset is a float64 feature matrix with optional integer labels and an
optional image layout (height, width, channels) describing how each flat row
folds into a picture. PoolState tracks, per pool row, whether it is still
unlabeled, was sent to the oracle, was pseudo-labeled locally, or is held out
for validation; the oracle's answers live here too, so downstream stages
never touch ground truth by accident.

Augmentations are small declarative configs applied through an explicit
numpy Generator, which keeps every perturbation replayable. Synthetic
sources (a separable Gaussian mixture and noisy low-res digit glyphs) cover
desk-scale experiments without external data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import InvalidConfigError, InvalidInputError
from .seeding import mask64

DATASET_MAGIC = b"AOTD"
DATASET_VERSION = 1

UNLABELED = 0
QUERIED = 1
PSEUDO = 2
VALIDATION = 3


# ── datasets ─────────────────────────────────────────────────────────


@dataclass(frozen=True)
class ImageLayout:
    height: int
    width: int
    channels: int = 1

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise InvalidConfigError(f"image layout must be positive, got {self}")

    @property
    def flat_dim(self) -> int:
        return self.height * self.width * self.channels


class Dataset:
    """Feature matrix (n, d) float64, optional int64 labels, optional layout."""

    __slots__ = ("features", "labels", "layout")

    def __init__(self, features, labels=None, layout: Optional[ImageLayout] = None):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2:
            raise InvalidInputError(f"features must be 2-d, got shape {features.shape}")
        if not np.all(np.isfinite(features)):
            raise InvalidInputError("features contain non-finite values")
        if layout is not None and layout.flat_dim != features.shape[1]:
            raise InvalidInputError(
                f"layout {layout} implies {layout.flat_dim} features per row, "
                f"matrix has {features.shape[1]}"
            )
        if labels is not None:
            labels = np.asarray(labels)
            if labels.shape != (features.shape[0],):
                raise InvalidInputError(
                    f"labels shape {labels.shape} does not match {features.shape[0]} rows"
                )
            if not np.issubdtype(labels.dtype, np.integer):
                if not np.all(labels == np.floor(labels)):
                    raise InvalidInputError("labels must be integers")
            labels = labels.astype(np.int64)
            if labels.size and labels.min() < 0:
                raise InvalidInputError("labels must be nonnegative")
        self.features = features
        self.labels = labels
        self.layout = layout

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[indices]
        return Dataset(self.features[indices], labels, self.layout)


# ── pool bookkeeping ─────────────────────────────────────────────────


class PoolState:
    """Per-row status over an unlabeled pool plus the labels acquired so far.

    Rows move UNLABELED -> QUERIED (oracle answered), QUERIED -> VALIDATION
    (held out, never trained on), or UNLABELED -> PSEUDO (locally guessed).
    Transitions validate fully before mutating, so a rejected call leaves
    the state untouched.
    """

    def __init__(self, pool: Dataset):
        if pool.labels is not None:
            raise InvalidInputError("attack pool must be unlabeled")
        self.pool = pool
        self.status = np.zeros(pool.n, dtype=np.int8)
        self.queried_labels: dict[int, int] = {}
        self.pseudo_labels: dict[int, int] = {}
        self.validation_labels: dict[int, int] = {}

    # -- helpers

    def _check_indices(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size == 0:
            raise InvalidInputError("expected a nonempty 1-d index array")
        if np.unique(idx).size != idx.size:
            raise InvalidInputError("indices contain duplicates")
        if idx.min() < 0 or idx.max() >= self.pool.n:
            raise InvalidInputError(f"indices out of range [0, {self.pool.n})")
        return idx

    # -- transitions

    def mark_queried(self, indices, labels) -> None:
        idx = self._check_indices(indices)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != idx.shape:
            raise InvalidInputError("one label per index required")
        if np.any(self.status[idx] != UNLABELED):
            raise InvalidInputError("can only query rows that are still unlabeled")
        self.status[idx] = QUERIED
        for i, lab in zip(idx.tolist(), labels.tolist()):
            self.queried_labels[i] = lab

    def convert_queried_to_validation(self, indices) -> None:
        idx = self._check_indices(indices)
        if np.any(self.status[idx] != QUERIED):
            raise InvalidInputError("validation rows must already hold an oracle label")
        self.status[idx] = VALIDATION
        for i in idx.tolist():
            self.validation_labels[i] = self.queried_labels.pop(i)

    def mark_pseudo(self, indices, labels) -> None:
        idx = self._check_indices(indices)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != idx.shape:
            raise InvalidInputError("one label per index required")
        if np.any(self.status[idx] != UNLABELED):
            raise InvalidInputError("pseudo-labels only apply to unlabeled rows")
        self.status[idx] = PSEUDO
        for i, lab in zip(idx.tolist(), labels.tolist()):
            self.pseudo_labels[i] = lab

    def clear_pseudo(self) -> None:
        idx = np.flatnonzero(self.status == PSEUDO)
        self.status[idx] = UNLABELED
        self.pseudo_labels.clear()

    # -- views

    def indices_with_status(self, status: int) -> np.ndarray:
        return np.flatnonzero(self.status == status).astype(np.int64)

    def unlabeled_indices(self) -> np.ndarray:
        return self.indices_with_status(UNLABELED)

    def queried_indices(self) -> np.ndarray:
        return self.indices_with_status(QUERIED)

    def _gather(self, table: dict[int, int], status: int):
        idx = self.indices_with_status(status)
        y = np.array([table[i] for i in idx.tolist()], dtype=np.int64)
        return self.pool.features[idx], y, idx

    def labeled_data(self):
        """(X, y, indices) of oracle-labeled training rows, ascending index."""
        return self._gather(self.queried_labels, QUERIED)

    def pseudo_data(self):
        return self._gather(self.pseudo_labels, PSEUDO)

    def validation_data(self):
        return self._gather(self.validation_labels, VALIDATION)

    def counts(self) -> dict[str, int]:
        return {
            "unlabeled": int(np.sum(self.status == UNLABELED)),
            "queried": int(np.sum(self.status == QUERIED)),
            "pseudo": int(np.sum(self.status == PSEUDO)),
            "validation": int(np.sum(self.status == VALIDATION)),
        }


# ── augmentation ─────────────────────────────────────────────────────


@dataclass(frozen=True)
class HorizontalFlip:
    """Mirror each image row-wise with probability p. Image data only."""

    p: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise InvalidConfigError("flip probability must lie in [0, 1]")


@dataclass(frozen=True)
class GaussianJitter:
    """Add iid Gaussian noise with the given standard deviation."""

    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise InvalidConfigError("jitter sigma must be nonnegative")


@dataclass(frozen=True)
class RandLite:
    """Compose n_ops randomly chosen structural edits (column shift, noise,
    square cutout filled with the dataset mean), each scaled by magnitude.
    Image data only."""

    n_ops: int = 2
    magnitude: float = 0.3
    dataset_mean: float = 0.0

    def __post_init__(self):
        if self.n_ops < 1:
            raise InvalidConfigError("n_ops must be positive")
        if not 0.0 <= self.magnitude <= 1.0:
            raise InvalidConfigError("magnitude must lie in [0, 1]")


@dataclass(frozen=True)
class JitterDrop:
    """Gaussian noise followed by zeroing a random fraction of coordinates."""

    sigma: float
    drop_frac: float = 0.1

    def __post_init__(self):
        if self.sigma < 0:
            raise InvalidConfigError("jitter sigma must be nonnegative")
        if not 0.0 <= self.drop_frac <= 1.0:
            raise InvalidConfigError("drop fraction must lie in [0, 1]")


Transform = Union[HorizontalFlip, GaussianJitter, RandLite, JitterDrop]


@dataclass(frozen=True)
class AugmentConfig:
    """A weak and a strong perturbation sharing one seed namespace."""

    weak: Transform
    strong: Transform
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rng_seed", mask64(self.rng_seed))
        w_sigma = getattr(self.weak, "sigma", None)
        s_sigma = getattr(self.strong, "sigma", None)
        if w_sigma is not None and s_sigma is not None and not w_sigma < s_sigma:
            raise InvalidConfigError(
                f"weak jitter sigma {w_sigma} must be below strong sigma {s_sigma}"
            )


def _fold(x: np.ndarray, layout: ImageLayout) -> np.ndarray:
    return x.reshape(layout.height, layout.width, layout.channels)


def apply_transform(x, op: Transform, layout: Optional[ImageLayout], rng: np.random.Generator) -> np.ndarray:
    """One perturbed copy of a flat feature row. Draw order is fixed per op,
    so a given generator state yields exactly one outcome."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidInputError(f"expected a flat feature row, got shape {x.shape}")
    if isinstance(op, GaussianJitter):
        return x + rng.normal(0.0, op.sigma, size=x.size) if op.sigma > 0 else x.copy()
    if isinstance(op, JitterDrop):
        out = x + rng.normal(0.0, op.sigma, size=x.size) if op.sigma > 0 else x.copy()
        ndrop = int(round(op.drop_frac * x.size))
        if ndrop > 0:
            out[rng.choice(x.size, size=ndrop, replace=False)] = 0.0
        return out
    if layout is None:
        raise InvalidInputError(f"{type(op).__name__} needs an image layout")
    if isinstance(op, HorizontalFlip):
        if rng.random() < op.p:
            return _fold(x, layout)[:, ::-1, :].ravel().copy()
        return x.copy()
    if isinstance(op, RandLite):
        img = _fold(x, layout).copy()
        h, w = layout.height, layout.width
        for _ in range(op.n_ops):
            kind = int(rng.integers(0, 3))
            if kind == 0:
                shift = int(round(op.magnitude * w))
                direction = int(rng.integers(0, 2)) * 2 - 1
                if shift > 0:
                    img = np.roll(img, direction * shift, axis=1)
            elif kind == 1:
                if op.magnitude > 0:
                    img = img + rng.normal(0.0, op.magnitude, size=img.shape)
            else:
                side = int(round(op.magnitude * min(h, w)))
                top = int(rng.integers(0, h - side + 1))
                left = int(rng.integers(0, w - side + 1))
                if side > 0:
                    img[top : top + side, left : left + side, :] = op.dataset_mean
        return img.ravel()
    raise InvalidInputError(f"unknown transform {op!r}")


def weak_augment(x, cfg: AugmentConfig, layout: Optional[ImageLayout], rng: np.random.Generator) -> np.ndarray:
    return apply_transform(x, cfg.weak, layout, rng)


def strong_augment(x, cfg: AugmentConfig, layout: Optional[ImageLayout], rng: np.random.Generator) -> np.ndarray:
    return apply_transform(x, cfg.strong, layout, rng)


# ── synthetic sources ────────────────────────────────────────────────


@dataclass(frozen=True)
class GaussianMixture:
    """Unit-variance Gaussian blobs whose closest pair of means sits exactly
    `separation` apart; class labels cycle 0..classes-1 over the rows."""

    classes: int
    dim: int
    separation: float

    def __post_init__(self):
        if self.classes < 2:
            raise InvalidConfigError("a mixture needs at least two classes")
        if self.dim < 1:
            raise InvalidConfigError("dim must be positive")
        if self.separation <= 0:
            raise InvalidConfigError("separation must be positive")


@dataclass(frozen=True)
class TinyDigits:
    """Noisy 10-class digit glyphs upscaled from a 3x5 dot-matrix font."""

    height: int = 10
    width: int = 6

    def __post_init__(self):
        if self.height < 5 or self.width < 3:
            raise InvalidConfigError("digit canvas must be at least 5x3")


_GLYPHS = [
    "111101101101111",
    "010110010010111",
    "111001111100111",
    "111001111001111",
    "101101111001001",
    "111100111001111",
    "111100111101111",
    "111001001001001",
    "111101111101111",
    "111101111001111",
]


def _digit_templates(height: int, width: int) -> np.ndarray:
    base = np.array(
        [[float(ch) for ch in glyph] for glyph in _GLYPHS], dtype=np.float64
    ).reshape(10, 5, 3)
    # nearest-neighbor upscale of the 5x3 base grid
    rows = (np.arange(height) * 5) // height
    cols = (np.arange(width) * 3) // width
    return base[:, rows][:, :, cols]


SyntheticSource = Union[GaussianMixture, TinyDigits]


def mixture_means(source: GaussianMixture) -> np.ndarray:
    """Class means of the mixture, a fixed property of the source itself.

    The geometry derives from the source parameters alone, so train, test,
    and pool draws from equal configs sample one shared world. Means are
    scaled so the closest pair sits exactly `separation` apart.
    """
    geometry_seed = np.random.SeedSequence(
        [source.classes, source.dim, int(np.float64(source.separation).view(np.uint64))]
    ).generate_state(1, np.uint64)[0]
    rng = np.random.default_rng(int(geometry_seed))
    raw = rng.normal(size=(source.classes, source.dim))
    dists = np.linalg.norm(raw[:, None, :] - raw[None, :, :], axis=-1)
    np.fill_diagonal(dists, np.inf)
    return raw * (source.separation / dists.min())


def make_synthetic(source: SyntheticSource, n: int, seed: int) -> Dataset:
    """n iid rows from the source, labels cycling over the classes. The seed
    drives only the sample noise; the class structure is the source's own."""
    if n < 1:
        raise InvalidInputError("n must be positive")
    rng = np.random.default_rng(mask64(seed))
    if isinstance(source, GaussianMixture):
        means = mixture_means(source)
        labels = np.arange(n, dtype=np.int64) % source.classes
        features = means[labels] + rng.standard_normal((n, source.dim))
        return Dataset(features, labels, layout=None)
    if isinstance(source, TinyDigits):
        templates = _digit_templates(source.height, source.width)
        labels = np.arange(n, dtype=np.int64) % 10
        flat = templates[labels].reshape(n, -1)
        features = flat + rng.normal(0.0, 0.15, size=flat.shape)
        return Dataset(features, labels, ImageLayout(source.height, source.width, 1))
    raise InvalidInputError(f"unknown synthetic source {source!r}")


def strip_labels(data: Dataset) -> Dataset:
    return Dataset(data.features, None, data.layout)


# ── budget split ─────────────────────────────────────────────────────


def initial_split(
    pool_size: int,
    total_budget: int,
    cycles: int,
    validation_fraction: float = 0.1,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Partition the query budget into a held-out validation draw plus the
    first training batch.

    Validation gets round(fraction * budget) queries; the remainder splits
    evenly over the cycles, with the integer division remainder left for the
    final cycle to spend. Both index arrays come from one uniform draw
    without replacement (validation rows first) and are returned sorted.
    """
    if pool_size < 1:
        raise InvalidInputError("pool is empty")
    if total_budget < 1:
        raise InvalidConfigError("query budget must be positive")
    if cycles < 1:
        raise InvalidConfigError("cycles must be positive")
    if not 0.0 <= validation_fraction < 1.0:
        raise InvalidConfigError("validation fraction must lie in [0, 1)")
    val_n = int(round(validation_fraction * total_budget))
    per_cycle = (total_budget - val_n) // cycles
    if per_cycle < 1:
        raise InvalidConfigError(
            f"budget {total_budget} too small for {cycles} cycles after "
            f"{val_n} validation queries"
        )
    if val_n + per_cycle > pool_size:
        raise InvalidInputError("pool smaller than the initial draw")
    rng = np.random.default_rng(mask64(seed))
    pick = rng.choice(pool_size, size=val_n + per_cycle, replace=False)
    return np.sort(pick[:val_n]).astype(np.int64), np.sort(pick[val_n:]).astype(np.int64)


def per_cycle_batches(total_budget: int, cycles: int, validation_fraction: float) -> list[int]:
    """Query batch size for each cycle; the last batch absorbs the remainder."""
    val_n = int(round(validation_fraction * total_budget))
    per_cycle = (total_budget - val_n) // cycles
    sizes = [per_cycle] * cycles
    sizes[-1] += (total_budget - val_n) - per_cycle * cycles
    return sizes


# ── dataset files ────────────────────────────────────────────────────
#
# Little-endian binary: magic "AOTD", u32 version=1, u32 n, u32 d,
# u8 layout flag (0 = none, 1 = image followed by u32 h, w, c),
# u8 has_labels, f32 features row-major, then u32 labels when present.


def save_dataset(data: Dataset, path) -> None:
    parts = [struct.pack("<4sIII", DATASET_MAGIC, DATASET_VERSION, data.n, data.dim)]
    if data.layout is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(
            struct.pack("<BIII", 1, data.layout.height, data.layout.width, data.layout.channels)
        )
    parts.append(struct.pack("<B", 0 if data.labels is None else 1))
    parts.append(data.features.astype("<f4").tobytes())
    if data.labels is not None:
        parts.append(data.labels.astype("<u4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        magic, version, n, d = struct.unpack_from("<4sIII", blob, 0)
        if magic != DATASET_MAGIC:
            raise InvalidInputError(f"bad dataset magic {magic!r}")
        if version != DATASET_VERSION:
            raise InvalidInputError(f"unsupported dataset version {version}")
        offset = 16
        (layout_flag,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        layout = None
        if layout_flag == 1:
            h, w, c = struct.unpack_from("<III", blob, offset)
            offset += 12
            layout = ImageLayout(h, w, c)
        elif layout_flag != 0:
            raise InvalidInputError(f"unknown layout flag {layout_flag}")
        (has_labels,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        features = np.frombuffer(blob, dtype="<f4", count=n * d, offset=offset)
        offset += 4 * n * d
        labels = None
        if has_labels == 1:
            labels = np.frombuffer(blob, dtype="<u4", count=n, offset=offset).astype(np.int64)
        elif has_labels != 0:
            raise InvalidInputError(f"unknown label flag {has_labels}")
    except (struct.error, ValueError) as exc:
        raise InvalidInputError(f"truncated dataset file: {exc}") from exc
    return Dataset(features.astype(np.float64).reshape(n, d), labels, layout)
