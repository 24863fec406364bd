"""Synthetic image/caption pairs with controllable domain shifts.

32 classes = 4 patterns x 4 colours x 2 scales.  Each consecutive block of 32
pairs holds every class exactly once, so a block is a retrieval gallery (and a
contrastive batch) with exactly one positive per query.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PATTERNS = ("stripes-h", "stripes-v", "checker", "blob")
COLORS = ("red", "green", "blue", "yellow")
SCALES = ("coarse", "fine")
N_CLASSES = len(PATTERNS) * len(COLORS) * len(SCALES)
GALLERY = N_CLASSES

PALETTE = np.array(
    [[0.90, 0.15, 0.15], [0.15, 0.80, 0.20], [0.20, 0.30, 0.90], [0.90, 0.85, 0.10]], dtype=np.float32
)
BACKGROUND = 0.45
NOISE = 0.05
PERIOD = {"coarse": 8.0, "fine": 4.0}
RADIUS = {"coarse": 10.0, "fine": 5.0}
IMAGE_SIZE = 32

VOCAB = {"<pad>": 0, "<eos>": 1, "a": 2, "photo": 3, "of": 4}
for _w in SCALES + COLORS + PATTERNS:
    VOCAB[_w] = len(VOCAB)
CAPTION_LEN = 6


def class_parts(cls: int) -> tuple[int, int, int]:
    """class id -> (pattern, colour, scale) indices."""
    return cls // 8, (cls // 2) % 4, cls % 2


def caption_ids(cls: int) -> np.ndarray:
    pat, col, sc = class_parts(cls)
    words = ["a", "photo", "of", SCALES[sc], COLORS[col], PATTERNS[pat]]
    return np.array([VOCAB[w] for w in words], dtype=np.int64)


def caption_text(cls: int) -> str:
    pat, col, sc = class_parts(cls)
    return f"a photo of {SCALES[sc]} {COLORS[col]} {PATTERNS[pat]}"


@dataclass(frozen=True)
class DomainShift:
    """``affine-pixel``: out[c] = gain[c] * in[perm[c]] + bias[c].
    ``frequency``: pattern period and blob radius scaled by ``warp``, phase offset added.
    """

    kind: str = "none"
    perm: tuple[int, ...] = (1, 2, 0)
    gain: tuple[float, ...] = (0.7, 1.3, 0.9)
    bias: tuple[float, ...] = (0.10, -0.15, 0.05)
    warp: float = 1.5
    phase: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "affine-pixel", "frequency"):
            raise ValueError(f"unknown shift kind {self.kind!r}")

    def apply_pixels(self, images: np.ndarray) -> np.ndarray:
        if self.kind != "affine-pixel":
            return images
        g = np.asarray(self.gain, np.float32)[:, None, None]
        b = np.asarray(self.bias, np.float32)[:, None, None]
        return (images[..., list(self.perm), :, :] * g + b).astype(np.float32)

    def inverse_pixels(self, images: np.ndarray) -> np.ndarray:
        if self.kind != "affine-pixel":
            return images
        g = np.asarray(self.gain, np.float64)[:, None, None]
        b = np.asarray(self.bias, np.float64)[:, None, None]
        undone = (images.astype(np.float64) - b) / g
        out = np.empty_like(undone)
        out[..., list(self.perm), :, :] = undone
        return out.astype(np.float32)

    def inverse_conv(self) -> tuple[np.ndarray, np.ndarray]:
        """1x1 convolution (kernel [3,3,1,1], bias [3]) equal to ``inverse_pixels``."""
        k = np.zeros((3, 3, 1, 1))
        b = np.zeros(3)
        for c, src in enumerate(self.perm):
            k[src, c, 0, 0] = 1.0 / self.gain[c]
            b[src] = -self.bias[c] / self.gain[c]
        return k, b


NO_SHIFT = DomainShift("none")
AFFINE_SHIFT = DomainShift("affine-pixel")
FREQUENCY_SHIFT = DomainShift("frequency")


def render(cls: int, rng: np.random.Generator, shift: DomainShift = NO_SHIFT) -> np.ndarray:
    pat, col, sc = class_parts(cls)
    scale = SCALES[sc]
    period, radius = PERIOD[scale], RADIUS[scale]
    phase_shift = 0.0
    if shift.kind == "frequency":
        period *= shift.warp
        radius *= shift.warp
        phase_shift = shift.phase * period
    n = IMAGE_SIZE
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    phase = rng.uniform(0, period) + phase_shift
    if PATTERNS[pat] == "stripes-h":
        mask = np.sin(2 * np.pi * (yy + phase) / period) > 0
    elif PATTERNS[pat] == "stripes-v":
        mask = np.sin(2 * np.pi * (xx + phase) / period) > 0
    elif PATTERNS[pat] == "checker":
        ox = rng.uniform(0, period)
        mask = (np.floor((yy + phase) / (period / 2)) + np.floor((xx + ox) / (period / 2))) % 2 == 0
    else:
        cy, cx = rng.uniform(radius, n - radius, size=2)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    mask = mask.astype(np.float32)[None]
    color = PALETTE[col][:, None, None]
    img = BACKGROUND * (1 - mask) + color * mask
    img = img + rng.normal(0, NOISE, img.shape)
    return shift.apply_pixels(img.astype(np.float32))


@dataclass
class Split:
    images: np.ndarray  # [N, 3, 32, 32] float32
    captions: np.ndarray  # [N, CAPTION_LEN] int64
    classes: np.ndarray  # [N] int64

    def __len__(self) -> int:
        return len(self.classes)

    def blocks(self) -> list[slice]:
        return [slice(i, min(i + GALLERY, len(self))) for i in range(0, len(self), GALLERY)]


@dataclass
class Dataset:
    train: Split
    test: Split
    shift: DomainShift = field(default_factory=lambda: NO_SHIFT)
    seed: int = 0


def _make_split(n: int, shift: DomainShift, seed: int, tag: int) -> Split:
    order_rng = np.random.default_rng([seed, tag, 0])
    classes = np.concatenate([order_rng.permutation(N_CLASSES) for _ in range((n + GALLERY - 1) // GALLERY)])[:n]
    images = np.empty((n, 3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    for i, c in enumerate(classes):
        images[i] = render(int(c), np.random.default_rng([seed, tag, 1, i]), shift)
    captions = np.stack([caption_ids(int(c)) for c in classes])
    return Split(images, captions, classes.astype(np.int64))


def generate_dataset(n_train: int, n_test: int, shift: DomainShift = NO_SHIFT, seed: int = 0) -> Dataset:
    """Deterministic train/test splits; the same (class, index, seed) renders identically
    across shift kinds, so shifted and clean splits are paired item by item."""
    if n_train < 1 or n_test < 1:
        raise ValueError("splits need at least one pair")
    return Dataset(_make_split(n_train, shift, seed, 1), _make_split(n_test, shift, seed, 2), shift, seed)


def save_dataset(ds: Dataset, path) -> None:
    s = ds.shift
    np.savez(
        path,
        train_images=ds.train.images, train_captions=ds.train.captions, train_classes=ds.train.classes,
        test_images=ds.test.images, test_captions=ds.test.captions, test_classes=ds.test.classes,
        shift=np.array([s.kind]), seed=np.array([ds.seed]),
    )


def load_dataset(path) -> Dataset:
    z = np.load(path)
    shift = {"none": NO_SHIFT, "affine-pixel": AFFINE_SHIFT, "frequency": FREQUENCY_SHIFT}[str(z["shift"][0])]
    return Dataset(
        Split(z["train_images"], z["train_captions"], z["train_classes"]),
        Split(z["test_images"], z["test_captions"], z["test_classes"]),
        shift, int(z["seed"][0]),
    )
