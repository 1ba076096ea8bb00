"""Dataset synthesis, the QDAT1 file format, calibration-set construction,
and the clean-accuracy / attack-success-rate metrics.

Images are (n, c, h, w) float64 in [0, 1]. Calibration sets are unlabeled
by construction; operations that need labels reject them.
"""

import io
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError
from .network import forward

MAGIC = b"QDAT1"
VERSION = 1


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray  # None for calibration sets
    num_classes: int

    def __len__(self):
        return self.images.shape[0]

    @property
    def labeled(self):
        return self.labels is not None

    def validate(self):
        if self.images.ndim != 4:
            raise DimensionError(f"images must be (n,c,h,w), got {self.images.shape}")
        lo, hi = self.images.min(initial=0.0), self.images.max(initial=0.0)
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixels outside [0,1]: range [{lo}, {hi}]")
        if self.labels is not None:
            if self.labels.shape != (len(self),):
                raise DimensionError("labels length must match image count")
            if len(self) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise ValueError("labels outside [0, num_classes)")
        return self


def _stamp_pattern(img, kind, rng, h, w):
    """Draw one class-conditional shape onto a background image in place.

    Positions jitter across the whole canvas so every image region,
    corners included, carries some evidence for every class.
    """
    amp = rng.uniform(0.65, 0.95)
    if kind == 0:  # horizontal bar, full width
        r0 = int(rng.integers(0, h - 2))
        img[0, r0 : r0 + 3, :] += amp
    elif kind == 1:  # vertical bar, full height
        c0 = int(rng.integers(0, w - 2))
        img[0, :, c0 : c0 + 3] += amp
    elif kind == 2:  # filled disk
        cy = rng.uniform(h * 0.2, h * 0.8)
        cx = rng.uniform(w * 0.2, w * 0.8)
        yy, xx = np.mgrid[0:h, 0:w]
        img[0][(yy - cy) ** 2 + (xx - cx) ** 2 <= (min(h, w) * 0.22) ** 2] += amp
    else:  # diagonal stripe
        off = int(rng.integers(-4, 5))
        yy, xx = np.mgrid[0:h, 0:w]
        img[0][np.abs(yy - xx - off) <= 1] += amp


def synth_dataset(classes=4, size=4000, h=16, w=16, c=1, seed=0, noise=0.25,
                  tint=0.06):
    """Class-conditional shape images: bars, disks and stripes over noise.

    Each class also carries a weak background tint (brightness offset), the
    way natural image classes carry correlated local statistics, so local
    patches are weakly informative while the global shape dominates.
    Separable enough for a small CNN to exceed 95% held-out accuracy,
    deterministic under the seed, class counts balanced within one.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if classes > 4:
        raise ValueError("synthesizer defines 4 shape families")
    rng = np.random.default_rng(seed)
    labels = np.arange(size, dtype=np.int64) % classes
    rng.shuffle(labels)
    images = np.empty((size, c, h, w))
    for i in range(size):
        # weak class-conditional background brightness, the way natural
        # image classes carry correlated local statistics everywhere
        base = rng.uniform(0.05, 0.2) + tint * labels[i]
        img = base * np.ones((c, h, w))
        _stamp_pattern(img, int(labels[i]), rng, h, w)
        img += rng.normal(0.0, noise, size=(c, h, w))
        images[i] = img
    np.clip(images, 0.0, 1.0, out=images)
    return Dataset(images, labels, classes).validate()


def split_dataset(ds: Dataset, n_first: int):
    """Deterministic head/tail split preserving label order."""
    a = Dataset(ds.images[:n_first].copy(),
                None if ds.labels is None else ds.labels[:n_first].copy(), ds.num_classes)
    b = Dataset(ds.images[n_first:].copy(),
                None if ds.labels is None else ds.labels[n_first:].copy(), ds.num_classes)
    return a, b


def save_dataset(ds: Dataset, path):
    ds.validate()
    n, c, h, w = ds.images.shape
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<B", VERSION))
    buf.write(struct.pack("<IIII", n, c, h, w))
    buf.write(ds.images.astype("<f4").tobytes(order="C"))
    if ds.labels is not None:
        buf.write(struct.pack("<B", 1))
        buf.write(ds.labels.astype("<u2").tobytes(order="C"))
    else:
        buf.write(struct.pack("<B", 0))
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated file while reading {what}", offset=pos)
        out = data[pos : pos + n]
        pos += n
        return out

    if take(5, "magic") != MAGIC:
        raise FormatError("bad magic, expected QDAT1", offset=0)
    version = take(1, "version")[0]
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=5)
    n, c, h, w = struct.unpack("<IIII", take(16, "shape"))
    if n * c * h * w > 500_000_000:
        raise FormatError("implausible dataset size", offset=6)
    pix_off = pos
    images = np.frombuffer(take(4 * n * c * h * w, "pixels"), dtype="<f4")
    images = images.astype(np.float64).reshape(n, c, h, w)
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise FormatError("pixel values outside [0,1]", offset=pix_off)
    has_labels = take(1, "label flag")[0]
    labels = None
    num_classes = 0
    if has_labels == 1:
        labels = np.frombuffer(take(2 * n, "labels"), dtype="<u2").astype(np.int64)
        num_classes = int(labels.max()) + 1 if n else 0
    elif has_labels != 0:
        raise FormatError(f"label flag must be 0 or 1, got {has_labels}", offset=pos - 1)
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes", offset=pos)
    return Dataset(images, labels, num_classes).validate()


def build_calibration(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Stratified unlabeled sample covering every class at least once."""
    if not ds.labeled:
        raise ValueError("calibration construction needs a labeled source dataset")
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n = len(ds)
    total = max(1, int(round(n * fraction)))
    if total < ds.num_classes:
        raise ValueError(
            f"fraction {fraction} yields {total} samples, cannot cover {ds.num_classes} classes"
        )
    rng = np.random.default_rng(seed)
    per_class = [np.flatnonzero(ds.labels == k) for k in range(ds.num_classes)]
    if any(len(idx) == 0 for idx in per_class):
        raise ValueError("source dataset is missing at least one class")
    # one guaranteed draw per class, remainder proportional via a shuffled pool
    chosen = [idx[rng.integers(0, len(idx))] for idx in per_class]
    pool = np.setdiff1d(np.arange(n), np.array(chosen))
    rng.shuffle(pool)
    chosen = np.array(chosen + list(pool[: total - ds.num_classes]))
    chosen = chosen[rng.permutation(len(chosen))]
    return Dataset(ds.images[chosen].copy(), None, ds.num_classes)


def predict(model, images, batch_size=256):
    """Argmax class predictions, evaluated in fixed-size batches."""
    out = np.empty(images.shape[0], dtype=np.int64)
    for start in range(0, images.shape[0], batch_size):
        logits, _ = forward(model, images[start : start + batch_size])
        out[start : start + batch_size] = np.argmax(logits, axis=1)
    return out


def eval_ca(model, ds: Dataset) -> float:
    """Fraction of clean samples classified correctly."""
    if not ds.labeled:
        raise ValueError("clean accuracy needs a labeled dataset")
    preds = predict(model, ds.images)
    return float(np.mean(preds == ds.labels))


def eval_asr(model, ds: Dataset, trigger) -> float:
    """Fraction of stamped non-target-class samples predicted as the target.

    Samples whose true label already equals the trigger's target are
    excluded; stamping touches only pixels under the mask.
    """
    if not ds.labeled:
        raise ValueError("attack success rate needs a labeled dataset")
    keep = ds.labels != trigger.target_label
    if not np.any(keep):
        raise ValueError("every sample belongs to the target class; ASR undefined")
    from .attack import stamp_trigger  # local import to avoid a cycle

    stamped = stamp_trigger(ds.images[keep], trigger)
    preds = predict(model, stamped)
    return float(np.mean(preds == trigger.target_label))
