"""Dataset synthesis and ingestion, plus 8-bit PNG/PPM image I/O."""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from ..transforms import blur

log = logging.getLogger(__name__)

BLUR_SIZE = 9
BLUR_SIGMA = 2.0
LUMA = np.array([0.299, 0.587, 0.114])
IMAGE_SUFFIXES = {".png", ".ppm", ".pgm", ".jpg", ".jpeg", ".bmp"}


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic"  # "synthetic" or a directory path
    side: int = 32
    channels: int = 1
    count: int = 2000
    fractions: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1) > 1e-9:
            raise ValueError("split fractions must be three values summing to 1")
        if min(self.fractions) < 0:
            raise ValueError("split fractions must be non-negative")
        if self.count < 10:
            raise ValueError("count must be >= 10")


@dataclass
class Splits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def synth_images(count, side, channels, rng):
    """Smooth stand-ins for natural images: blurred white noise, min-max normalized."""
    noise = rng.standard_normal((count, side, side, channels))
    smooth = blur(noise, BLUR_SIZE, BLUR_SIGMA)
    lo = smooth.min(axis=(1, 2, 3), keepdims=True)
    hi = smooth.max(axis=(1, 2, 3), keepdims=True)
    return ((smooth - lo) / (hi - lo)).astype(np.float32)


def _split(images, fractions, rng):
    order = rng.permutation(len(images))
    n_train = int(round(fractions[0] * len(images)))
    n_val = int(round(fractions[1] * len(images)))
    idx = np.split(order, [n_train, n_train + n_val])
    return Splits(*(images[i] for i in idx))


def synth_dataset(spec):
    rng = np.random.default_rng(spec.seed)
    images = synth_images(spec.count, spec.side, spec.channels, rng)
    return _split(images, spec.fractions, rng)


def read_image(path, channels=None):
    """Read an 8-bit image to a float (H, W, C) array in [0, 1]."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if channels == 1:
        arr = (arr @ LUMA)[:, :, None]
    return arr


def write_image(path, img):
    """Write an image as 8-bit PNG or PPM/PGM, rounding to the nearest level.

    Rounding to 8 bits is lossy with respect to the float pixels.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    levels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pgm") else "PNG"
    PILImage.fromarray(levels).save(path, format=fmt)


def resize_bilinear(img, side):
    """Bilinear resample of an (H, W, C) array to (side, side, C), pixel-center aligned."""
    h, w, _ = img.shape
    yi = np.clip((np.arange(side) + 0.5) * h / side - 0.5, 0, h - 1)
    xi = np.clip((np.arange(side) + 0.5) * w / side - 0.5, 0, w - 1)
    y0 = np.floor(yi).astype(int)
    x0 = np.floor(xi).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (yi - y0)[:, None, None]
    fx = (xi - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def load_dataset(spec):
    """Decode, convert, resize and split a directory of images.

    Unreadable files are skipped with a warning; too few usable images is an error.
    """
    if spec.source == "synthetic":
        return synth_dataset(spec)
    root = Path(spec.source)
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    images = []
    for path in files:
        if len(images) == spec.count:
            break
        try:
            arr = read_image(path, spec.channels)
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            continue
        images.append(resize_bilinear(arr, spec.side))
    if len(images) < spec.count:
        raise ValueError(f"only {len(images)} usable images in {root}, need {spec.count}")
    rng = np.random.default_rng(spec.seed)
    return _split(np.clip(np.stack(images), 0, 1).astype(np.float32), spec.fractions, rng)
