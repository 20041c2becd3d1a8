"""Reading and writing images, edge maps and probability maps as PNG/JPEG."""

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


def read_image(path, size=None):
    """Decode to float in [0, 1]; grayscale files give 2-D arrays.

    ``size`` is an optional ``(height, width)`` bilinear resize target.
    """
    with PILImage.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), PILImage.BILINEAR)
        return np.asarray(im, dtype=float) / 255.0


def to_uint8(img):
    return np.clip(np.rint(np.asarray(img, dtype=float) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, img):
    PILImage.fromarray(to_uint8(img)).save(path)


def write_binary(path, binary):
    PILImage.fromarray(np.where(binary, 255, 0).astype(np.uint8)).save(path)


def read_binary(path):
    with PILImage.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def write_prob(path, prob):
    PILImage.fromarray(to_uint8(prob)).save(path)


def read_prob(path):
    with PILImage.open(path) as im:
        return np.asarray(im.convert("L"), dtype=float) / 255.0


def list_images(directory, manifest=None):
    """Image files of a dataset directory, sorted by name.

    A manifest (text file, one file name per line) restricts and orders
    the listing.
    """
    directory = Path(directory)
    if manifest is not None:
        names = [ln.strip() for ln in Path(manifest).read_text().splitlines()]
        return [directory / n for n in names if n and not n.startswith("#")]
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
