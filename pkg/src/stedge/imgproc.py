"""Classical image-processing kernels used to build and refine pseudo labels.

Images are float arrays in [0, 1], either ``(H, W)`` for a single channel or
``(H, W, 3)`` for colour. Binary maps are ``(H, W)`` bool arrays.
Thresholds that conventionally live on the 0-255 scale (Canny, bilateral
sigma_color) are converted by the callers with :func:`from_255`.
"""

import numpy as np
from scipy import ndimage

LUMA = np.array([0.299, 0.587, 0.114])
EIGHT = np.ones((3, 3), dtype=bool)


def from_255(value):
    return value / 255.0


def _channels(img):
    if img.ndim == 2:
        return 1
    if img.ndim == 3:
        return img.shape[2]
    raise ValueError(f"image must be 2-D or 3-D, got shape {img.shape}")


def to_grayscale(img):
    """Return a 2-D luminance image; single-channel input comes back as is."""
    img = np.asarray(img, dtype=float)
    c = _channels(img)
    if c == 1:
        return img if img.ndim == 2 else img[..., 0]
    if c != 3:
        raise ValueError(f"expected 1 or 3 channels, got {c}")
    return img @ LUMA


def default_sigma(ksize):
    # OpenCV's rule for sigma <= 0
    return 0.3 * ((ksize - 1) * 0.5 - 1) + 0.8


def gaussian_kernel1d(ksize, sigma=None):
    if ksize < 1 or ksize % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {ksize}")
    if sigma is None:
        sigma = default_sigma(ksize)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    x = np.arange(ksize) - (ksize - 1) / 2
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def gaussian_blur(img, ksize=5, sigma=None):
    """Separable Gaussian blur with edge-replicate padding."""
    img = np.asarray(img, dtype=float)
    k = gaussian_kernel1d(ksize, sigma)
    if ksize == 1:
        return img.copy()
    out = ndimage.correlate1d(img, k, axis=0, mode="nearest")
    return ndimage.correlate1d(out, k, axis=1, mode="nearest")


def bilateral_filter(img, diameter=15, sigma_color=50 / 255, sigma_space=50.0):
    """Bilateral filter over a circular window of the given diameter.

    Range weights use the Euclidean colour distance across channels, so a
    colour image is filtered jointly rather than channel by channel.
    """
    if diameter < 1 or diameter % 2 == 0:
        raise ValueError(f"diameter must be odd and >= 1, got {diameter}")
    if sigma_color <= 0 or sigma_space <= 0:
        raise ValueError("bilateral sigmas must be positive")
    img = np.asarray(img, dtype=float)
    squeeze = img.ndim == 2
    x = img[..., None] if squeeze else img
    r = diameter // 2
    h, w = x.shape[:2]
    padded = np.pad(x, ((r, r), (r, r), (0, 0)), mode="edge")
    num = np.zeros_like(x)
    den = np.zeros((h, w))
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            d2 = dy * dy + dx * dx
            if d2 > r * r:
                continue
            nb = padded[r + dy : r + dy + h, r + dx : r + dx + w]
            diff2 = ((nb - x) ** 2).sum(axis=2)
            wgt = np.exp(-d2 / (2 * sigma_space**2) - diff2 / (2 * sigma_color**2))
            num += wgt[..., None] * nb
            den += wgt
    out = num / den[..., None]
    return out[..., 0] if squeeze else out


def sobel_gradients(gray):
    """3x3 Sobel derivatives (x to the right, y downwards), replicate padding."""
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    return gx, gy


def gradient_field(img):
    """Return ``(magnitude, direction)`` of the Sobel gradient.

    Magnitude is the L1 norm |gx| + |gy|, as in OpenCV's Canny, so the
    customary 0-255 thresholds keep their meaning after division by 255.
    """
    gx, gy = sobel_gradients(to_grayscale(img))
    return np.abs(gx) + np.abs(gy), np.arctan2(gy, gx)


# (row, col) step for each quantized gradient direction: 0, 45, 90, 135 degrees
_DIR_STEPS = ((0, 1), (1, 1), (1, 0), (1, -1))


def quantize_direction(direction):
    deg = np.rad2deg(direction) % 180.0
    return (((deg + 22.5) // 45).astype(int)) % 4


def _shifted(a, dr, dc, fill=0.0):
    """``out[i, j] = a[i + dr, j + dc]`` with out-of-range reads set to fill."""
    h, w = a.shape
    out = np.full_like(a, fill)
    r0, r1 = max(0, -dr), min(h, h - dr)
    c0, c1 = max(0, -dc), min(w, w - dc)
    out[r0:r1, c0:c1] = a[r0 + dr : r1 + dr, c0 + dc : c1 + dc]
    return out


def suppress_non_maxima(magnitude, direction):
    """Keep pixels that are maxima along their quantized gradient direction.

    Of two equal neighbours along the direction, the one further along
    (larger row, or larger column for horizontal gradients) survives.
    """
    q = quantize_direction(direction)
    keep = np.zeros(magnitude.shape, dtype=bool)
    for k, (dr, dc) in enumerate(_DIR_STEPS):
        fwd = _shifted(magnitude, dr, dc)
        back = _shifted(magnitude, -dr, -dc)
        # 135 degrees steps left while going down; "further along" is still the larger row
        ok = (magnitude >= back) & (magnitude > fwd)
        keep |= (q == k) & ok
    return keep & (magnitude > 0)


def hysteresis(candidates, strong):
    """Keep 8-connected candidate components that contain a strong pixel."""
    labels, n = ndimage.label(candidates, structure=EIGHT)
    if n == 0:
        return np.zeros(candidates.shape, dtype=bool)
    seeded = np.zeros(n + 1, dtype=bool)
    seeded[np.unique(labels[strong & candidates])] = True
    seeded[0] = False
    return seeded[labels]


def canny(img, low, high):
    """Canny edges with thresholds on the [0, 1]-intensity gradient scale."""
    if low < 0 or low > high:
        raise ValueError(f"need 0 <= low <= high, got low={low}, high={high}")
    mag, direction = gradient_field(img)
    thin = suppress_non_maxima(mag, direction)
    cand = thin & (mag >= low)
    return hysteresis(cand, thin & (mag >= high))


def adaptive_binarize(prob, block=33, offset=0.02, t_global=0.5):
    """Union of a local-mean threshold and a global threshold.

    A pixel passes the local branch when it exceeds the mean of its
    ``block`` x ``block`` neighbourhood by more than ``offset``; flat regions
    therefore never pass it.
    """
    prob = np.asarray(prob, dtype=float)
    local = ndimage.uniform_filter(prob, size=block, mode="nearest")
    return (prob > local + offset) | (prob > t_global)


def connected_components(binary):
    """8-connected labelling; returns ``(labels, sizes)`` with ``sizes[0] == 0``."""
    labels, n = ndimage.label(np.asarray(binary, dtype=bool), structure=EIGHT)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    sizes[0] = 0
    return labels, sizes


def connectivity_filter(binary, min_size=30):
    if min_size < 0:
        raise ValueError("min_size must be >= 0")
    binary = np.asarray(binary, dtype=bool)
    if min_size == 0:
        return binary.copy()
    labels, sizes = connected_components(binary)
    return (sizes >= min_size)[labels] & binary


def hadamard_mask(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a & b
