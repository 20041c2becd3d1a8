"""L0 gradient minimization and the blur + L0 perturbation.

The solver alternates a per-pixel hard threshold on the gradients with a
screened-Poisson solve done in the Fourier domain, raising the coupling
weight ``beta`` geometrically until it passes ``beta_max``.
"""

from dataclasses import dataclass

import numpy as np

from .imgproc import gaussian_blur


@dataclass(frozen=True)
class L0Params:
    lambda0: float = 0.02
    kappa: float = 2.0
    beta_max: float = 1e5

    def __post_init__(self):
        if self.lambda0 <= 0:
            raise ValueError("lambda0 must be positive")
        if self.kappa <= 1:
            raise ValueError("kappa must be > 1")
        if self.beta_max <= 2 * self.lambda0:
            raise ValueError("beta_max must exceed 2 * lambda0")


def forward_diff(s):
    """Periodic forward differences ``(dx, dy)`` of a 2-D array."""
    return np.roll(s, -1, axis=1) - s, np.roll(s, -1, axis=0) - s


def _diff_otfs(shape):
    h, w = shape
    fx = np.exp(2j * np.pi * np.fft.fftfreq(w))[None, :] - 1.0
    fy = np.exp(2j * np.pi * np.fft.fftfreq(h))[:, None] - 1.0
    return fx, fy


def solve_s_subproblem(target, h, v, beta, otfs=None):
    """argmin_S |S - target|^2 + beta * (|dx S - h|^2 + |dy S - v|^2), periodic."""
    fx, fy = otfs if otfs is not None else _diff_otfs(target.shape)
    num = np.fft.fft2(target) + beta * (np.conj(fx) * np.fft.fft2(h) + np.conj(fy) * np.fft.fft2(v))
    den = 1.0 + beta * (np.abs(fx) ** 2 + np.abs(fy) ** 2)
    return np.real(np.fft.ifft2(num / den))


def l0_count(s, tol=0.0):
    """Number of pixels whose periodic gradient is nonzero (above ``tol``)."""
    dx, dy = forward_diff(s)
    return int(np.count_nonzero(np.abs(dx) + np.abs(dy) > tol))


def l0_objective(s, target, lambda0, tol=0.0):
    return float(((s - target) ** 2).sum()) + lambda0 * l0_count(s, tol)


def _pad_even(x):
    ph, pw = x.shape[0] % 2, x.shape[1] % 2
    if ph or pw:
        x = np.pad(x, ((0, ph), (0, pw)), mode="edge")
    return x


def surrogate(s, target, h, v, lambda0, beta):
    """Half-quadratic energy |S - I|^2 + lambda0 #{(h, v) != 0} + beta |grad S - (h, v)|^2."""
    dx, dy = forward_diff(s)
    support = np.count_nonzero((h != 0) | (v != 0))
    coupling = ((dx - h) ** 2 + (dy - v) ** 2).sum()
    return float(((s - target) ** 2).sum() + lambda0 * support + beta * coupling)


def _smooth_channel(chan, params, history):
    h0, w0 = chan.shape
    target = _pad_even(chan)
    otfs = _diff_otfs(target.shape)
    s = target.copy()
    beta = 2 * params.lambda0
    while beta <= params.beta_max:
        dx, dy = forward_diff(s)
        if history is not None:
            # with (h, v) = grad S the coupling term vanishes
            before = surrogate(s, target, dx, dy, params.lambda0, beta)
        zero = dx**2 + dy**2 <= params.lambda0 / beta
        dx[zero] = 0.0
        dy[zero] = 0.0
        s = solve_s_subproblem(target, dx, dy, beta, otfs)
        if history is not None:
            history.append((beta, before, surrogate(s, target, dx, dy, params.lambda0, beta)))
        beta *= params.kappa
    return s[:h0, :w0]


def l0_smooth(img, params=L0Params(), history=None):
    """Edge-preserving L0 smoothing, each channel on its own.

    If ``history`` is a list, one ``(beta, before, after)`` tuple is appended
    per outer iteration: the half-quadratic energy at that ``beta`` before the
    gradient threshold and after the Fourier solve (summed over channels,
    measured on the even-padded periodic domain the solver works on). Each
    iteration is a block-coordinate descent step, so ``after <= before``.
    """
    img = np.asarray(img, dtype=float)
    if not np.all(np.isfinite(img)):
        raise ValueError("l0_smooth input contains non-finite values")
    if img.ndim == 2:
        return _smooth_channel(img, params, history)
    chans, hists = [], []
    for c in range(img.shape[2]):
        hc = [] if history is not None else None
        chans.append(_smooth_channel(img[..., c], params, hc))
        hists.append(hc)
    if history is not None:
        for rows in zip(*hists):
            history.append((rows[0][0], sum(r[1] for r in rows), sum(r[2] for r in rows)))
    return np.stack(chans, axis=-1)


def perturb(img, params=L0Params()):
    """The perturbed counterpart X': 5x5 Gaussian blur, then L0 smoothing."""
    return np.clip(l0_smooth(gaussian_blur(img, 5), params), 0.0, 1.0)


_NEIGHBOURS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]


def patch_distances(img, patch=20):
    """Distances from each pixel's patch to its 8 neighbouring patches.

    Returns an ``(8, H, W)`` array ordered as ``_NEIGHBOURS``; neighbour
    patches sit one patch size away. Windows falling off the image read
    clamped (edge-replicated) pixels.
    """
    img = np.asarray(img, dtype=float)
    if img.ndim == 2:
        img = img[..., None]
    h, w = img.shape[:2]
    if patch > h or patch > w or patch < 1:
        raise ValueError(f"patch {patch} does not fit image {h}x{w}")
    lo = patch // 2
    pad = patch + lo + 1
    big = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    out = np.empty((8, h, w))
    for k, (dy, dx) in enumerate(_NEIGHBOURS):
        oy, ox = dy * patch, dx * patch
        shifted = np.roll(big, (-oy, -ox), axis=(0, 1))
        d2 = ((big - shifted) ** 2).sum(axis=2)
        # box sum over [i - lo, i - lo + patch) via an integral image
        ii = np.zeros((d2.shape[0] + 1, d2.shape[1] + 1))
        ii[1:, 1:] = d2.cumsum(0).cumsum(1)
        r0 = np.arange(h) + pad - lo
        c0 = np.arange(w) + pad - lo
        box = (
            ii[np.ix_(r0 + patch, c0 + patch)]
            - ii[np.ix_(r0, c0 + patch)]
            - ii[np.ix_(r0 + patch, c0)]
            + ii[np.ix_(r0, c0)]
        )
        out[k] = np.sqrt(np.maximum(box, 0.0))
    return out


def patch_distance_map(img, patch=20):
    """Mean Euclidean distance between each centred patch and its 8 neighbours."""
    return patch_distances(img, patch).mean(axis=0)
