"""Boundary evaluation: NMS thinning, pixel correspondence and ODS/OIS/AP."""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .imgproc import _DIR_STEPS, _shifted, quantize_direction

MAX_DIST_FRAC = 0.0075
MATCHING = "optimal"


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float
    f_measure: float


@dataclass
class MetricsReport:
    ods: float
    ois: float
    ap: float
    ods_threshold: float
    curve: list = field(default_factory=list)

    def to_dict(self):
        return {
            "ods": self.ods,
            "ois": self.ois,
            "ap": self.ap,
            "ods_threshold": self.ods_threshold,
            "curve": [
                {"t": p.threshold, "p": p.precision, "r": p.recall, "f": p.f_measure}
                for p in self.curve
            ],
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def f_measure(p, r):
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def ridge_orientation(prob, sigma=1.0):
    """Angle of the ridge normal at every pixel, plus the smoothed map.

    The map is Gaussian-smoothed and differentiated twice with Sobel
    filters; the normal is the Hessian eigenvector of most negative
    curvature. First derivatives alone vanish on the ridge line itself,
    which leaves its direction undefined exactly where it matters.
    """
    s = ndimage.gaussian_filter(np.asarray(prob, dtype=float), sigma, mode="nearest")
    gx = ndimage.sobel(s, axis=1, mode="nearest")
    gy = ndimage.sobel(s, axis=0, mode="nearest")
    hxx = ndimage.sobel(gx, axis=1, mode="nearest")
    hyy = ndimage.sobel(gy, axis=0, mode="nearest")
    hxy = ndimage.sobel(gx, axis=0, mode="nearest")
    return 0.5 * np.arctan2(2 * hxy, hxx - hyy) + np.pi / 2, s


def nms_thin(prob, sigma=1.0):
    """Thin a probability map to one-pixel ridges.

    A pixel survives when it is the maximum of itself and its two
    neighbours across the ridge (see ``ridge_orientation``), ranking by
    probability, then by smoothed value (so a flat plateau keeps its
    centre), then preferring the lexicographically smallest (row, col).
    Survivors keep their probability.
    """
    prob = np.asarray(prob, dtype=float)
    angle, s = ridge_orientation(prob, sigma)
    q = quantize_direction(angle)
    keep = np.zeros(prob.shape, dtype=bool)
    for k, (dr, dc) in enumerate(_DIR_STEPS):
        # fwd is the neighbour with the larger (row, col), back the smaller
        pf, pb = _shifted(prob, dr, dc, -np.inf), _shifted(prob, -dr, -dc, -np.inf)
        sf, sb = _shifted(s, dr, dc, -np.inf), _shifted(s, -dr, -dc, -np.inf)
        beats_back = (prob > pb) | ((prob == pb) & (s > sb))
        beats_fwd = (prob > pf) | ((prob == pf) & (s >= sf))
        keep |= (q == k) & beats_back & beats_fwd
    return np.where(keep & (prob > 0), prob, 0.0)


def _offsets(radius):
    r = int(np.floor(radius))
    offs = [
        (dy * dy + dx * dx, dy, dx)
        for dy in range(-r, r + 1)
        for dx in range(-r, r + 1)
        if dy * dy + dx * dx <= radius * radius
    ]
    return [(dy, dx) for _, dy, dx in sorted(offs)]


def max_distance(shape, max_dist_frac=MAX_DIST_FRAC):
    return max_dist_frac * float(np.hypot(*shape[:2]))


def match_edges(pred, gt, max_dist_frac=MAX_DIST_FRAC, method=MATCHING):
    """One-to-one correspondence between predicted and ground-truth edge pixels.

    ``greedy`` matches pairs in order of increasing distance; ``optimal``
    computes a maximum-cardinality matching. Returns
    ``(matched_pred, matched_gt)`` boolean maps.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    radius = max_distance(pred.shape, max_dist_frac)
    if method == "greedy":
        return _match_greedy(pred, gt, radius)
    if method == "optimal":
        return _match_optimal(pred, gt, radius)
    raise ValueError(f"unknown matching method {method!r}")


def _match_greedy(pred, gt, radius):
    free_p = pred.copy()
    free_g = gt.copy()
    for dy, dx in _offsets(radius):
        # pred pixel p pairs with gt pixel p + (dy, dx); distinct p give distinct partners
        hit = free_p & _shifted(free_g, dy, dx, fill=False)
        if not hit.any():
            continue
        free_p &= ~hit
        free_g &= ~_shifted(hit, -dy, -dx, fill=False)
    return pred & ~free_p, gt & ~free_g


def _match_optimal(pred, gt, radius):
    pp = np.argwhere(pred)
    gg = np.argwhere(gt)
    mp = np.zeros(pred.shape, dtype=bool)
    mg = np.zeros(gt.shape, dtype=bool)
    if len(pp) == 0 or len(gg) == 0:
        return mp, mg
    gidx = -np.ones(gt.shape, dtype=int)
    gidx[gt] = np.arange(len(gg))
    rows, cols = [], []
    for dy, dx in _offsets(radius):
        y, x = pp[:, 0] + dy, pp[:, 1] + dx
        ok = (y >= 0) & (y < gt.shape[0]) & (x >= 0) & (x < gt.shape[1])
        j = np.full(len(pp), -1)
        j[ok] = gidx[y[ok], x[ok]]
        sel = j >= 0
        rows.append(np.nonzero(sel)[0])
        cols.append(j[sel])
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    graph = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(pp), len(gg)))
    match = maximum_bipartite_matching(graph, perm_type="column")
    got = match >= 0
    mp[tuple(pp[got].T)] = True
    mg[tuple(gg[match[got]].T)] = True
    return mp, mg


def default_thresholds(num_thresholds=99):
    return np.arange(1, num_thresholds + 1) / (num_thresholds + 1)


def image_counts(prob, gt, thresholds, max_dist_frac=MAX_DIST_FRAC, method=MATCHING):
    """Per-threshold ``[matched_pred, n_pred, matched_gt, n_gt]`` for one image."""
    gt = np.asarray(gt, dtype=bool)
    out = np.zeros((len(thresholds), 4), dtype=np.int64)
    n_gt = int(gt.sum())
    for i, t in enumerate(thresholds):
        pred = prob >= t
        mp, mg = match_edges(pred, gt, max_dist_frac, method)
        out[i] = (mp.sum(), pred.sum(), mg.sum(), n_gt)
    return out


def _prf(c):
    p = c[0] / c[1] if c[1] > 0 else 0.0
    r = c[2] / c[3] if c[3] > 0 else 0.0
    return p, r, f_measure(p, r)


def pr_at_threshold(probs, gts, t, max_dist_frac=MAX_DIST_FRAC, method=MATCHING):
    """Dataset-pooled precision/recall/F at one threshold."""
    if len(probs) == 0:
        raise ValueError("empty dataset")
    c = sum(image_counts(p, g, [t], max_dist_frac, method)[0] for p, g in zip(probs, gts))
    return PRPoint(float(t), *map(float, _prf(c)))


def average_precision(recall, precision):
    """Trapezoidal area under the precision envelope, integrated over recall."""
    recall = np.asarray(recall, dtype=float)
    precision = np.asarray(precision, dtype=float)
    if recall.size < 2:
        return 0.0
    # ascending precision within equal recall, so every tie sees the best of its group
    order = np.lexsort((precision, recall))
    r, p = recall[order], precision[order]
    env = np.maximum.accumulate(p[::-1])[::-1]
    return float(np.sum(np.diff(r) * (env[1:] + env[:-1]) / 2))


def metrics_from_counts(counts, thresholds):
    """ODS/OIS/AP from an ``(n_images, n_thresholds, 4)`` count array."""
    counts = np.asarray(counts)
    if counts.shape[0] == 0:
        raise ValueError("empty dataset")
    pooled = counts.sum(axis=0)
    curve = [PRPoint(float(t), *map(float, _prf(c))) for t, c in zip(thresholds, pooled)]
    f = np.array([pt.f_measure for pt in curve])
    best = int(np.argmax(f))
    per_image_best = [int(np.argmax([_prf(c)[2] for c in img])) for img in counts]
    ois_counts = sum(img[k] for img, k in zip(counts, per_image_best))
    has_pred = pooled[:, 1] > 0
    ap = average_precision(
        [pt.recall for pt, h in zip(curve, has_pred) if h],
        [pt.precision for pt, h in zip(curve, has_pred) if h],
    )
    return MetricsReport(
        ods=float(f[best]),
        ois=float(_prf(ois_counts)[2]),
        ap=ap,
        ods_threshold=float(thresholds[best]),
        curve=curve,
    )


def ods_ois_ap(probs, gts, num_thresholds=99, max_dist_frac=MAX_DIST_FRAC, method=MATCHING):
    """Metrics of already-thinned probability maps against binary ground truth."""
    if len(probs) == 0:
        raise ValueError("empty dataset")
    thresholds = default_thresholds(num_thresholds)
    counts = np.stack(
        [image_counts(p, g, thresholds, max_dist_frac, method) for p, g in zip(probs, gts)]
    )
    return metrics_from_counts(counts, thresholds)


def is_binary(prob):
    prob = np.asarray(prob)
    return bool(np.all((prob == 0) | (prob == 1)))


def evaluate(probs, gts, num_thresholds=99, thin=True, **kw):
    """NMS-thin (optionally) and score a dataset of probability maps.

    Maps that are already binary have no ridge profile to thin along and are
    scored as given.
    """
    if thin:
        probs = [p if is_binary(p) else nms_thin(p) for p in probs]
    return ods_ois_ap(probs, gts, num_thresholds, **kw)


def binary_f(preds, gts, max_dist_frac=MAX_DIST_FRAC, method=MATCHING):
    """Pooled F of a dataset of binary edge maps (a single operating point)."""
    c = np.zeros(4, dtype=np.int64)
    for p, g in zip(preds, gts):
        mp, mg = match_edges(p, g, max_dist_frac, method)
        c += (mp.sum(), p.sum(), mg.sum(), g.sum())
    return _prf(c)


def write_curve_csv(report, path):
    with open(path, "w") as f:
        f.write("threshold,precision,recall,f_measure\n")
        for p in report.curve:
            f.write(f"{p.threshold:.6f},{p.precision:.6f},{p.recall:.6f},{p.f_measure:.6f}\n")
