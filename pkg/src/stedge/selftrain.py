"""The self-training loop: Canny bootstrap, phase-one training, refinement rounds."""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imgproc as ip
from . import io
from .losses import total_loss, wce_multi_layer
from .model import (
    NetworkParams,
    adam_step,
    backward_cached,
    forward_cached,
    predict,
    save_checkpoint,
)
from .smoothing import L0Params, perturb

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    epochs_phase1: int = 10
    epochs_per_round: int = 5
    termination_pct: float = 2.0
    max_rounds: int = 10
    min_component: int = 30
    canny_high: tuple = (200 / 255, 300 / 255)
    canny_low: tuple = (20 / 255, 40 / 255)
    block: int = 33
    offset: float = 0.02
    t_global: float = 0.5
    seed: int = 0
    workers: int = 1


@dataclass
class PseudoLabelStore:
    ids: list
    labels: list
    canny_low: list

    def edge_count(self):
        return int(sum(int(y.sum()) for y in self.labels))

    def upper_bound(self):
        return int(sum(int(c.sum()) for c in self.canny_low))


@dataclass
class RoundState:
    round_index: int = 0
    edge_counts: list = field(default_factory=list)
    checkpoint_path: str = None
    losses: list = field(default_factory=list)
    fused_change: list = field(default_factory=list)
    last_fused: list = field(default=None, repr=False)


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def blur_for_canny(img):
    """5x5 Gaussian then 15x15 bilateral, as used before both Canny passes."""
    return ip.bilateral_filter(ip.gaussian_blur(img, 5))


def make_initial_labels(images, cfg=TrainConfig(), ids=None):
    """Round-0 labels from high-threshold Canny plus the frozen low-threshold maps."""

    def one(img):
        b = blur_for_canny(img)
        return ip.canny(b, *cfg.canny_high), ip.canny(b, *cfg.canny_low)

    out = _map(one, images, cfg.workers)
    ids = list(ids) if ids is not None else [f"{i:04d}" for i in range(len(images))]
    return PseudoLabelStore(ids, [o[0] for o in out], [o[1] for o in out])


def make_perturbed(images, params=L0Params(), workers=1):
    return _map(lambda x: perturb(x, params), images, workers)


def post_process(pred_fused, canny_low, cfg=TrainConfig()):
    """Binarize the fused map, keep it inside the low-threshold Canny map, drop small pieces."""
    a = ip.adaptive_binarize(pred_fused, cfg.block, cfg.offset, cfg.t_global)
    return ip.connectivity_filter(ip.hadamard_mask(a, canny_low), cfg.min_component)


def infer_fused(params, images, workers=1):
    return _map(lambda x: predict(params, x)[-1], images, workers)


def _batch_loss(params, xb, yb, xpb, loss_cfg):
    maps, cache = forward_cached(params, xb)
    n = len(yb)
    if xpb is None:
        grads = [np.zeros_like(m) for m in maps]
        loss = 0.0
        for i in range(n):
            l, g = wce_multi_layer([m[i] for m in maps], yb[i], loss_cfg)
            loss += l
            for gm, gi in zip(grads, g):
                gm[i] = gi
        return loss, backward_cached(params, cache, grads)
    maps_p, cache_p = forward_cached(params, xpb)
    grads = [np.zeros_like(m) for m in maps]
    grads_p = [np.zeros_like(m) for m in maps]
    loss = 0.0
    for i in range(n):
        l, gc, gp = total_loss([m[i] for m in maps], [m[i] for m in maps_p], yb[i], loss_cfg)
        loss += l
        for a, b, ga, gb in zip(grads, grads_p, gc, gp):
            a[i] = ga
            b[i] = gb
    g1 = backward_cached(params, cache, grads)
    g2 = backward_cached(params, cache_p, grads_p)
    return loss, {k: g1[k] + g2[k] for k in g1}


def train_epochs(params, images, labels, loss_cfg, epochs, cfg=TrainConfig(), perturbed=None, tag=0):
    """Adam over shuffled mini-batches; returns the mean per-image loss of each epoch.

    ``perturbed`` switches on the consistency term (weighted by ``loss_cfg.mu``).
    Batch order is drawn from a generator keyed by ``(seed, tag, epoch)``.
    """
    n = len(images)
    curve = []
    if n == 0:
        return curve
    use_pert = perturbed is not None and loss_cfg.mu > 0
    for epoch in range(epochs):
        order = np.random.default_rng([cfg.seed, tag, epoch]).permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            xb = np.stack([images[i] for i in idx])
            yb = [labels[i] for i in idx]
            xpb = np.stack([perturbed[i] for i in idx]) if use_pert else None
            loss, grads = _batch_loss(params, xb, yb, xpb, loss_cfg)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            adam_step(params, grads, cfg.lr)
            total += loss
        curve.append(total / n)
        log.info("epoch %d loss %.4f", epoch, curve[-1])
    return curve


def phase_one_train(images, store, loss_cfg, backbone, cfg=TrainConfig(), epochs=None):
    """Seeded init, then teaching with the weighted cross-entropy only."""
    params = NetworkParams.init(backbone, cfg.seed)
    epochs = cfg.epochs_phase1 if epochs is None else epochs
    curve = train_epochs(params, images, store.labels, loss_cfg, epochs, cfg, tag=0)
    return params, curve


def run_round(state, params, images, perturbed, store, loss_cfg, cfg=TrainConfig()):
    """Predict, refresh labels inside the Canny upper bound, then train E epochs."""
    k = state.round_index + 1
    fused = infer_fused(params, images, cfg.workers)
    labels = _map(
        lambda pc: post_process(pc[0], pc[1], cfg), list(zip(fused, store.canny_low)), cfg.workers
    )
    store = PseudoLabelStore(store.ids, labels, store.canny_low)
    counts = state.edge_counts + [store.edge_count()]
    change = list(state.fused_change)
    if state.last_fused is not None:
        change.append(float(np.mean([np.abs(a - b).mean() for a, b in zip(fused, state.last_fused)])))
    curve = train_epochs(
        params, images, store.labels, loss_cfg, cfg.epochs_per_round, cfg, perturbed, tag=k
    )
    state = RoundState(k, counts, state.checkpoint_path, state.losses + [curve], change, fused)
    return params, store, state


def should_terminate(edge_counts, termination_pct=2.0):
    """Stop once the relative growth of the label edge count drops below T%."""
    if len(edge_counts) < 2:
        return False
    cur, prev = edge_counts[-1], edge_counts[-2]
    if cur == 0:
        return True
    return (cur - prev) / cur < termination_pct / 100.0


def _write_round(out_dir, k, params, store, stats):
    rd = Path(out_dir) / f"round_{k}"
    (rd / "labels").mkdir(parents=True, exist_ok=True)
    for name, y in zip(store.ids, store.labels):
        io.write_binary(rd / "labels" / f"{name}.png", y)
    save_checkpoint(params, rd / "checkpoint.bin")
    (rd / "stats.json").write_text(json.dumps(stats, indent=2))
    return rd / "checkpoint.bin"


def self_train(images, backbone, loss_cfg, cfg=TrainConfig(), ids=None, out_dir=None, l0=L0Params()):
    """Phase one followed by refinement rounds until the edge count stabilises.

    Returns ``(params, store, history)``; ``history`` holds one dict per
    round (round 0 is phase one). With ``out_dir`` set, every round writes
    its labels, checkpoint and stats, so an abort keeps the finished rounds.
    """
    t0 = time.time()
    store = make_initial_labels(images, cfg, ids)
    params, curve = phase_one_train(images, store, loss_cfg, backbone, cfg)
    state = RoundState(0, [store.edge_count()], None, [curve])
    history = [
        {
            "round": 0,
            "n_edge": store.edge_count(),
            "upper_bound": store.upper_bound(),
            "loss": curve,
            "wall_time": time.time() - t0,
        }
    ]
    if out_dir is not None:
        state.checkpoint_path = str(_write_round(out_dir, 0, params, store, history[-1]))
    if cfg.max_rounds <= 0:
        return params, store, history
    perturbed = make_perturbed(images, l0, cfg.workers) if loss_cfg.mu > 0 else None
    for _ in range(cfg.max_rounds):
        t0 = time.time()
        params, store, state = run_round(state, params, images, perturbed, store, loss_cfg, cfg)
        history.append(
            {
                "round": state.round_index,
                "n_edge": state.edge_counts[-1],
                "upper_bound": store.upper_bound(),
                "loss": state.losses[-1],
                "fused_change": state.fused_change[-1] if state.fused_change else None,
                "wall_time": time.time() - t0,
            }
        )
        log.info("round %d: N_edge=%d", state.round_index, state.edge_counts[-1])
        if out_dir is not None:
            state.checkpoint_path = str(
                _write_round(out_dir, state.round_index, params, store, history[-1])
            )
        if should_terminate(state.edge_counts, cfg.termination_pct):
            break
    return params, store, history
