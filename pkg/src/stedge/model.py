"""A small multi-scale edge network with deep supervision, in plain numpy.

The encoder has ``num_blocks - 1`` stages. Each stage is two 3x3
convolutions with ELU (continuous first derivative, which keeps finite
difference checks meaningful); stages are separated by 2x2 average pooling. Every
stage emits a 1-channel logit map (1x1 convolution), bilinearly upsampled
to the input size. The fused map is a 1x1 convolution over the stacked
upsampled logits. All maps go through the logistic function.

Forward and backward are written by hand so that the training loop needs
nothing beyond numpy.
"""

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAGIC = b"STEDGECK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    num_blocks: int = 7
    base_channels: int = 16
    input_size: int = 400

    def __post_init__(self):
        if self.num_blocks < 2:
            raise ValueError("num_blocks must be >= 2 (one stage plus the fused map)")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")

    @property
    def num_stages(self):
        return self.num_blocks - 1

    @property
    def stride(self):
        return 2 ** (self.num_stages - 1)

    def stage_channels(self, s):
        return self.base_channels * min(2**s, 8)


def param_shapes(cfg, in_channels=3):
    """Parameter names and shapes in declaration order."""
    shapes = []
    c_in = in_channels
    for s in range(cfg.num_stages):
        c = cfg.stage_channels(s)
        shapes += [
            (f"s{s}.conv1.w", (c, c_in, 3, 3)),
            (f"s{s}.conv1.b", (c,)),
            (f"s{s}.conv2.w", (c, c, 3, 3)),
            (f"s{s}.conv2.b", (c,)),
            (f"s{s}.head.w", (c,)),
            (f"s{s}.head.b", (1,)),
        ]
        c_in = c
    shapes += [("fuse.w", (cfg.num_stages,)), ("fuse.b", (1,))]
    return shapes


class NetworkParams:
    """Weights, Adam moments and step counter of one network."""

    def __init__(self, config, weights, m=None, v=None, step=0):
        self.config = config
        self.weights = weights
        self.m = m if m is not None else {k: np.zeros_like(a) for k, a in weights.items()}
        self.v = v if v is not None else {k: np.zeros_like(a) for k, a in weights.items()}
        self.step = step

    @classmethod
    def init(cls, config, seed=0):
        """He fan-in initialisation; the fused 1x1 starts as a plain average."""
        rng = np.random.default_rng(seed)
        weights = {}
        for name, shape in param_shapes(config):
            if name == "fuse.w":
                weights[name] = np.full(shape, 1.0 / config.num_stages)
            elif name.endswith(".b"):
                weights[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
                weights[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        return cls(config, weights)

    @classmethod
    def zeros(cls, config):
        return cls(config, {n: np.zeros(s) for n, s in param_shapes(config)})

    def copy(self):
        cp = lambda d: {k: a.copy() for k, a in d.items()}
        return NetworkParams(self.config, cp(self.weights), cp(self.m), cp(self.v), self.step)

    def equals(self, other):
        if self.config != other.config or self.step != other.step:
            return False
        return all(
            np.array_equal(getattr(self, d)[k], getattr(other, d)[k])
            for d in ("weights", "m", "v")
            for k in self.weights
        )


# --- layers ---------------------------------------------------------------


def _conv3x3(x, w, b):
    """Same-padded 3x3 convolution of a ``(N, C, H, W)`` batch."""
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))  # N, C, H, W, 3, 3
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * 9)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.reshape(n, h, wd, -1).transpose(0, 3, 1, 2), cols


def _conv3x3_backward(dout, cols, x_shape, w):
    n, c, h, wd = x_shape
    co = w.shape[0]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, co)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(co, -1)).reshape(n, h, wd, c, 3, 3)
    dxp = np.zeros((n, c, h + 2, wd + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, :, i : i + h, j : j + wd] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1], dw, db


def _avgpool2(x):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _avgpool2_backward(d):
    return np.repeat(np.repeat(d, 2, axis=2), 2, axis=3) * 0.25


def upsample_matrix(out_size, in_size):
    """Bilinear interpolation matrix (half-pixel centres, edge clamped)."""
    m = np.zeros((out_size, in_size))
    scale = in_size / out_size
    for i in range(out_size):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        f = src - i0
        m[i, i0] += 1 - f
        m[i, i1] += f
    return m


def _elu(z):
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def _elu_grad(z, a):
    return np.where(z > 0, 1.0, a + 1.0)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _as_batch(img):
    x = np.asarray(img, dtype=float)
    if x.ndim == 2:
        x = np.repeat(x[..., None], 3, axis=2)
    if x.ndim == 3:
        x = x[None]
    return x.transpose(0, 3, 1, 2) - 0.5


# --- forward / backward ----------------------------------------------------


def forward_cached(params, imgs):
    """Forward pass over ``(N, H, W, 3)`` (or a single image).

    Returns ``(maps, cache)`` where ``maps`` is a list of ``num_blocks``
    arrays of shape ``(N, H, W)``, the fused map last.
    """
    cfg = params.config
    wts = params.weights
    x = _as_batch(imgs)
    h, w = x.shape[2:]
    if h % cfg.stride or w % cfg.stride:
        raise ValueError(f"input {h}x{w} not divisible by network stride {cfg.stride}")
    cache = {"x_shape": x.shape, "stages": []}
    logits = []
    a = x
    for s in range(cfg.num_stages):
        if s > 0:
            a = _avgpool2(a)
        st = {"in_shape": a.shape}
        z1, st["cols1"] = _conv3x3(a, wts[f"s{s}.conv1.w"], wts[f"s{s}.conv1.b"])
        a1 = _elu(z1)
        z2, st["cols2"] = _conv3x3(a1, wts[f"s{s}.conv2.w"], wts[f"s{s}.conv2.b"])
        a2 = _elu(z2)
        st["dact1"], st["dact2"], st["a2"] = _elu_grad(z1, a1), _elu_grad(z2, a2), a2
        head = np.einsum("nchw,c->nhw", a2, wts[f"s{s}.head.w"]) + wts[f"s{s}.head.b"][0]
        uh, uw = upsample_matrix(h, head.shape[1]), upsample_matrix(w, head.shape[2])
        st["uh"], st["uw"] = uh, uw
        logits.append(uh @ head @ uw.T)
        cache["stages"].append(st)
        a = a2
    stacked = np.stack(logits, axis=1)  # N, S, H, W
    fused = np.einsum("nshw,s->nhw", stacked, wts["fuse.w"]) + wts["fuse.b"][0]
    cache["stacked"] = stacked
    maps = [sigmoid(z) for z in logits] + [sigmoid(fused)]
    cache["maps"] = maps
    return maps, cache


def forward(params, img):
    """Side outputs of one image: a list of ``(H, W)`` maps, fused last."""
    maps, _ = forward_cached(params, img)
    return [m[0] for m in maps]


def backward_cached(params, cache, upstream):
    """Parameter gradients given dLoss/dmap for every output map."""
    cfg = params.config
    wts = params.weights
    maps = cache["maps"]
    if len(upstream) != len(maps):
        raise ValueError(f"expected {len(maps)} upstream gradients, got {len(upstream)}")
    up = []
    for g, p in zip(upstream, maps):
        g = np.asarray(g, dtype=float)
        if g.shape != p.shape:
            raise ValueError(f"upstream gradient shape {g.shape} does not match side output {p.shape}")
        up.append(g * p * (1.0 - p))
    grads = {}
    dfused = up[-1]
    grads["fuse.w"] = np.einsum("nshw,nhw->s", cache["stacked"], dfused)
    grads["fuse.b"] = np.array([dfused.sum()])
    da = None
    for s in reversed(range(cfg.num_stages)):
        st = cache["stages"][s]
        dlogit = up[s] + dfused * wts["fuse.w"][s]
        dhead = st["uh"].T @ dlogit @ st["uw"]
        grads[f"s{s}.head.w"] = np.einsum("nchw,nhw->c", st["a2"], dhead)
        grads[f"s{s}.head.b"] = np.array([dhead.sum()])
        da2 = np.einsum("nhw,c->nchw", dhead, wts[f"s{s}.head.w"])
        if da is not None:
            da2 = da2 + da
        dz2 = da2 * st["dact2"]
        a1_shape = st["in_shape"][:1] + (wts[f"s{s}.conv1.w"].shape[0],) + st["in_shape"][2:]
        da1, grads[f"s{s}.conv2.w"], grads[f"s{s}.conv2.b"] = _conv3x3_backward(
            dz2, st["cols2"], a1_shape, wts[f"s{s}.conv2.w"]
        )
        dz1 = da1 * st["dact1"]
        dain, grads[f"s{s}.conv1.w"], grads[f"s{s}.conv1.b"] = _conv3x3_backward(
            dz1, st["cols1"], st["in_shape"], wts[f"s{s}.conv1.w"]
        )
        da = _avgpool2_backward(dain) if s > 0 else None
    return {k: grads[k] for k in wts}


def backward(params, img, upstream):
    """Exact parameter gradients for one image and per-map upstream gradients."""
    _, cache = forward_cached(params, img)
    return backward_cached(params, cache, [np.asarray(g)[None] for g in upstream])


def adam_step(params, grads, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, applied in place; returns ``params``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient")
    params.step += 1
    t = params.step
    for k, g in grads.items():
        m = params.m[k]
        v = params.v[k]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        params.weights[k] -= lr * mhat / (np.sqrt(vhat) + eps)
    return params


def pad_to_stride(img, stride):
    h, w = img.shape[:2]
    ph, pw = (-h) % stride, (-w) % stride
    if not (ph or pw):
        return img
    pad = ((0, ph), (0, pw)) + ((0, 0),) * (img.ndim - 2)
    return np.pad(img, pad, mode="edge")


def predict(params, img):
    """Side outputs at native resolution (replicate-padded to the stride, then cropped)."""
    h, w = img.shape[:2]
    maps = forward(params, pad_to_stride(np.asarray(img, dtype=float), params.config.stride))
    return [m[:h, :w] for m in maps]


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(params, path):
    """Little-endian binary: header, config JSON, step, then flat float64 arrays.

    Arrays follow declaration order: all weights, then Adam first moments,
    then second moments.
    """
    cfg = json.dumps(asdict(params.config), sort_keys=True).encode()
    names = list(params.weights)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(cfg)))
        f.write(cfg)
        f.write(struct.pack("<QI", params.step, len(names)))
        for group in (params.weights, params.m, params.v):
            for name in names:
                a = np.ascontiguousarray(group[name], dtype="<f8")
                f.write(struct.pack("<I", a.size))
                f.write(a.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, cfg_len = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {FORMAT_VERSION}")
    config = BackboneConfig(**json.loads(take(cfg_len)))
    step, count = struct.unpack("<QI", take(12))
    shapes = param_shapes(config)
    if count != len(shapes):
        raise CheckpointError(f"{path}: {count} arrays, config expects {len(shapes)}")
    groups = []
    for _ in range(3):
        group = {}
        for name, shape in shapes:
            (size,) = struct.unpack("<I", take(4))
            if size != int(np.prod(shape)):
                raise CheckpointError(f"{path}: array {name} has {size} values, expected {shape}")
            group[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(float)
        groups.append(group)
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return NetworkParams(config, *groups, step=step)
