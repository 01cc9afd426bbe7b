"""Synthetic data, training loop, raw video I/O and rate-distortion sweeps."""
import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import tensor as T
from .codec import EncodeOptions, encode_video, rd_loss
from .errors import DimensionError, FormatError, NumericError
from .metrics import log_msssim, msssim, psnr
from .networks import CodecModel, NetworkConfig
from .quantizer import noise_quantize
from .tensor import Tensor

log = logging.getLogger(__name__)

RAW_MAGIC = b"CEVR"
_RAW_HEADER = struct.Struct("<4sIII")


# ---------------------------------------------------------------------------
# synthetic video
# ---------------------------------------------------------------------------

def _texture(rng, H, W, smooth):
    """Smooth colour noise plus a few oriented sinusoids, scaled to [0, 1]."""
    noise = rng.standard_normal((3, H, W))
    tex = np.stack([ndimage.gaussian_filter(c, smooth, mode="wrap") for c in noise])
    yy, xx = np.mgrid[0:H, 0:W]
    for _ in range(2):
        fy, fx = rng.integers(1, 4, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * (fy * yy / H + fx * xx / W) + phase)
        tex += rng.uniform(0.2, 0.6) * wave[None] * rng.uniform(-1, 1, size=(3, 1, 1))
    lo = tex.min(axis=(1, 2), keepdims=True)
    hi = tex.max(axis=(1, 2), keepdims=True)
    tex = (tex - lo) / np.maximum(hi - lo, 1e-12)
    a, b = np.sort(rng.uniform(0, 1, size=(2, 3, 1, 1)), axis=0)
    return a + (b - a) * tex


def gen_synthetic_video(seed, frames=8, H=64, W=64, num_objects=3, max_velocity=3):
    """Textured static background with rigid textured objects moving at constant
    integer velocity (wrapping at the borders). Returns float64 [frames, 3, H, W]."""
    if H < 32 or W < 32:
        raise DimensionError(f"synthetic frames must be at least 32x32, got {H}x{W}")
    rng = np.random.default_rng(seed)
    background = _texture(rng, H, W, smooth=rng.uniform(1.5, 4.0))
    sprites = []
    for _ in range(num_objects):
        h = int(rng.integers(H // 6, H // 2))
        w = int(rng.integers(W // 6, W // 2))
        mask = np.zeros((H, W), dtype=bool)
        if rng.random() < 0.5:
            mask[:h, :w] = True
        else:
            yy, xx = np.mgrid[0:H, 0:W]
            mask = ((yy - h / 2) / (h / 2)) ** 2 + ((xx - w / 2) / (w / 2)) ** 2 <= 1.0
        tex = _texture(rng, H, W, smooth=rng.uniform(0.8, 2.5))
        pos = rng.integers(0, [H, W])
        vel = rng.integers(-max_velocity, max_velocity + 1, size=2) if max_velocity else np.zeros(2, int)
        sprites.append((mask, tex, pos, vel))
    out = np.empty((frames, 3, H, W))
    for t in range(frames):
        frame = background.copy()
        for mask, tex, pos, vel in sprites:
            dy, dx = (pos + vel * t).tolist()
            m = np.roll(mask, (dy, dx), axis=(0, 1))
            frame[:, m] = np.roll(tex, (dy, dx), axis=(1, 2))[:, m]
        out[t] = frame
    return out


def object_masks(seed, frames=8, H=64, W=64, num_objects=3, max_velocity=3):
    """Per-object (mask at frame 0, velocity) pairs, replaying the generator's draws."""
    rng = np.random.default_rng(seed)
    _texture(rng, H, W, smooth=rng.uniform(1.5, 4.0))
    result = []
    for _ in range(num_objects):
        h = int(rng.integers(H // 6, H // 2))
        w = int(rng.integers(W // 6, W // 2))
        mask = np.zeros((H, W), dtype=bool)
        if rng.random() < 0.5:
            mask[:h, :w] = True
        else:
            yy, xx = np.mgrid[0:H, 0:W]
            mask = ((yy - h / 2) / (h / 2)) ** 2 + ((xx - w / 2) / (w / 2)) ** 2 <= 1.0
        _texture(rng, H, W, smooth=rng.uniform(0.8, 2.5))
        pos = rng.integers(0, [H, W])
        vel = rng.integers(-max_velocity, max_velocity + 1, size=2) if max_velocity else np.zeros(2, int)
        result.append((np.roll(mask, tuple(pos.tolist()), axis=(0, 1)), vel))
    return result


# ---------------------------------------------------------------------------
# raw video files
# ---------------------------------------------------------------------------

def to_uint8(frames):
    return np.clip(np.floor(np.asarray(frames) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_raw(path, frames):
    """8-bit planar RGB with a 16-byte header (magic, frames, H, W)."""
    arr = frames if frames.dtype == np.uint8 else to_uint8(frames)
    n, c, H, W = arr.shape
    if c != 3:
        raise DimensionError(f"raw video needs 3 channels, got {c}")
    with open(path, "wb") as f:
        f.write(_RAW_HEADER.pack(RAW_MAGIC, n, H, W))
        f.write(np.ascontiguousarray(arr).tobytes())


def read_raw(path, as_float=True):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _RAW_HEADER.size:
        raise FormatError("raw video shorter than its header")
    magic, n, H, W = _RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise FormatError(f"bad raw video magic {magic!r}")
    body = data[_RAW_HEADER.size:]
    if len(body) != n * 3 * H * W:
        raise FormatError(f"raw video body has {len(body)} bytes, expected {n * 3 * H * W}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(n, 3, H, W)
    return arr.astype(np.float64) / 255.0 if as_float else arr.copy()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lam: float = 0.01
    target_bpp: float = 0.0
    lr: float = 1e-4
    batch: int = 4
    crop: int = 64
    epochs: int = 30
    seed: int = 0
    train_clips: int = 32
    clip_frames: int = 6
    val_clips: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self, net):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.crop % net.factor:
            raise DimensionError(f"crop {self.crop} not divisible by {net.factor}")
        if self.batch < 1 or self.epochs < 0:
            raise ValueError("batch must be >= 1 and epochs >= 0")


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def synthetic_clips(seed, count, frames, size):
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2 ** 31, size=count)
    return [gen_synthetic_video(int(s), frames, size, size,
                                num_objects=int(np.random.default_rng(s).integers(1, 4)))
            for s in seeds]


def frame_pairs(clips):
    return np.array([(c, t) for c in range(len(clips)) for t in range(len(clips[c]) - 1)])


def _crop(rng, clip, t, crop):
    H, W = clip.shape[-2:]
    i = int(rng.integers(0, H - crop + 1))
    j = int(rng.integers(0, W - crop + 1))
    return clip[t: t + 2, :, i: i + crop, j: j + crop]


def pair_loss(model, x0, x1, lam, target, rng):
    """Loss on a batch of adjacent-frame pairs.

    Frame 0 of each pair is conditioned on the all-zero latent and frame 1 on
    the noisy latent of frame 0, so one forward pass covers both contexts.
    """
    x = T.concat([Tensor(x0), Tensor(x1)], axis=0)
    B = x0.shape[0]
    y = noise_quantize(model.image_encode(x), rng)
    if model.config.conditional:
        y0 = y[:B]
        y_prev = T.concat([Tensor(np.zeros(y0.shape)), y0], axis=0)
        z = noise_quantize(model.hyper_encode(y, y_prev), rng)
    else:
        y_prev, z = None, None
    return rd_loss(model, x, y, z, lam, target, y_prev)


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf


def evaluate_loss(model, clips, lam, target, seed=12345):
    """Noisy-latent loss over all pairs of ``clips`` with a fixed noise draw."""
    rng = np.random.default_rng(seed)
    totals = []
    for clip in clips:
        x0, x1 = clip[:-1], clip[1:]
        loss = pair_loss(model, x0, x1, lam, target, rng)
        totals.append((loss.total.item(), loss.distortion.item(), loss.bpp.item()))
    return tuple(np.mean(totals, axis=0))


def train(cfg, net=None, clips=None, val=None, model=None, callback=None):
    """Adam on adjacent-frame pairs; returns (model restored to the best
    validation epoch, TrainLog). A non-finite loss aborts with NumericError."""
    net = net or NetworkConfig()
    cfg.validate(net)
    rng = np.random.default_rng(cfg.seed)
    if clips is None:
        clips = synthetic_clips(cfg.seed, cfg.train_clips, cfg.clip_frames, cfg.crop)
    if val is None:
        val = synthetic_clips(cfg.seed + 10_000, cfg.val_clips, cfg.clip_frames, cfg.crop)
    model = model or CodecModel(net, seed=cfg.seed)
    opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    pairs = frame_pairs(clips)
    hist = TrainLog()
    best = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        stats = []
        for step, start in enumerate(range(0, len(order) - cfg.batch + 1, cfg.batch)):
            sel = pairs[order[start: start + cfg.batch]]
            crops = np.stack([_crop(rng, clips[c], t, cfg.crop) for c, t in sel])
            model.params.zero_grad()
            with T.Tape():
                try:
                    loss = pair_loss(model, crops[:, 0], crops[:, 1], cfg.lam, cfg.target_bpp, rng)
                except NumericError as e:
                    raise NumericError(f"non-finite value at epoch {epoch} step {step}: {e}") from e
                T.backward(loss.total, wrt=list(model.params.values()))
            total = loss.total.item()
            if not math.isfinite(total):
                raise NumericError(f"non-finite loss at epoch {epoch} step {step}")
            opt.step()
            model.invalidate()
            stats.append((total, loss.distortion.item(), loss.bpp.item()))
        tr = np.mean(stats, axis=0) if stats else (math.nan,) * 3
        va = evaluate_loss(model, val, cfg.lam, cfg.target_bpp)
        entry = {"epoch": epoch, "train_total": tr[0], "train_mse": tr[1], "train_bpp": tr[2],
                 "val_total": va[0], "val_mse": va[1], "val_bpp": va[2]}
        hist.epochs.append(entry)
        log.info("epoch %d %s", epoch, entry)
        if va[0] < hist.best_val:
            hist.best_val, hist.best_epoch = va[0], epoch
            best = {k: v.data.copy() for k, v in model.params.items()}
        if callback:
            callback(entry, model)
    if best is not None:
        for k, v in model.params.items():
            v.data[...] = best[k]
        model.invalidate()
    return model, hist


# ---------------------------------------------------------------------------
# rate-distortion sweeps
# ---------------------------------------------------------------------------

@dataclass
class RdPoint:
    label: str
    bpp: float
    mse: float
    psnr: float
    msssim: float
    log_msssim: float
    internal_learning: bool = False
    lam: float = math.nan


def measure(frames, recon):
    frames, recon = np.asarray(frames), np.asarray(recon)
    mse = float(np.mean((frames - recon) ** 2))
    ms = float(np.mean([msssim(a, b) for a, b in zip(frames, recon)]))
    return mse, psnr(frames, recon), ms, log_msssim(ms)


def rd_point(model, frames, opts=None, label="", lam=math.nan):
    res = encode_video(model, frames, opts)
    mse, p, ms, lms = measure(frames, res.reconstructions)
    il = bool(opts and opts.internal_learning)
    return RdPoint(label, res.bpp(), mse, p, ms, lms, il, lam)


def rd_sweep(models, video, opts=None, internal_learning=False, labels=None):
    """One row per model (and per internal-learning setting), sorted by bpp.

    Every row is a real encode; nothing is interpolated.
    """
    if not models:
        raise ValueError("rd_sweep needs at least one model")
    rows = []
    for i, model in enumerate(models):
        label = labels[i] if labels else f"model{i}"
        rows.append(rd_point(model, video, opts, label))
        if internal_learning:
            il = EncodeOptions(**{**asdict(opts or EncodeOptions()), "internal_learning": True})
            rows.append(rd_point(model, video, il, label))
    return sorted(rows, key=lambda r: r.bpp)


def write_rd_table(rows, csv_path=None, json_path=None):
    cols = list(RdPoint.__dataclass_fields__)
    if csv_path:
        with open(csv_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols)
            w.writeheader()
            for r in rows:
                w.writerow(asdict(r))
    if json_path:
        def clean(v):
            return None if isinstance(v, float) and not math.isfinite(v) else v
        with open(json_path, "w") as f:
            json.dump({"series": [{k: clean(v) for k, v in asdict(r).items()} for r in rows]}, f, indent=1)
