"""End-to-end frame and video coding, container formats, losses.

Every frame's latent comes from the frame-local image encoder. Only entropy
decoding of y is sequential, because frame i's probabilities are a function
of (y_{i-1}, z_i). Frame 0 is conditioned on an all-zero latent.

Byte layouts (little-endian) are documented in ``docs/formats.md``.
"""
import hashlib
import io
import json
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .entropy import gmm_likelihood, gmm_pmf_table, rate_clamp, rate_nll
from .errors import CorruptionError, FormatError, NumericError
from .networks import CodecModel, NetworkConfig
from .quantizer import LatentCode, dequantize, quantize
from .rangecoder import CdfTable, Payload, ideal_bits, quantize_cdf, rc_decode, rc_encode
from .tensor import Tensor

MAGIC = b"CEVC"
VERSION = 1
HEADER = struct.Struct("<4sH8sIHHBBHHBHBB")
FLAG_INTERNAL = 1
FLAG_FACTORIZED = 2

CKPT_MAGIC = b"CEVCKPT1"
CKPT_VERSION = 1


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_bytes(model):
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<H", CKPT_VERSION))
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(t.data.astype("<f4").tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def checkpoint_save(model, path):
    model.freeze()
    data = checkpoint_bytes(model)
    with open(path, "wb") as f:
        f.write(data)
    return data


def checkpoint_from_bytes(data, expect_config=None):
    if len(data) < 32 + len(CKPT_MAGIC) + 2:
        raise FormatError("checkpoint too short")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptionError("checkpoint digest mismatch")
    f = io.BytesIO(body)
    if f.read(8) != CKPT_MAGIC:
        raise FormatError("not a cevc checkpoint")
    (version,) = struct.unpack("<H", f.read(2))
    if version != CKPT_VERSION:
        raise FormatError(f"unknown checkpoint version {version}")
    (n,) = struct.unpack("<I", f.read(4))
    config = NetworkConfig.from_dict(json.loads(f.read(n)))
    if expect_config is not None and expect_config != config:
        raise FormatError("checkpoint configuration differs from the requested one")
    model = CodecModel(config)
    (count,) = struct.unpack("<I", f.read(4))
    names = []
    for _ in range(count):
        (ln,) = struct.unpack("<H", f.read(2))
        name = f.read(ln).decode()
        (rank,) = struct.unpack("<B", f.read(1))
        shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(f.read(4 * size), dtype="<f4").astype(np.float64).reshape(shape)
        if name not in model.params or model.params[name].shape != tuple(shape):
            raise FormatError(f"checkpoint tensor {name} does not fit the model")
        model.params[name].data = values
        names.append(name)
    if names != model.params.names():
        raise FormatError("checkpoint tensors do not match the parameter registry")
    model._hash = digest[:8]
    return model


def checkpoint_load(path, expect_config=None):
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read(), expect_config)


def model_hash(model):
    if getattr(model, "_hash", None) is None:
        model.freeze()
        model._hash = checkpoint_bytes(model)[-32:-24]
    return model._hash


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------

@dataclass
class BitstreamHeader:
    model_hash: bytes
    frame_count: int
    height: int
    width: int
    pad_h: int
    pad_w: int
    N: int
    Nz: int
    num_down: int
    L: int
    K: int
    flags: int = 0
    version: int = VERSION

    def pack(self):
        return HEADER.pack(MAGIC, self.version, self.model_hash, self.frame_count, self.height, self.width,
                           self.pad_h, self.pad_w, self.N, self.Nz, self.num_down, self.L, self.K, self.flags)

    @classmethod
    def unpack(cls, data):
        if len(data) < HEADER.size:
            raise FormatError("bitstream shorter than its header")
        (magic, version, mh, fc, h, w, ph, pw, N, Nz, nd, L, K, flags) = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise FormatError("bad magic; not a cevc bitstream")
        if version != VERSION:
            raise FormatError(f"unsupported bitstream version {version}")
        return cls(mh, fc, h, w, ph, pw, N, Nz, nd, L, K, flags, version)

    @property
    def internal_learning(self):
        return bool(self.flags & FLAG_INTERNAL)


@dataclass
class FrameRecord:
    z: Payload
    y: Payload

    def pack(self):
        out = bytearray()
        for p in (self.z, self.y):
            out += struct.pack("<I", len(p.data)) + p.data + struct.pack("<I", p.crc)
        return bytes(out)

    @property
    def bits(self):
        return 8 * (len(self.z.data) + len(self.y.data))


@dataclass
class Bitstream:
    header: BitstreamHeader
    records: list

    def to_bytes(self):
        return self.header.pack() + b"".join(r.pack() for r in self.records)

    @classmethod
    def from_bytes(cls, data):
        header = BitstreamHeader.unpack(data)
        pos = HEADER.size
        records = []
        for i in range(header.frame_count):
            parts = []
            for _ in range(2):
                if pos + 4 > len(data):
                    raise FormatError(f"bitstream truncated in frame {i}", frame=i)
                (n,) = struct.unpack_from("<I", data, pos)
                pos += 4
                if pos + n + 4 > len(data):
                    raise FormatError(f"bitstream truncated in frame {i}", frame=i)
                payload = bytes(data[pos: pos + n])
                (crc,) = struct.unpack_from("<I", data, pos + n)
                pos += n + 4
                parts.append(Payload(payload, -1, crc))
            records.append(FrameRecord(*parts))
        if pos != len(data):
            raise FormatError(f"{len(data) - pos} trailing bytes after the last frame")
        return cls(header, records)

    def payload_bits(self):
        return sum(r.bits for r in self.records)


# ---------------------------------------------------------------------------
# per-frame entropy coding
# ---------------------------------------------------------------------------

def _z_tables(model, shape):
    L = model.config.L
    cum = quantize_cdf(model.prior_z.pmf_table(L), offset=-L).cum
    C, h, w = shape
    return CdfTable(np.repeat(cum, h * w, axis=0), -L)


def _y_tables(model, z_code, y_prev):
    """Integer CDFs for every element of y given (z_i, y_{i-1}), plus the float pmfs."""
    L = model.config.L
    if not model.config.conditional:
        h, w = y_prev.shape[-2:]
        pmf = model.prior_y.pmf_table(L)
        cum = np.repeat(quantize_cdf(pmf, offset=-L).cum, h * w, axis=0)
        return CdfTable(cum, -L), np.repeat(pmf, h * w, axis=0)
    zt = dequantize(z_code).reshape((1,) + z_code.shape)
    yp = dequantize(y_prev).reshape((1,) + y_prev.shape)
    params = model.hyper_decode(zt, yp)
    pmf = gmm_pmf_table(*params.flat(0), L)
    return quantize_cdf(pmf, offset=-L), pmf


def hyper_code(model, y_code, y_prev):
    """z_i = quantize(hyper_encode(y_i, y_{i-1}))."""
    yt = dequantize(y_code).reshape((1,) + y_code.shape)
    yp = dequantize(y_prev).reshape((1,) + y_prev.shape)
    return quantize(model.hyper_encode(yt, yp).data[0], model.config.L)


def code_latents(model, y_code, y_prev, z_code=None):
    """Entropy-code a frame whose integer latent is already fixed."""
    stats = {"clamped_y": y_code.clamped}
    if model.config.conditional:
        if z_code is None:
            z_code = hyper_code(model, y_code, y_prev)
        zt = _z_tables(model, z_code.shape)
        z_payload = rc_encode(z_code.symbols, zt)
        stats["model_bits_z"] = ideal_bits(z_code.symbols, zt)
        stats["clamped_z"] = z_code.clamped
    else:
        z_payload = Payload.wrap(b"", 0)
        stats["model_bits_z"] = 0.0
    yt, pmf = _y_tables(model, z_code, y_prev)
    y_payload = rc_encode(y_code.symbols, yt)
    flat = y_code.symbols.reshape(-1)
    stats["model_bits_y"] = ideal_bits(flat, yt)
    stats["xent_bits_y"] = float(-np.log2(np.maximum(pmf[np.arange(flat.size), flat + model.config.L],
                                                      1e-300)).sum())
    stats["bits_z"] = 8 * len(z_payload.data)
    stats["bits_y"] = 8 * len(y_payload.data)
    return z_code, FrameRecord(z_payload, y_payload), stats


@dataclass
class FrameResult:
    y: LatentCode
    z: LatentCode
    record: FrameRecord
    stats: dict = field(default_factory=dict)


def encode_frame(model, x, y_prev, index=0):
    """Encode one padded frame x [3, H, W] (or [1, 3, H, W]) given y_{i-1}."""
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    y_code = quantize(model.image_encode(Tensor(x)).data[0], model.config.L, origin=index)
    z_code, record, stats = code_latents(model, y_code, y_prev)
    return FrameResult(y_code, z_code, record, stats)


def decode_latents(model, record, y_prev, latent_shape, hyper_shape):
    L = model.config.L
    if model.config.conditional:
        zt = _z_tables(model, hyper_shape)
        z = rc_decode(record.z, zt, int(np.prod(hyper_shape)))
        z_code = LatentCode(z.reshape(hyper_shape), L=L)
    else:
        z_code = None
    yt, _ = _y_tables(model, z_code, y_prev)
    y = rc_decode(record.y, yt, int(np.prod(latent_shape)))
    return LatentCode(y.reshape(latent_shape), L=L), z_code


def reconstruct(model, y_code):
    """Clamped reconstruction [3, H, W] of an integer latent."""
    yt = dequantize(y_code).reshape((1,) + y_code.shape)
    return np.clip(model.image_decode(yt).data[0], 0.0, 1.0)


def decode_frame(model, record, y_prev, frame_shape):
    """Returns (y_i, reconstruction) for a padded frame geometry (H, W)."""
    H, W = frame_shape
    y_code, _ = decode_latents(model, record, y_prev, model.latent_shape(H, W), model.hyper_shape(H, W))
    return y_code, reconstruct(model, y_code)


# ---------------------------------------------------------------------------
# video
# ---------------------------------------------------------------------------

def worker_count(threads=None):
    if threads is not None:
        return max(1, int(threads))
    return max(1, int(os.environ.get("CEVC_THREADS", "1")))


def _map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def pad_frames(frames, factor):
    frames = np.asarray(frames, dtype=np.float64)
    H, W = frames.shape[-2:]
    ph, pw = (-H) % factor, (-W) % factor
    if ph or pw:
        frames = np.pad(frames, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    return frames, ph, pw


@dataclass
class EncodeOptions:
    internal_learning: bool = False
    steps: int = 10
    lr: float = 1e-3
    lam: float = 0.01
    metric: str = "mse"
    threads: int = None


@dataclass
class EncodeResult:
    bitstream: Bitstream
    latents: list
    hyper: list
    reconstructions: np.ndarray
    stats: list

    @property
    def data(self):
        return self.bitstream.to_bytes()

    def bpp(self):
        h = self.bitstream.header
        return self.bitstream.payload_bits() / (h.frame_count * h.height * h.width)


def encode_video(model, frames, opts=None):
    """frames [T, 3, H, W] in [0, 1] -> EncodeResult."""
    opts = opts or EncodeOptions()
    c = model.config
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ValueError(f"expected [T, 3, H, W] frames, got {frames.shape}")
    n, _, H, W = frames.shape
    padded, ph, pw = pad_frames(frames, c.factor)
    threads = worker_count(opts.threads)
    mh = model_hash(model)
    zero = LatentCode.zeros(model.latent_shape(H + ph, W + pw), c.L)

    if not opts.internal_learning:
        def enc(i):
            return quantize(model.image_encode(Tensor(padded[i: i + 1])).data[0], c.L, origin=i)

        ys = _map(enc, list(range(n)), threads)
        prevs = [zero] + ys[:-1]

        def code(i):
            return code_latents(model, ys[i], prevs[i])

        coded = _map(code, list(range(n)), threads)
        results = [FrameResult(ys[i], z, rec, st) for i, (z, rec, st) in enumerate(coded)]
    else:
        results = []
        prev = zero
        for i in range(n):
            res = internal_learn_frame(model, padded[i], prev, opts.steps, opts.lr, opts.lam, opts.metric, index=i)
            z_code, rec, st = code_latents(model, res.y, prev, res.z)
            st.update(res.stats)
            results.append(FrameResult(res.y, z_code, rec, st))
            prev = res.y

    recon = np.stack(_map(lambda r: reconstruct(model, r.y), results, threads))[:, :, :H, :W]
    flags = (FLAG_INTERNAL if opts.internal_learning else 0) | (0 if c.conditional else FLAG_FACTORIZED)
    header = BitstreamHeader(mh, n, H, W, ph, pw, c.N, c.Nz, c.num_down, c.L, c.K, flags)
    bs = Bitstream(header, [r.record for r in results])
    return EncodeResult(bs, [r.y for r in results], [r.z for r in results], recon, [r.stats for r in results])


@dataclass
class DecodeResult:
    frames: np.ndarray
    latents: list


def check_header(model, header):
    c = model.config
    if header.model_hash != model_hash(model):
        raise FormatError("bitstream was produced by a different model")
    if (header.N, header.Nz, header.num_down, header.L, header.K) != (c.N, c.Nz, c.num_down, c.L, c.K):
        raise FormatError("bitstream geometry does not match the model configuration")
    if bool(header.flags & FLAG_FACTORIZED) == c.conditional:
        raise FormatError("bitstream entropy-model kind does not match the model")


def decode_video(model, data, threads=None):
    bs = data if isinstance(data, Bitstream) else Bitstream.from_bytes(data)
    h = bs.header
    check_header(model, h)
    threads = worker_count(threads)
    H, W = h.height + h.pad_h, h.width + h.pad_w
    lshape, zshape = model.latent_shape(H, W), model.hyper_shape(H, W)
    prev = LatentCode.zeros(lshape, model.config.L)
    latents = []
    for i, rec in enumerate(bs.records):
        try:
            y, _ = decode_latents(model, rec, prev, lshape, zshape)
        except (CorruptionError, NumericError, ValueError) as e:
            raise FormatError(f"frame {i}: {e}", frame=i) from e
        latents.append(y)
        prev = y
    frames = np.stack(_map(lambda y: reconstruct(model, y), latents, threads))
    return DecodeResult(frames[:, :, : h.height, : h.width], latents)


# ---------------------------------------------------------------------------
# training objective
# ---------------------------------------------------------------------------

@dataclass
class RdLoss:
    distortion: Tensor
    rate_bits: Tensor
    bpp: Tensor
    total: Tensor
    lam: float
    target: float = 0.0


def frame_rate_bits(model, y, z=None, y_prev=None):
    """Model bits of (y, z) at (possibly noisy) continuous positions."""
    if model.config.conditional:
        params = model.hyper_decode(z, y_prev)
        return rate_nll(gmm_likelihood(y, params)) + rate_nll(model.prior_z.likelihood(z))
    return rate_nll(model.prior_y.likelihood(y))


def rd_loss(model, x, y_noisy, z_noisy, lam, target=0.0, y_prev=None):
    """MSE + lam * max(bpp, target) for a batch of frames sharing one context.

    The reconstruction is not clamped here so that gradients stay alive.
    """
    x = T.as_tensor(x)
    x_hat = model.image_decode(y_noisy)
    distortion = T.mean(T.square(x_hat - x))
    if y_prev is None:
        y_prev = Tensor(np.zeros(y_noisy.shape))
    bits = frame_rate_bits(model, y_noisy, z_noisy, y_prev)
    B, _, H, W = x.shape
    bpp = bits * (1.0 / (B * H * W))
    rate = rate_clamp(bpp, target) if target > 0 else bpp
    total = distortion + rate * lam
    return RdLoss(distortion, bits, bpp, total, lam, target)


# ---------------------------------------------------------------------------
# internal learning
# ---------------------------------------------------------------------------

@dataclass
class InternalResult:
    y: LatentCode
    z: LatentCode
    stats: dict


def weights_digest(model, prefixes=("dec.", "hdec.", "prior_")):
    h = hashlib.sha256()
    for name, t in model.params.items():
        if name.startswith(prefixes):
            h.update(name.encode())
            h.update(t.data.tobytes())
    return h.hexdigest()


def internal_objective(model, x, y, z, y_prev, lam, metric="mse"):
    """(distortion + lam * bpp) * pixels / lam: the rate-distortion objective in bits."""
    x_hat = model.image_decode(y)
    if metric == "mse":
        distortion = T.mean(T.square(x_hat - x))
    elif metric == "msssim":
        from .metrics import msssim_tensor
        distortion = 1.0 - msssim_tensor(x_hat, x)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    bits = frame_rate_bits(model, y, z, y_prev)
    H, W = x.shape[-2:]
    return distortion * (H * W / lam) + bits, distortion, bits


def internal_learn_frame(model, x, y_prev, steps=10, lr=1e-3, lam=0.01, metric="mse", index=0,
                         momentum=0.9, decay_at=8):
    """Refine (y_i, z_i) against the rate-distortion objective, decoders frozen.

    Continuous surrogates start at the encoder / hyper-encoder outputs, take
    ``steps`` SGD steps with Nesterov momentum (lr halved from ``decay_at``),
    and are rounded afterwards.
    """
    c = model.config
    x = np.asarray(x, dtype=np.float64)
    xt = Tensor(x.reshape((1,) + x.shape[-3:]))
    y0 = model.image_encode(xt).data
    yp = dequantize(y_prev).reshape((1,) + y_prev.shape)
    z0 = None
    if c.conditional:
        y0q = dequantize(quantize(y0[0], c.L)).reshape(y0.shape)
        z0 = model.hyper_encode(y0q, yp).data
    stats = {"il_steps": steps, "il_fallback": False, "il_objective": []}
    before = weights_digest(model) if steps else None

    y, z = y0.copy(), (z0.copy() if z0 is not None else None)
    vel_y, vel_z = np.zeros_like(y), (np.zeros_like(z) if z is not None else None)
    best = (math.inf, y0, z0)
    # weights are constants here; skipping their gradients also keeps .grad clean
    trainable = [t for t in model.params.values() if t.requires_grad]
    for t in trainable:
        t.requires_grad = False
    try:
        for step in range(steps + 1):
            yt = Tensor(y, requires_grad=True)
            zt = Tensor(z, requires_grad=True) if z is not None else None
            with T.Tape():
                obj, _, _ = internal_objective(model, xt, yt, zt, yp, lam, metric)
                value = obj.item()
                stats["il_objective"].append(value)
                if value < best[0]:
                    best = (value, y, z)
                if step == steps:
                    break
                T.backward(obj, wrt=[yt] + ([zt] if zt is not None else []))
            rate = lr * (0.5 if step >= decay_at else 1.0)
            vel_y = momentum * vel_y + yt.grad
            y = y - rate * (yt.grad + momentum * vel_y)
            if z is not None:
                vel_z = momentum * vel_z + zt.grad
                z = z - rate * (zt.grad + momentum * vel_z)
            if not (np.all(np.isfinite(y)) and (z is None or np.all(np.isfinite(z)))):
                raise NumericError("non-finite latent")
    except NumericError:
        stats["il_fallback"] = True
        stats["il_fallback_frame"] = index
    finally:
        for t in trainable:
            t.requires_grad = True
    # an overshooting run keeps its best iterate rather than its last one
    _, y, z = best
    stats["il_best"] = best[0]
    if steps:
        assert weights_digest(model) == before, "decoder weights changed during internal learning"

    y_code = quantize(y[0], c.L, origin=index)
    z_code = quantize(z[0], c.L, origin=index) if z is not None else None
    if steps == 0 and z is not None:
        z_code = hyper_code(model, y_code, y_prev)
    if steps:
        y_init = quantize(y0[0], c.L)
        z_init = quantize(z0[0], c.L) if z0 is not None else None
        stats["il_coded_init"] = coded_objective(model, x, y_init, z_init, y_prev, lam, metric)
        stats["il_coded_final"] = coded_objective(model, x, y_code, z_code, y_prev, lam, metric)
    return InternalResult(y_code, z_code, stats)


def coded_objective(model, x, y_code, z_code, y_prev, lam=0.01, metric="mse"):
    """The internal-learning objective at integer codes, i.e. at what is transmitted."""
    x = np.asarray(x, dtype=np.float64)
    xt = Tensor(x.reshape((1,) + x.shape[-3:]))
    y = dequantize(y_code).reshape((1,) + y_code.shape)
    z = dequantize(z_code).reshape((1,) + z_code.shape) if z_code is not None else None
    yp = dequantize(y_prev).reshape((1,) + y_prev.shape)
    return internal_objective(model, xt, y, z, yp, lam, metric)[0].item()
