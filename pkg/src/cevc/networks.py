"""Image codec, GDN layers, and the conditional hyperprior networks.

Spatial conventions: every stride-2 layer exactly halves (or doubles) even
extents. Image codec: ``num_down`` stages of 5x5 stride-2 conv with residual
blocks between. Hyperprior encoder: concat(y_i, y_prev) -> two 5x5 stride-2
convs. Hyperprior decoder: z is lifted to the latent grid with transposed
convs and residual blocks, both streams are lifted two more levels with
deconv+IGDN and fused (concat + 3x3 conv) at each level, then brought back
down with strided conv+GDN to emit mixture parameters per latent element.
Inside the hyperprior decoder every 5x5 layer is two 3x3 layers.
"""
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .entropy import FactorizedPrior
from .errors import DimensionError
from .tensor import Tensor

BETA_FLOOR = 1e-6


@dataclass(frozen=True)
class NetworkConfig:
    N: int = 32
    M: int = 24
    K: int = 3
    Nz: int = 16
    num_down: int = 4
    sigma_min: float = 0.01
    L: int = 255
    conditional: bool = True  # False: y coded under a factorized prior, no z
    codec_dtype: str = "float32"  # image encoder/decoder only; entropy path is float64

    def __post_init__(self):
        for name in ("N", "M", "K", "Nz", "num_down", "L"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.sigma_min <= 0:
            raise ValueError("sigma_min must be positive")
        if self.codec_dtype not in ("float32", "float64"):
            raise ValueError("codec_dtype must be float32 or float64")

    @property
    def factor(self):
        return 2 ** self.num_down

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class GmmParams:
    """Mixture parameters, each a Tensor [B, K, N, h, w]."""

    weights: Tensor
    means: Tensor
    scales: Tensor

    def flat(self, index=0):
        """[E, K] numpy views for one batch item, E = N*h*w in C-order."""
        def f(t):
            a = t.data[index]
            return a.reshape(a.shape[0], -1).T
        return f(self.weights), f(self.means), f(self.scales)


class ParamStore:
    """Ordered registry of named trainable tensors."""

    def __init__(self):
        self._items = OrderedDict()

    def add(self, name, value):
        if name in self._items:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)
        self._items[name] = t
        return t

    def __getitem__(self, name):
        return self._items[name]

    def __contains__(self, name):
        return name in self._items

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def items(self):
        return self._items.items()

    def values(self):
        return self._items.values()

    def names(self):
        return list(self._items)

    def zero_grad(self):
        for t in self._items.values():
            t.grad = None

    def count(self):
        return sum(t.size for t in self._items.values())


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

LEAKY_GAIN = math.sqrt(2.0 / (1.0 + T.LEAKY_SLOPE ** 2))


def _uniform_init(rng, shape, fan_in, gain):
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_conv(ps, rng, name, cin, cout, k, transpose=False, gain=LEAKY_GAIN, stride=1):
    """Uniform fan-in init; a stride-s transposed conv sees cin*k*k/s^2 inputs per output."""
    shape = (cin, cout, k, k) if transpose else (cout, cin, k, k)
    fan_in = cin * k * k / (stride * stride if transpose else 1)
    ps.add(f"{name}.w", _uniform_init(rng, shape, fan_in, gain))
    ps.add(f"{name}.b", np.zeros(cout))


def add_resblock(ps, rng, name, ch):
    # the residual branch starts small so each block is close to identity
    add_conv(ps, rng, f"{name}.c1", ch, ch, 3)
    add_conv(ps, rng, f"{name}.c2", ch, ch, 3, gain=0.1)


def add_gdn(ps, name, ch):
    ps.add(f"{name}.beta", np.full(ch, math.log(math.expm1(1.0 - BETA_FLOOR))))
    ps.add(f"{name}.gamma", math.sqrt(0.1) * np.eye(ch))


def gdn_params(ps, name):
    """Effective (beta, gamma): beta = floor + softplus(raw), gamma = raw**2."""
    beta = T.softplus(ps[f"{name}.beta"]) + BETA_FLOOR
    gamma = T.square(ps[f"{name}.gamma"])
    return beta, gamma


def _norm_pool(x, beta, gamma):
    C = x.shape[1]
    if gamma.shape != (C, C) or beta.shape != (C,):
        raise DimensionError(f"GDN parameters do not match {C} channels")
    return T.conv2d(T.square(x), T.reshape(gamma, (C, C, 1, 1)), beta)


def gdn(x, beta, gamma):
    """x_c / sqrt(beta_c + sum_c' gamma[c, c'] x_c'^2)."""
    return x / T.sqrt(_norm_pool(x, beta, gamma))


def igdn(x, beta, gamma):
    """x_c * sqrt(beta_c + sum_c' gamma[c, c'] x_c'^2)."""
    return x * T.sqrt(_norm_pool(x, beta, gamma))


def _w(ps, name, dtype):
    return T.astype(ps[f"{name}.w"], dtype), T.astype(ps[f"{name}.b"], dtype)


def conv(ps, name, x, stride=1, dtype=np.float64):
    w, b = _w(ps, name, dtype)
    k = w.shape[-1]
    return T.conv2d(x, w, b, stride, (k - 1) // 2)


def deconv(ps, name, x, stride=2, dtype=np.float64):
    w, b = _w(ps, name, dtype)
    k = w.shape[-1]
    return T.conv_transpose2d(x, w, b, stride, (k - 1) // 2)


def residual_block(x, ps, name, dtype=np.float64):
    """x + conv3x3(leaky_relu(conv3x3(x)))."""
    h = T.leaky_relu(conv(ps, f"{name}.c1", x, dtype=dtype))
    return x + conv(ps, f"{name}.c2", h, dtype=dtype)


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

class CodecModel:
    """All weights of one trained codec plus the forward passes over them."""

    def __init__(self, config=None, seed=0):
        self.config = config or NetworkConfig()
        self.params = ParamStore()
        self.seed = seed
        self._hash = None
        self._build(np.random.default_rng(seed))

    def freeze(self):
        """Round every weight to float32 (the checkpoint precision)."""
        for t in self.params._items.values():
            t.data = t.data.astype(np.float32).astype(np.float64)

    def invalidate(self):
        self._hash = None

    # -- construction ----------------------------------------------------
    def _build(self, rng):
        c, ps = self.config, self.params
        N, M, Nz = c.N, c.M, c.Nz
        for s in range(c.num_down):
            add_conv(ps, rng, f"enc.down{s}", 3 if s == 0 else N, N, 5, gain=1.0)
            if s < c.num_down - 1:
                add_resblock(ps, rng, f"enc.res{s}", N)
        for s in range(c.num_down):
            add_conv(ps, rng, f"dec.up{s}", N, 3 if s == c.num_down - 1 else N, 5, transpose=True,
                     gain=1.0, stride=2)
            if s < c.num_down - 1:
                add_resblock(ps, rng, f"dec.res{s}", N)
        ps[f"dec.up{c.num_down - 1}.b"].data[:] = 0.5

        if not c.conditional:
            self.prior_y = FactorizedPrior(ps, "prior_y", N, rng=rng)
            self.prior_z = None
            return

        add_conv(ps, rng, "henc.down0", 2 * N, N, 5)
        add_resblock(ps, rng, "henc.res0", N)
        add_conv(ps, rng, "henc.down1", N, Nz, 5)

        # z lifted to the latent grid
        add_conv(ps, rng, "hdec.zup0", Nz, N, 5, transpose=True, stride=2)
        add_resblock(ps, rng, "hdec.zres0", N)
        add_conv(ps, rng, "hdec.zup1", N, N, 5, transpose=True, stride=2)
        add_resblock(ps, rng, "hdec.zres1", N)
        add_conv(ps, rng, "hdec.fuse0", 2 * N, N, 3)
        # two levels above the latent grid; the top level has 5 channels
        widths = [N, M, 5]
        for lvl in (1, 2):
            cin, cout = widths[lvl - 1], widths[lvl]
            for stream in ("y", "z"):
                add_conv(ps, rng, f"hdec.{stream}up{lvl}a", cin, cout, 3, transpose=True, stride=2)
                add_conv(ps, rng, f"hdec.{stream}up{lvl}b", cout, cout, 3)
                add_gdn(ps, f"hdec.{stream}igdn{lvl}", cout)
            add_conv(ps, rng, f"hdec.fuse{lvl}", 2 * cout, cout, 3)
        # back down to the latent grid
        for lvl in (2, 1):
            cin, cout = widths[lvl], widths[lvl - 1]
            add_conv(ps, rng, f"hdec.down{lvl}a", cin, cout, 3)
            add_conv(ps, rng, f"hdec.down{lvl}b", cout, cout, 3)
            add_gdn(ps, f"hdec.gdn{lvl}", cout)
        add_conv(ps, rng, "hdec.head0", 2 * N, N, 3)
        add_conv(ps, rng, "hdec.head1", N, 3 * c.K * N, 3)
        ps["hdec.head1.w"].data *= 0.1
        self.prior_z = FactorizedPrior(ps, "prior_z", Nz, rng=rng)
        self.prior_y = None

    # -- image codec -----------------------------------------------------
    @property
    def _cdt(self):
        return np.float32 if self.config.codec_dtype == "float32" else np.float64

    def image_encode(self, x):
        """x [B, 3, H, W] in [0, 1] -> continuous latent [B, N, H/2^d, W/2^d]."""
        x = T.as_tensor(x)
        c = self.config
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected [B, 3, H, W] frames, got {x.shape}")
        if x.shape[2] % c.factor or x.shape[3] % c.factor:
            raise DimensionError(f"frame {x.shape[2]}x{x.shape[3]} not divisible by {c.factor}")
        dt = self._cdt
        h = T.astype(x, dt)
        for s in range(c.num_down):
            h = conv(self.params, f"enc.down{s}", h, stride=2, dtype=dt)
            if s < c.num_down - 1:
                h = residual_block(h, self.params, f"enc.res{s}", dt)
        return T.astype(h, np.float64)

    def image_decode(self, y):
        """Latent [B, N, h, w] -> unclamped reconstruction [B, 3, h*2^d, w*2^d]."""
        y = T.as_tensor(y)
        c = self.config
        if y.ndim != 4 or y.shape[1] != c.N:
            raise DimensionError(f"expected [B, {c.N}, h, w] latent, got {y.shape}")
        dt = self._cdt
        h = T.astype(y, dt)
        for s in range(c.num_down):
            h = deconv(self.params, f"dec.up{s}", h, dtype=dt)
            if s < c.num_down - 1:
                h = residual_block(h, self.params, f"dec.res{s}", dt)
        return T.astype(h, np.float64)

    # -- conditional entropy networks -------------------------------------
    def hyper_encode(self, y, y_prev):
        y, y_prev = T.as_tensor(y), T.as_tensor(y_prev)
        if y.shape != y_prev.shape:
            raise DimensionError(f"hyper_encode: {y.shape} vs previous {y_prev.shape}")
        ps = self.params
        h = conv(ps, "henc.down0", T.concat([y, y_prev], axis=1), stride=2)
        h = residual_block(h, ps, "henc.res0")
        return conv(ps, "henc.down1", h, stride=2)

    def hyper_decode(self, z, y_prev):
        z, y_prev = T.as_tensor(z), T.as_tensor(y_prev)
        c, ps = self.config, self.params
        B, N, h, w = y_prev.shape
        if N != c.N or z.shape != (B, c.Nz, _half(_half(h)), _half(_half(w))):
            raise DimensionError(f"hyper_decode: z {z.shape} inconsistent with previous latent {y_prev.shape}")

        zf = deconv(ps, "hdec.zup0", z)
        zf = residual_block(zf, ps, "hdec.zres0")
        zf = deconv(ps, "hdec.zup1", zf)
        zf = residual_block(zf, ps, "hdec.zres1")
        if zf.shape[2:] != (h, w):
            zf = zf[:, :, :h, :w]
        f0 = T.leaky_relu(conv(ps, "hdec.fuse0", T.concat([y_prev, zf], axis=1)))

        zcur, fused = zf, f0
        for lvl in (1, 2):
            streams = {}
            for name, src in (("y", fused), ("z", zcur)):
                u = deconv(ps, f"hdec.{name}up{lvl}a", src)
                u = conv(ps, f"hdec.{name}up{lvl}b", u)
                streams[name] = igdn(u, *gdn_params(ps, f"hdec.{name}igdn{lvl}"))
            zcur = streams["z"]
            fused = conv(ps, f"hdec.fuse{lvl}", T.concat([streams["y"], streams["z"]], axis=1))

        d = fused
        for lvl in (2, 1):
            d = conv(ps, f"hdec.down{lvl}a", d, stride=2)
            d = conv(ps, f"hdec.down{lvl}b", d)
            d = gdn(d, *gdn_params(ps, f"hdec.gdn{lvl}"))
        d = T.leaky_relu(conv(ps, "hdec.head0", T.concat([d, f0], axis=1)))
        raw = T.reshape(conv(ps, "hdec.head1", d), (B, 3, c.K, N, h, w))

        weights = T.softmax(raw[:, 0], axis=1)
        prev = T.expand(T.reshape(y_prev, (B, 1, N, h, w)), (B, c.K, N, h, w))
        means = raw[:, 1] + prev
        scales = T.softplus(raw[:, 2]) + c.sigma_min
        return GmmParams(weights, means, scales)

    def latent_shape(self, H, W):
        f = self.config.factor
        return (self.config.N, H // f, W // f)

    def hyper_shape(self, H, W):
        _, h, w = self.latent_shape(H, W)
        return (self.config.Nz, _half(_half(h)), _half(_half(w)))


def _half(n):
    return -(-n // 2)
