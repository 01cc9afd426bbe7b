"""Probability models for the hyper code z and the frame code y.

The hyper code uses a per-channel learned monotone CDF; the frame code uses a
discretized Gaussian mixture whose parameters come from the hyperprior
decoder. Masses are CDF differences over unit bins; the mass below
``-L-0.5`` and above ``L+0.5`` is folded into the edge symbols so that every
pmf over the ``2L+1`` symbol alphabet is exactly normalized.
"""
import math

import numpy as np
from scipy import special

from . import tensor as T
from .errors import DomainError
from .tensor import Tensor

P_MIN = 2.0 ** -24


def _softplus_inv(v):
    return math.log(math.expm1(v))


class FactorizedPrior:
    """Per-channel monotone CDF ``c_j(x) = sigmoid(f_j(x))``.

    ``f_j`` is a stack of ``len(filters)+1`` small dense layers with
    softplus-constrained matrices and tanh gates, so it is non-decreasing in x.
    Parameters live in the shared :class:`~cevc.networks.ParamStore` under
    ``prefix``.
    """

    def __init__(self, params, prefix, channels, filters=(3, 3, 3), init_scale=10.0, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.prefix = prefix
        self.channels = channels
        self.params = params
        dims = (1,) + tuple(filters) + (1,)
        self.depth = len(dims) - 1
        scale = init_scale ** (1.0 / self.depth)
        for k in range(self.depth):
            init = _softplus_inv(1.0 / scale / dims[k + 1])
            params.add(f"{prefix}.H{k}", np.full((channels, dims[k + 1], dims[k]), init))
            params.add(f"{prefix}.b{k}", rng.uniform(-0.5, 0.5, size=(channels, dims[k + 1], 1)))
            if k < self.depth - 1:
                params.add(f"{prefix}.a{k}", np.zeros((channels, dims[k + 1], 1)))

    def logits(self, x):
        """x: Tensor [C, n] -> CDF logits [C, n]."""
        C, n = x.shape
        h = T.reshape(x, (C, 1, n))
        for k in range(self.depth):
            H = T.softplus(self.params[f"{self.prefix}.H{k}"])
            h = T.matmul(H, h)
            b = self.params[f"{self.prefix}.b{k}"]
            h = h + T.expand(b, h.shape)
            if k < self.depth - 1:
                a = T.tanh(self.params[f"{self.prefix}.a{k}"])
                h = h + T.expand(a, h.shape) * T.tanh(h)
        return T.reshape(h, (C, n))

    def cdf(self, x):
        return T.sigmoid(self.logits(x))

    def likelihood(self, z, L=None):
        """Interval masses ``c(z+0.5) - c(z-0.5)`` for z [B, C, h, w].

        With ``L`` given, symbols at the alphabet edges also receive the tail
        mass beyond them.
        """
        z = T.as_tensor(z)
        B, C, h, w = z.shape
        if C != self.channels:
            raise DomainError(f"prior has {self.channels} channels, code has {C}")
        flat = T.reshape(T.transpose(z, (1, 0, 2, 3)), (C, B * h * w))
        lo = self.logits(flat - 0.5)
        hi = self.logits(flat + 0.5)
        if L is not None:
            zd = flat.data
            big = 1e4
            lo = T.add(T.mul(lo, (zd > -L).astype(np.float64)), Tensor(np.where(zd > -L, 0.0, -big)))
            hi = T.add(T.mul(hi, (zd < L).astype(np.float64)), Tensor(np.where(zd < L, 0.0, big)))
        # evaluate on the side of the median where sigmoid keeps precision
        s = -np.sign(lo.data + hi.data)
        s[s == 0] = 1.0
        d = T.sigmoid(hi * s) - T.sigmoid(lo * s)
        mass = d * np.sign(d.data + (d.data == 0))
        return T.transpose(T.reshape(mass, (C, B, h, w)), (1, 0, 2, 3))

    def pmf_table(self, L):
        """Full per-channel pmf [C, 2L+1] with tails folded into the edge symbols."""
        edges = np.arange(-L, L + 2, dtype=np.float64) - 0.5
        x = Tensor(np.tile(edges, (self.channels, 1)))
        logit = self.logits(x).data
        lo, hi = logit[:, :-1], logit[:, 1:]
        # above the median take differences of the survival function instead
        pmf = np.where(lo + hi > 0, special.expit(-lo) - special.expit(-hi),
                       special.expit(hi) - special.expit(lo))
        pmf[:, 0] += special.expit(logit[:, 0])
        pmf[:, -1] += special.expit(-logit[:, -1])
        return np.maximum(pmf, 0.0)


def factorized_cdf(x, prior, channel):
    """CDF of one channel of ``prior`` evaluated at every entry of x."""
    x = T.as_tensor(x)
    flat = T.reshape(x, (1, x.size))
    full = T.concat([flat] * prior.channels, axis=0) if prior.channels > 1 else flat
    out = T.sigmoid(prior.logits(full))
    return T.reshape(out[channel: channel + 1], x.shape)


def factorized_pmf(z, prior, L):
    """Masses of integer hyper symbols z [B, C, h, w] (tails folded)."""
    return prior.likelihood(z, L=L)


# ---------------------------------------------------------------------------
# discretized Gaussian mixture
# ---------------------------------------------------------------------------

def _component_masses(y, mu, sigma, L):
    # y broadcast against [.., K, ..]; returns per-component interval masses and the standardized edges
    c = y - mu
    t_hi = (c + 0.5) / sigma
    t_lo = (c - 0.5) / sigma
    if L is not None:
        t_lo = np.where(y <= -L, -np.inf, t_lo)
        t_hi = np.where(y >= L, np.inf, t_hi)
    flip = c > 0
    m = np.where(flip, special.ndtr(-t_lo) - special.ndtr(-t_hi), special.ndtr(t_hi) - special.ndtr(t_lo))
    return np.maximum(m, 0.0), t_hi, t_lo


def _pdf(t):
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.exp(-0.5 * t * t) / math.sqrt(2.0 * math.pi)
    return np.where(np.isfinite(t), out, 0.0)


def gmm_likelihood(y, params, L=None):
    """Mixture interval mass ``g(y+0.5) - g(y-0.5)`` per latent element.

    ``y``: Tensor [B, N, h, w]; ``params``: GmmParams with [B, K, N, h, w]
    weights, means, scales. Differentiable in y and all three mixture tensors.
    With ``L`` given, edge symbols absorb the tail mass.
    """
    y = T.as_tensor(y)
    w, mu, sigma = params.weights, params.means, params.scales
    yd = y.data[:, None]
    s = sigma.data
    if np.any(s <= 0):
        raise DomainError("mixture scales must be positive")
    m, t_hi, t_lo = _component_masses(yd, mu.data, s, L)
    wd = w.data
    out = (wd * m).sum(axis=1)

    def bw(g):
        g5 = g[:, None]
        dphi = (_pdf(t_hi) - _pdf(t_lo)) / s
        t_phi = (np.where(np.isfinite(t_hi), _pdf(t_hi) * np.nan_to_num(t_hi), 0.0)
                 - np.where(np.isfinite(t_lo), _pdf(t_lo) * np.nan_to_num(t_lo), 0.0)) / s
        gy = (g5 * wd * dphi).sum(axis=1)
        gw = g5 * m
        gmu = -g5 * wd * dphi
        gs = -g5 * wd * t_phi
        return gy, gw, gmu, gs

    return T.custom(out, (y, w, mu, sigma), bw, "gmm_likelihood")


def gmm_pmf(y, params, L):
    """Masses of integer codes y under the mixture, tails folded into ``±L``."""
    return gmm_likelihood(y, params, L=L)


def gmm_pmf_table(weights, means, scales, L):
    """Full pmf [E, 2L+1] per latent element from flat [E, K] mixture arrays."""
    edges = np.arange(-L, L + 2, dtype=np.float64) - 0.5
    t = (edges[None, None, :] - means[:, :, None]) / scales[:, :, None]
    cdf = (weights[:, :, None] * special.ndtr(t)).sum(axis=1)
    # upper half from the survival function to keep precision near 1
    sf = (weights[:, :, None] * special.ndtr(-t)).sum(axis=1)
    pmf = np.diff(cdf, axis=-1)
    upper = -np.diff(sf, axis=-1)
    use_sf = (edges[None, :-1] + 0.5) > means.mean(axis=1, keepdims=True)
    pmf = np.where(use_sf, upper, pmf)
    pmf[:, 0] += cdf[:, 0]
    pmf[:, -1] += sf[:, -1]
    return np.maximum(pmf, 0.0)


# ---------------------------------------------------------------------------
# rate terms
# ---------------------------------------------------------------------------

def rate_nll(masses, p_min=P_MIN):
    """Total bits ``-sum log2 p`` with masses floored at ``p_min``."""
    masses = T.as_tensor(masses)
    floored = T.lower_bound(masses, p_min)
    if np.any(floored.data <= 0):
        raise DomainError("non-positive mass after floor")
    return T.sum_(T.log2(floored)) * -1.0


def rate_clamp(rate, target):
    """``max(rate, target)``; at a tie the gradient passes through."""
    if target < 0:
        raise DomainError("target rate must be non-negative")
    return T.maximum_scalar(rate, target)
