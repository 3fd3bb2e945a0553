"""Gated convolution, its recursive form, and the residual-recursive variant.

A single gated convolution multiplies a carrier feature with a depthwise-
convolved neighbour feature (one-order spatial interaction).  The recursive
form chains ``n`` such interactions over neighbour features of doubling
channel width (an inverted pyramid), and the residual variant adds a skip
path and a stabilizing scale ``lambda`` at every order:

    p_{k+1} = (s_k + f_k(q_k) + f_k(q_k) * s_k) / lambda,   s_k = g_k(p_k)

with ``g_0`` the identity and ``g_k`` a pointwise projection to the next
order's width.  Input and output channel counts are always equal.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .layers import BatchNorm2d, Conv2d, DepthwiseConv2d, Layer, LayerList, _numel
from .tensor import DomainError, ShapeError

DW_KERNEL = 7  # depthwise spatial-mixing kernel, fixed for this operator family


@dataclass(frozen=True)
class ChannelScheme:
    """Channel budget of an n-order interaction over c module channels.

    ``c_k[k] = c / 2**(n-1-k)`` doubles per order, and the carrier width
    ``c_0`` plus the neighbour total ``c_q`` equals ``2c`` exactly.
    """

    c: int
    n: int
    c_k: tuple
    c_0: int
    c_q: int


def build_scheme(c, n):
    """Construct the inverted-pyramid channel scheme for order ``n``."""
    if n < 1:
        raise DomainError(f"interaction order must be >= 1, got {n}")
    divisor = 1 << (n - 1)
    if c % divisor:
        raise DomainError(f"channels {c} not divisible by 2**(n-1) = {divisor}")
    c_k = tuple(c // (1 << (n - 1 - k)) for k in range(n))
    c_0 = c_k[0]
    c_q = sum(c_k)
    assert c_0 + c_q == 2 * c
    return ChannelScheme(c=c, n=n, c_k=c_k, c_0=c_0, c_q=c_q)


class _OrderProjection(Layer):
    """Pointwise projection g_k: conv 1x1 (c_prev -> c_next), BN, SiLU."""

    def __init__(self, c_prev, c_next):
        super().__init__()
        self.conv = Conv2d(c_prev, c_next, 1, bias=False)
        self.bn = BatchNorm2d(c_next)

    def forward(self, x):
        return T.silu(self.bn(self.conv(x)))

    def profile(self, shape, name, rows):
        shape = self.conv.profile(shape, f"{name}.conv", rows)
        shape = self.bn.profile(shape, f"{name}.bn", rows)
        rows.add(f"{name}.silu", shape, 0, _numel(shape))
        return shape


class ResGnConv(Layer):
    """Recursive (residual) gated convolution over C channels.

    ``residual_enabled=False`` gives the plain recursion
    ``p_{k+1} = f_k(q_k) * g_k(p_k)``; with residuals enabled each order adds
    the skip terms and divides by ``lam``.  ``n=1`` without residuals is the
    plain one-order gated convolution.
    """

    def __init__(self, c, n=2, lam=3.0, residual_enabled=True):
        super().__init__()
        if lam <= 0:
            raise DomainError(f"lambda must be positive, got {lam}")
        self.scheme = build_scheme(c, n)
        self.lam = float(lam)
        self.residual_enabled = bool(residual_enabled)
        self.phi_in = Conv2d(c, 2 * c, 1, bias=True)
        self.dw = DepthwiseConv2d(self.scheme.c_q, DW_KERNEL, bias=True)
        self.g_k = LayerList([_OrderProjection(self.scheme.c_k[k - 1], self.scheme.c_k[k])
                              for k in range(1, n)])
        self.phi_out = Conv2d(c, c, 1, bias=True)

    def forward(self, x):
        y, _ = self._forward_impl(x, want_intermediates=False)
        return y

    def forward_detailed(self, x):
        """Forward that also returns per-order intermediates for verification."""
        return self._forward_impl(x, want_intermediates=True)

    def _forward_impl(self, x, want_intermediates):
        sch = self.scheme
        if x.shape[1] != sch.c:
            raise ShapeError(f"expected {sch.c} channels, got {x.shape[1]}")
        proj = self.phi_in(x)
        p0, q_bundle = T.split_channels(proj, [sch.c_0, sch.c_q])
        fq = T.split_channels(self.dw(q_bundle), list(sch.c_k))
        trace = {"p": [p0], "s": [], "fq": fq} if want_intermediates else None
        p = p0
        for k in range(sch.n):
            s = p if k == 0 else self.g_k[k - 1](p)
            interaction = T.mul(fq[k], s)
            if self.residual_enabled:
                p = T.scale(T.add(T.add(s, fq[k]), interaction), 1.0 / self.lam)
            else:
                p = interaction
            if want_intermediates:
                trace["s"].append(s)
                trace["p"].append(p)
        return self.phi_out(p), trace

    def profile(self, shape, name, rows):
        sch = self.scheme
        n_, c, h, w = shape
        if c != sch.c:
            raise ShapeError(f"{name}: expected {sch.c} channels, got {c}")
        self.phi_in.profile(shape, f"{name}.phi_in", rows)
        self.dw.profile((n_, sch.c_q, h, w), f"{name}.dw", rows)
        glue = 0
        for k in range(sch.n):
            step = (n_, sch.c_k[k], h, w)
            if k > 0:
                self.g_k[k - 1].profile((n_, sch.c_k[k - 1], h, w),
                                        f"{name}.g_k.{k - 1}", rows)
            glue += _numel(step)                       # interaction multiply
            if self.residual_enabled:
                glue += 3 * _numel(step)               # two adds and the 1/lambda scale
        rows.add(f"{name}.ops", shape, 0, glue)
        return self.phi_out.profile(shape, f"{name}.phi_out", rows)


def gconv_forward(layer, x):
    """One-order gated convolution: requires n=1 and residuals disabled."""
    if layer.scheme.n != 1 or layer.residual_enabled:
        raise DomainError("gconv_forward requires an order-1 layer without residuals")
    return layer.forward(x)


def gn_conv_forward(layer, x):
    """Plain recursive gated convolution: requires residuals disabled."""
    if layer.residual_enabled:
        raise DomainError("gn_conv_forward requires residuals disabled")
    return layer.forward(x)


def res_gn_conv_forward(layer, x):
    """Residual recursive gated convolution: requires residuals enabled."""
    if not layer.residual_enabled:
        raise DomainError("res_gn_conv_forward requires residuals enabled")
    return layer.forward(x)
