"""Composite network blocks: stem, pooling, cross-stage and attention modules."""

from __future__ import annotations

from . import tensor as T
from .interactions import ResGnConv
from .layers import (
    BatchNorm2d, Conv2d, DepthwiseConv2d, Layer, LayerList, LayerNorm2d, _numel,
)
from .tensor import DomainError, ShapeError


class ConvBnSilu(Layer):
    """Convolution + batch norm + SiLU; padding is always k//2."""

    def __init__(self, c_in, c_out, k=1, stride=1):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, k, stride=stride, padding=k // 2, bias=False)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x):
        return T.silu(self.bn(self.conv(x)))

    def profile(self, shape, name, rows):
        shape = self.conv.profile(shape, f"{name}.conv", rows)
        shape = self.bn.profile(shape, f"{name}.bn", rows)
        rows.add(f"{name}.silu", shape, 0, _numel(shape))
        return shape


class Focus(Layer):
    """Stem: 2x2 space-to-depth (c -> 4c, h/2, w/2) then ConvBnSilu."""

    def __init__(self, c_in, c_out, k=3):
        super().__init__()
        self.conv = ConvBnSilu(4 * c_in, c_out, k)

    def forward(self, x):
        return self.conv(T.space_to_depth_2x2(x))

    def profile(self, shape, name, rows):
        n, c, h, w = shape
        if h % 2 or w % 2:
            raise ShapeError(f"{name}: spatial dims must be even, got {h}x{w}")
        return self.conv.profile((n, 4 * c, h // 2, w // 2), f"{name}.conv", rows)


class Spp(Layer):
    """Spatial pyramid pooling: parallel max pools at k in {5, 9, 13}."""

    def __init__(self, c_in, c_out, kernels=(5, 9, 13)):
        super().__init__()
        c_hidden = c_in // 2
        self.kernels = tuple(kernels)
        self.cv1 = ConvBnSilu(c_in, c_hidden, 1)
        self.cv2 = ConvBnSilu(c_hidden * (len(self.kernels) + 1), c_out, 1)

    def forward(self, x):
        x = self.cv1(x)
        pools = [T.max_pool(x, k, stride=1, padding=k // 2) for k in self.kernels]
        return self.cv2(T.concat_channels([x] + pools))

    def profile(self, shape, name, rows):
        shape = self.cv1.profile(shape, f"{name}.cv1", rows)
        n, c, h, w = shape
        return self.cv2.profile((n, c * (len(self.kernels) + 1), h, w),
                                f"{name}.cv2", rows)


class Bottleneck(Layer):
    """Residual bottleneck: 1x1 then 3x3 ConvBnSilu with a skip."""

    def __init__(self, c, shortcut=True):
        super().__init__()
        self.cv1 = ConvBnSilu(c, c, 1)
        self.cv2 = ConvBnSilu(c, c, 3)
        self.shortcut = shortcut

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return T.add(x, y) if self.shortcut else y

    def profile(self, shape, name, rows):
        self.cv1.profile(shape, f"{name}.cv1", rows)
        self.cv2.profile(shape, f"{name}.cv2", rows)
        if self.shortcut:
            rows.add(f"{name}.add", shape, 0, _numel(shape))
        return shape


class C3(Layer):
    """Cross-stage block with plain bottlenecks on the partial branch."""

    def __init__(self, c_in, c_out, depth=1):
        super().__init__()
        if c_out % 2:
            raise DomainError(f"c_out must be even, got {c_out}")
        c_hidden = c_out // 2
        self.cv1 = ConvBnSilu(c_in, c_hidden, 1)
        self.cv2 = ConvBnSilu(c_in, c_hidden, 1)
        self.blocks = LayerList([Bottleneck(c_hidden) for _ in range(depth)])
        self.cv3 = ConvBnSilu(c_out, c_out, 1)

    def forward(self, x):
        a = self.cv1(x)
        for blk in self.blocks:
            a = blk(a)
        b = self.cv2(x)
        return self.cv3(T.concat_channels([a, b]))

    def profile(self, shape, name, rows):
        inner = self.cv1.profile(shape, f"{name}.cv1", rows)
        for i, blk in enumerate(self.blocks):
            inner = blk.profile(inner, f"{name}.blocks.{i}", rows)
        self.cv2.profile(shape, f"{name}.cv2", rows)
        n, c, h, w = inner
        return self.cv3.profile((n, 2 * c, h, w), f"{name}.cv3", rows)


class InvertedBottleneck(Layer):
    """Pre-normalized expand / depthwise / project block with an outer skip.

    Composition: x + C2(D(C1(x))) with C1 = conv1x1(bn(x)),
    D = dw3x3(gelu(bn(.))), C2 = conv1x1(gelu(bn(.))).
    """

    def __init__(self, c, expansion=4):
        super().__init__()
        ce = c * expansion
        self.c = c
        self.bn1 = BatchNorm2d(c)
        self.c1 = Conv2d(c, ce, 1, bias=True)
        self.bn2 = BatchNorm2d(ce)
        self.dw = DepthwiseConv2d(ce, 3, bias=True)
        self.bn3 = BatchNorm2d(ce)
        self.c2 = Conv2d(ce, c, 1, bias=True)

    def forward(self, x):
        if x.shape[1] != self.c:
            raise ShapeError(f"expected {self.c} channels, got {x.shape[1]}")
        y = self.c1(self.bn1(x))
        y = self.dw(T.gelu(self.bn2(y)))
        y = self.c2(T.gelu(self.bn3(y)))
        return T.add(x, y)

    def profile(self, shape, name, rows):
        self.bn1.profile(shape, f"{name}.bn1", rows)
        wide = self.c1.profile(shape, f"{name}.c1", rows)
        self.bn2.profile(wide, f"{name}.bn2", rows)
        rows.add(f"{name}.gelu1", wide, 0, _numel(wide))
        wide = self.dw.profile(wide, f"{name}.dw", rows)
        self.bn3.profile(wide, f"{name}.bn3", rows)
        rows.add(f"{name}.gelu2", wide, 0, _numel(wide))
        self.c2.profile(wide, f"{name}.c2", rows)
        rows.add(f"{name}.add", shape, 0, _numel(shape))
        return shape


class DrsiBlock(Layer):
    """Inverted bottleneck followed by layer-normalized gated interactions,
    each under its own skip: y = I(x) + rgc(ln(I(x)))."""

    def __init__(self, c, order=2, lam=3.0, residual_enabled=True, expansion=4):
        super().__init__()
        self.invbn = InvertedBottleneck(c, expansion=expansion)
        self.ln = LayerNorm2d(c)
        self.rgc = ResGnConv(c, n=order, lam=lam, residual_enabled=residual_enabled)

    def forward(self, x):
        inner = self.invbn(x)
        return T.add(inner, self.rgc(self.ln(inner)))

    def profile(self, shape, name, rows):
        shape = self.invbn.profile(shape, f"{name}.invbn", rows)
        self.ln.profile(shape, f"{name}.ln", rows)
        self.rgc.profile(shape, f"{name}.rgc", rows)
        rows.add(f"{name}.add", shape, 0, _numel(shape))
        return shape


class C3dr(Layer):
    """Cross-stage module whose partial branch is a chain of DRSI blocks."""

    def __init__(self, c_in, c_out, depth, order=2, lam=3.0,
                 residual_enabled=True, expansion=4):
        super().__init__()
        if c_out % 2:
            raise DomainError(f"c_out must be even, got {c_out}")
        if depth < 1:
            raise DomainError(f"depth must be >= 1, got {depth}")
        c_hidden = c_out // 2
        self.conv_cross = ConvBnSilu(c_in, c_hidden, 1)
        self.conv_main = ConvBnSilu(c_in, c_hidden, 1)
        self.blocks = LayerList([
            DrsiBlock(c_hidden, order=order, lam=lam,
                      residual_enabled=residual_enabled, expansion=expansion)
            for _ in range(depth)])
        self.conv_final = ConvBnSilu(c_out, c_out, 1)

    def forward(self, x):
        cross = self.conv_cross(x)
        for blk in self.blocks:
            cross = blk(cross)
        main = self.conv_main(x)
        return self.conv_final(T.concat_channels([main, cross]))

    def profile(self, shape, name, rows):
        inner = self.conv_cross.profile(shape, f"{name}.conv_cross", rows)
        for i, blk in enumerate(self.blocks):
            inner = blk.profile(inner, f"{name}.blocks.{i}", rows)
        self.conv_main.profile(shape, f"{name}.conv_main", rows)
        n, c, h, w = inner
        return self.conv_final.profile((n, 2 * c, h, w), f"{name}.conv_final", rows)


class Cbam(Layer):
    """Channel attention then spatial attention, both sigmoid-gated.

    The channel module gates with a shared two-layer pointwise MLP over the
    global average- and max-pooled descriptors; the spatial module gates with
    a k x k convolution over the channel-mean and channel-max maps.
    """

    def __init__(self, c, reduction=16, sam_kernel=7):
        super().__init__()
        if c < reduction:
            raise DomainError(
                f"channels ({c}) must be >= the reduction ratio ({reduction})")
        hidden = c // reduction
        self.c = c
        self.fc1 = Conv2d(c, hidden, 1, bias=True)
        self.fc2 = Conv2d(hidden, c, 1, bias=True)
        self.sam_conv = Conv2d(2, 1, sam_kernel, padding=sam_kernel // 2, bias=True)

    def _mlp(self, pooled):
        return self.fc2(T.relu(self.fc1(pooled)))

    def forward(self, x):
        if x.shape[1] != self.c:
            raise ShapeError(f"expected {self.c} channels, got {x.shape[1]}")
        cam = T.sigmoid(T.add(self._mlp(T.global_avg_pool(x)),
                              self._mlp(T.global_max_pool(x))))
        y = T.broadcast_mul(x, cam)
        maps = T.concat_channels([T.channel_mean(y), T.channel_max(y)])
        sam = T.sigmoid(self.sam_conv(maps))
        return T.broadcast_mul(y, sam)

    def profile(self, shape, name, rows):
        n, c, h, w = shape
        pooled = (n, c, 1, 1)
        glue = _numel(shape)                    # average pool reads the input
        hid = self.fc1.profile(pooled, f"{name}.fc1", rows)
        rows.add(f"{name}.relu", hid, 0, _numel(hid))
        self.fc2.profile(hid, f"{name}.fc2", rows)
        # the shared MLP runs a second time over the max-pooled descriptor
        glue += c * hid[1] + _numel(hid) + hid[1] * c
        glue += 2 * _numel(pooled)              # descriptor add + sigmoid
        glue += _numel(shape)                   # channel gate multiply
        glue += _numel(shape)                   # channel-mean map reads y
        self.sam_conv.profile((n, 2, h, w), f"{name}.sam_conv", rows)
        glue += _numel((n, 1, h, w))            # spatial sigmoid
        glue += _numel(shape)                   # spatial gate multiply
        rows.add(f"{name}.ops", shape, 0, glue)
        return shape
