"""Model assembly: backbone, fusion necks, detection heads and configuration.

The backbone is a five-stage cross-stage pyramid: a space-to-depth stem, four
(stride-2 conv + cross-stage block) stages emitting P2..P5, and a final
stride-2 conv + SPP + C3 stage emitting P6.  The neck fuses [P3, P4, P5, P6]
top-down then bottom-up, with the pre-upsample transform and the bottom-up
attention selected by ``neck``:

* ``pan``       - plain 1x1 reduce convs;
* ``cbam_pan``  - 1x1 reduce convs followed by channel+spatial attention;
* ``asi_pan``   - top-down attention replaced by recursive residual gated
                  convolutions, bottom-up attention kept.

Every head is a single 1x1 convolution to 3 anchors x (box 4 + objectness 1 +
class 1 + keypoint triples), emitting raw logits.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

from . import tensor as T
from .blocks import C3, C3dr, Cbam, ConvBnSilu, Focus, Spp
from .interactions import ResGnConv
from .layers import Conv2d, Layer, LayerList
from .tensor import ShapeError

NECK_KINDS = ("pan", "cbam_pan", "asi_pan")
BACKBONE_BLOCKS = ("c3dr", "c3")

# Placeholder anchor priors for smoke tests; real deployments supply their
# own dataset-derived priors through the config file.
DEFAULT_ANCHORS = (
    ((19, 27), (44, 40), (38, 94)),
    ((96, 68), (86, 152), (180, 137)),
    ((140, 301), (303, 264), (238, 542)),
    ((436, 615), (739, 380), (925, 792)),
)

VARIANT_MULTS = {"s": (0.33, 0.50), "m": (0.67, 0.75), "l": (1.00, 1.00)}


class ConfigError(ValueError):
    """Model configuration violates an invariant or carries unknown keys."""


@dataclass
class ModelConfig:
    """Declarative description of one model variant."""

    variant: str = "s"
    width_mult: float = None
    depth_mult: float = None
    base_channels: tuple = (128, 256, 512, 768, 1024)
    base_depths: tuple = (3, 9, 9, 3)
    order_n: int = 2
    lambda_: float = 3.0
    neck: str = "asi_pan"
    strides: tuple = (8, 16, 32, 64)
    anchors: tuple = DEFAULT_ANCHORS
    expansion: int = 4
    sam_kernels: dict = field(default_factory=lambda: {"top_down": 1, "bottom_up": 3})
    num_keypoints: int = 17
    channel_round: int = 8
    cbam_reduction: int = 16
    residual_interactions: bool = True
    backbone_block: str = "c3dr"
    note: str = ""

    def __post_init__(self):
        if self.variant in VARIANT_MULTS:
            d, w = VARIANT_MULTS[self.variant]
            if self.depth_mult is None:
                self.depth_mult = d
            if self.width_mult is None:
                self.width_mult = w
        elif self.variant == "custom":
            if self.width_mult is None or self.depth_mult is None:
                raise ConfigError("custom variant requires width_mult and depth_mult")
        else:
            raise ConfigError(f"unknown variant {self.variant!r}")
        self.base_channels = tuple(int(c) for c in self.base_channels)
        self.base_depths = tuple(int(d) for d in self.base_depths)
        self.strides = tuple(int(s) for s in self.strides)
        self.anchors = tuple(tuple((float(w), float(h)) for w, h in level)
                             for level in self.anchors)
        self.validate()

    def validate(self):
        if len(self.base_channels) != 5:
            raise ConfigError("base_channels must list the five stage widths")
        if len(self.base_depths) != 4:
            raise ConfigError("base_depths must list the four stage depths")
        if self.order_n < 1:
            raise ConfigError(f"order_n must be >= 1, got {self.order_n}")
        if self.lambda_ <= 0:
            raise ConfigError(f"lambda must be positive, got {self.lambda_}")
        if self.neck not in NECK_KINDS:
            raise ConfigError(f"neck must be one of {NECK_KINDS}, got {self.neck!r}")
        if self.backbone_block not in BACKBONE_BLOCKS:
            raise ConfigError(
                f"backbone_block must be one of {BACKBONE_BLOCKS}, got {self.backbone_block!r}")
        if self.strides != (8, 16, 32, 64):
            raise ConfigError(f"strides must be (8, 16, 32, 64), got {self.strides}")
        if len(self.anchors) != len(self.strides):
            raise ConfigError("anchors must provide one triple per stride")
        for level in self.anchors:
            if len(level) != 3:
                raise ConfigError("exactly 3 anchors per stride are required")
            if any(w <= 0 or h <= 0 for w, h in level):
                raise ConfigError("anchor sides must be positive")
        if set(self.sam_kernels) != {"top_down", "bottom_up"}:
            raise ConfigError("sam_kernels needs 'top_down' and 'bottom_up' keys")
        if self.num_keypoints < 1:
            raise ConfigError("num_keypoints must be >= 1")
        if self.channel_round < 1:
            raise ConfigError("channel_round must be >= 1")

    # -- scaling --------------------------------------------------------

    def _round_channels(self, c):
        unit = self.channel_round * (1 << (self.order_n - 1))
        unit = unit // math.gcd(self.channel_round, 1 << (self.order_n - 1))
        return max(unit, int(math.ceil(c * self.width_mult / unit)) * unit)

    def stage_channels(self):
        """The five stage output widths after width scaling and rounding."""
        return [self._round_channels(c) for c in self.base_channels]

    def focus_channels(self):
        return self._round_channels(self.base_channels[0] // 2)

    def stage_depths(self):
        return [max(1, round(self.depth_mult * d)) for d in self.base_depths]

    def fusion_depth(self):
        """Depth of the C3 fusion blocks (neck and final backbone stage)."""
        return max(1, round(self.depth_mult * 3))

    def head_channels(self):
        return 3 * (5 + 1 + 3 * self.num_keypoints)

    # -- serialization ----------------------------------------------------

    _FILE_KEYS = {
        "variant", "width_mult", "depth_mult", "base_channels", "base_depths",
        "order_n", "lambda", "neck", "strides", "anchors", "expansion",
        "sam_kernels", "num_keypoints", "channel_round", "cbam_reduction",
        "residual_interactions", "backbone_block", "note",
    }

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - cls._FILE_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "lambda" in kwargs:
            kwargs["lambda_"] = kwargs.pop("lambda")
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"malformed config file {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return cls.from_dict(data)

    def to_dict(self):
        data = asdict(self)
        data["lambda"] = data.pop("lambda_")
        return data


@dataclass
class FeaturePyramid:
    """Multi-resolution feature stack; levels are ordered fine to coarse."""

    levels: list
    strides: tuple

    def __post_init__(self):
        if len(self.levels) != len(self.strides):
            raise ShapeError("one stride per pyramid level required")
        for a, b in zip(self.levels, self.levels[1:]):
            if (a.shape[2] != 2 * b.shape[2]) or (a.shape[3] != 2 * b.shape[3]):
                raise ShapeError("pyramid levels must halve spatially")

    @property
    def p3(self):
        return self.levels[0]

    @property
    def p4(self):
        return self.levels[1]

    @property
    def p5(self):
        return self.levels[2]

    @property
    def p6(self):
        return self.levels[3]


class _Stage(Layer):
    """Stride-2 entry conv followed by a cross-stage body."""

    def __init__(self, c_in, c_out, depth, cfg):
        super().__init__()
        self.down = ConvBnSilu(c_in, c_out, 3, stride=2)
        if cfg.backbone_block == "c3dr":
            self.body = C3dr(c_out, c_out, depth, order=cfg.order_n,
                             lam=cfg.lambda_,
                             residual_enabled=cfg.residual_interactions,
                             expansion=cfg.expansion)
        else:
            self.body = C3(c_out, c_out, depth)

    def forward(self, x):
        return self.body(self.down(x))

    def profile(self, shape, name, rows):
        shape = self.down.profile(shape, f"{name}.down", rows)
        return self.body.profile(shape, f"{name}.body", rows)


class Backbone(Layer):
    """Five-stage feature extractor emitting strides 8/16/32/64."""

    def __init__(self, cfg):
        super().__init__()
        ch = cfg.stage_channels()
        depths = cfg.stage_depths()
        self.focus = Focus(3, cfg.focus_channels())
        prev = cfg.focus_channels()
        stages = []
        for c_out, depth in zip(ch[:4], depths):
            stages.append(_Stage(prev, c_out, depth, cfg))
            prev = c_out
        self.stages = LayerList(stages)
        self.down5 = ConvBnSilu(ch[3], ch[4], 3, stride=2)
        self.spp = Spp(ch[4], ch[4])
        self.c3 = C3(ch[4], ch[4], cfg.fusion_depth())
        self.out_channels = ch[1:]

    def forward(self, x):
        n, c, h, w = x.shape
        if c != 3:
            raise ShapeError(f"backbone expects 3 input channels, got {c}")
        if h % 64 or w % 64:
            raise ShapeError(f"input dims must be divisible by 64, got {h}x{w}")
        y = self.focus(x)
        feats = []
        for stage in self.stages:
            y = stage(y)
            feats.append(y)
        p6 = self.c3(self.spp(self.down5(feats[-1])))
        # P2 stays internal; the pyramid starts at stride 8
        return FeaturePyramid(levels=[feats[1], feats[2], feats[3], p6],
                              strides=(8, 16, 32, 64))

    def profile(self, shape, name, rows):
        n, c, h, w = shape
        if h % 64 or w % 64:
            raise ShapeError(f"input dims must be divisible by 64, got {h}x{w}")
        shape = self.focus.profile(shape, f"{name}.focus", rows)
        outs = []
        for i, stage in enumerate(self.stages):
            shape = stage.profile(shape, f"{name}.stages.{i}", rows)
            outs.append(shape)
        shape = self.down5.profile(outs[-1], f"{name}.down5", rows)
        shape = self.spp.profile(shape, f"{name}.spp", rows)
        p6 = self.c3.profile(shape, f"{name}.c3", rows)
        pyramid = [outs[1], outs[2], outs[3], p6]
        for level, s in zip(pyramid, (8, 16, 32, 64)):
            rows.add(f"{name}.P{int(math.log2(s))}", level, 0, 0)
        return pyramid


class _TopDownTransform(Layer):
    """Pre-upsample reduce conv plus the neck-kind-specific module."""

    def __init__(self, c_in, c_out, cfg):
        super().__init__()
        self.reduce = ConvBnSilu(c_in, c_out, 1)
        if cfg.neck == "cbam_pan":
            self.attn = Cbam(c_out, reduction=cfg.cbam_reduction,
                             sam_kernel=cfg.sam_kernels["top_down"])
        elif cfg.neck == "asi_pan":
            self.attn = ResGnConv(c_out, n=cfg.order_n, lam=cfg.lambda_,
                                  residual_enabled=cfg.residual_interactions)
        else:
            self.attn = None

    def forward(self, x):
        y = self.reduce(x)
        return self.attn(y) if self.attn is not None else y

    def profile(self, shape, name, rows):
        shape = self.reduce.profile(shape, f"{name}.reduce", rows)
        if self.attn is not None:
            shape = self.attn.profile(shape, f"{name}.attn", rows)
        return shape


class _BottomUpTransform(Layer):
    """Stride-2 conv plus attention on the bottom-up path."""

    def __init__(self, c, cfg):
        super().__init__()
        self.down = ConvBnSilu(c, c, 3, stride=2)
        if cfg.neck in ("cbam_pan", "asi_pan"):
            self.attn = Cbam(c, reduction=cfg.cbam_reduction,
                             sam_kernel=cfg.sam_kernels["bottom_up"])
        else:
            self.attn = None

    def forward(self, x):
        y = self.down(x)
        return self.attn(y) if self.attn is not None else y

    def profile(self, shape, name, rows):
        shape = self.down.profile(shape, f"{name}.down", rows)
        if self.attn is not None:
            shape = self.attn.profile(shape, f"{name}.attn", rows)
        return shape


class Neck(Layer):
    """Top-down then bottom-up fusion over an arbitrary number of levels."""

    def __init__(self, channels, cfg):
        super().__init__()
        if len(channels) < 2:
            raise ConfigError("neck needs at least two pyramid levels")
        self.kind = cfg.neck
        self.channels = list(channels)
        L = len(channels)
        depth = cfg.fusion_depth()
        self.td_transforms = LayerList([
            _TopDownTransform(channels[L - 1 - i], channels[L - 2 - i], cfg)
            for i in range(L - 1)])
        self.td_fusions = LayerList([
            C3(2 * channels[L - 2 - i], channels[L - 2 - i], depth)
            for i in range(L - 1)])
        self.bu_transforms = LayerList([
            _BottomUpTransform(channels[j], cfg) for j in range(L - 1)])
        self.bu_fusions = LayerList([
            C3(2 * channels[j], channels[j + 1], depth) for j in range(L - 1)])

    def forward(self, levels):
        L = len(self.channels)
        if len(levels) != L:
            raise ShapeError(f"neck built for {L} levels, got {len(levels)}")
        laterals = []               # transform outputs kept for the bottom-up path
        cur = levels[L - 1]
        for i in range(L - 1):
            t = self.td_transforms[i](cur)
            laterals.append(t)
            merged = T.concat_channels([T.upsample_nearest2x(t), levels[L - 2 - i]])
            cur = self.td_fusions[i](merged)
        outs = [cur]                # finest refined level
        for j in range(L - 1):
            d = self.bu_transforms[j](outs[-1])
            merged = T.concat_channels([d, laterals[L - 2 - j]])
            outs.append(self.bu_fusions[j](merged))
        return outs

    def profile(self, shapes, name, rows):
        L = len(self.channels)
        lat_shapes = []
        cur = shapes[L - 1]
        for i in range(L - 1):
            t = self.td_transforms[i].profile(cur, f"{name}.td_transforms.{i}", rows)
            lat_shapes.append(t)
            n, c, h, w = t
            merged = (n, c + shapes[L - 2 - i][1], 2 * h, 2 * w)
            cur = self.td_fusions[i].profile(merged, f"{name}.td_fusions.{i}", rows)
        outs = [cur]
        for j in range(L - 1):
            d = self.bu_transforms[j].profile(outs[-1], f"{name}.bu_transforms.{j}", rows)
            n, c, h, w = d
            merged = (n, c + lat_shapes[L - 2 - j][1], h, w)
            outs.append(self.bu_fusions[j].profile(merged, f"{name}.bu_fusions.{j}", rows))
        for shape, s in zip(outs, (8, 16, 32, 64)):
            rows.add(f"{name}.N{int(math.log2(s))}", shape, 0, 0)
        return outs


class Model(Layer):
    """Complete network; built by :func:`build_model`."""

    def __init__(self, cfg):
        super().__init__()
        self.config = cfg
        self.backbone = Backbone(cfg)
        self.neck = Neck(self.backbone.out_channels, cfg)
        self.heads = LayerList([
            Conv2d(c, cfg.head_channels(), 1, bias=True)
            for c in self.backbone.out_channels])

    def forward(self, x):
        fp = self.backbone(x)
        refined = self.neck(fp.levels)
        return [head(level) for head, level in zip(self.heads, refined)]

    def profile(self, shape, name, rows):
        pyramid = self.backbone.profile(shape, f"{name}.backbone" if name else "backbone", rows)
        prefix = f"{name}." if name else ""
        outs = self.neck.profile(pyramid, f"{prefix}neck", rows)
        head_shapes = []
        for i, (head, s) in enumerate(zip(self.heads, outs)):
            head_shapes.append(head.profile(s, f"{prefix}heads.{i}", rows))
        return head_shapes


def build_model(cfg, seed=0):
    """Construct and deterministically initialize a model."""
    cfg.validate()
    model = Model(cfg)
    model.finalize(seed)
    return model


def backbone_forward(model, x):
    """Feature pyramid at strides 8/16/32/64 for an (n, 3, H, W) input."""
    return model.backbone(x)


def neck_forward(model, fp, kind=None):
    """Fuse a pyramid; ``kind``, when given, must match the built neck."""
    if kind is not None and kind != model.neck.kind:
        raise ConfigError(
            f"neck was built as {model.neck.kind!r}, cannot run as {kind!r}")
    levels = fp.levels if isinstance(fp, FeaturePyramid) else list(fp)
    refined = model.neck(levels)
    return FeaturePyramid(levels=refined, strides=(8, 16, 32, 64))


def head_forward(model, fp):
    """Raw per-level head logits (no activation)."""
    levels = fp.levels if isinstance(fp, FeaturePyramid) else list(fp)
    if len(levels) != len(model.heads):
        raise ShapeError(f"expected {len(model.heads)} levels, got {len(levels)}")
    return [head(level) for head, level in zip(model.heads, levels)]


def count_trainable(model):
    """Total number of trainable parameter elements."""
    return model.count_trainable()
