"""CRNet and CsiNet codec architectures plus the exact flops auditor.

Both codecs compress a 2 x n_a x n_t angular image into a real codeword of
length ratio * 2 * n_a * n_t and reconstruct it. CRNet extracts features
at two resolutions per stage: a deep path whose 1x9 / 9x1 factorized pair
widens the receptive field cheaply, and a shallow path, merged by a 1x1
convolution. Decoder CRBlocks wrap that multi-resolution stage with an
identity skip. CsiNet is the single-resolution residual baseline
(RefineNet blocks, 2 -> 8 -> 16 -> 2 channels).

Every convolution is followed by batch norm; leaky ReLU follows each
conv+bn except the CRBlock merge, whose activation applies after the
residual add. The decoder ends in a sigmoid instead of a leaky ReLU so
outputs live in (0, 1). Activations run channels-last internally; the
public tensor interface stays (N, C, H, W).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .autograd import Tensor, add, concat_channels, leaky_relu, permute, reshape, sigmoid
from .errors import TensorShapeError
from .layers import BatchNorm2d, Conv2d, Linear, layer_flops, xavier_init

CRNET_KIND = "crnet"
CSINET_KIND = "csinet"

HEAD_CHOICES = ("none", "k3", "dual_k3", "k5", "k7")
_HEAD_KERNELS = {"none": (), "k3": (3,), "dual_k3": (3, 3), "k5": (5,), "k7": (7,)}

_FMT = "channels_last"
_CH_AXIS = 3

# CRBlock path widths; fixed so the per-layer MAC totals reproduce the
# published complexity figures (see the flops tests)
_CR_WIDTH = 7


def parse_ratio(text):
    """Parse a compression ratio given exactly, e.g. "1/4"; floats rejected."""
    if isinstance(text, Fraction):
        return text
    s = str(text).strip()
    if "/" not in s:
        raise ValueError(f"ratio must be an exact fraction like 1/4, got {text!r}")
    try:
        num, den = s.split("/")
        ratio = Fraction(int(num), int(den))
    except (ValueError, ZeroDivisionError) as e:
        raise ValueError(f"cannot parse ratio {text!r}: {e}") from e
    return ratio


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; defaults mirror the standard recipe."""

    ratio: Fraction
    negative_slope: float = 0.3
    head_conv: str = "k5"
    n_a: int = 32
    n_t: int = 32

    def __post_init__(self):
        object.__setattr__(self, "ratio", parse_ratio(self.ratio))
        if not 0 < self.ratio <= 1:
            raise ValueError(f"ratio must lie in (0, 1], got {self.ratio}")
        if not 0.0 < self.negative_slope < 1.0:
            raise ValueError(f"negative_slope must lie in (0, 1), got {self.negative_slope}")
        if self.head_conv not in HEAD_CHOICES:
            raise ValueError(f"head_conv must be one of {HEAD_CHOICES}, got {self.head_conv!r}")
        if self.n_a < 1 or self.n_t < 1:
            raise ValueError("n_a and n_t must be positive")
        cw = self.ratio * 2 * self.n_a * self.n_t
        if cw.denominator != 1 or cw.numerator < 1:
            raise ValueError(f"codeword length {cw} is not a positive integer")

    @property
    def codeword_length(self):
        return int(self.ratio * 2 * self.n_a * self.n_t)

    @property
    def image_size(self):
        return 2 * self.n_a * self.n_t

    def to_dict(self):
        return {
            "ratio": f"{self.ratio.numerator}/{self.ratio.denominator}",
            "negative_slope": self.negative_slope,
            "head_conv": self.head_conv,
            "n_a": self.n_a,
            "n_t": self.n_t,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ConvBN:
    """conv -> batch norm; the caller applies the activation."""

    def __init__(self, c_in, c_out, k_h, k_w, dtype):
        self.conv = Conv2d(c_in, c_out, k_h, k_w, bias=False, data_format=_FMT, dtype=dtype)
        self.bn = BatchNorm2d(c_out, data_format=_FMT, dtype=dtype)

    def forward(self, x, training):
        return self.bn.forward(self.conv.forward(x), training)


class CRBlock:
    """Two parallel conv paths merged by a 1x1 conv, with an identity skip.

    path1: 3x3 (2 -> 7), then the factorized 1x9 / 9x1 pair (7 -> 7);
    path2: 1x5 (2 -> 7), 5x1 (7 -> 7). The post-add activation is leaky
    ReLU, or sigmoid when the block closes the decoder.
    """

    def __init__(self, dtype):
        w = _CR_WIDTH
        self.path1 = [ConvBN(2, w, 3, 3, dtype), ConvBN(w, w, 1, 9, dtype), ConvBN(w, w, 9, 1, dtype)]
        self.path2 = [ConvBN(2, w, 1, 5, dtype), ConvBN(w, w, 5, 1, dtype)]
        self.merge = ConvBN(2 * w, 2, 1, 1, dtype)

    def forward(self, x, training, slope, final_sigmoid=False):
        a = x
        for stage in self.path1:
            a = leaky_relu(stage.forward(a, training), slope)
        b = x
        for stage in self.path2:
            b = leaky_relu(stage.forward(b, training), slope)
        m = self.merge.forward(concat_channels(a, b, axis=_CH_AXIS), training)
        y = add(m, x)
        return sigmoid(y) if final_sigmoid else leaky_relu(y, slope)


class RefineBlock:
    """CsiNet residual refinement: 3x3 convs 2 -> 8 -> 16 -> 2, skip over all."""

    def __init__(self, dtype):
        self.stages = [ConvBN(2, 8, 3, 3, dtype), ConvBN(8, 16, 3, 3, dtype), ConvBN(16, 2, 3, 3, dtype)]

    def forward(self, x, training, slope):
        h = x
        for stage in self.stages:
            h = leaky_relu(stage.forward(h, training), slope)
        return add(h, x)


def _named_convbn(name, unit):
    return [(f"{name}.conv", unit.conv), (f"{name}.bn", unit.bn)]


class _CodecBase:
    """Shared wiring: named-layer registry, init, parameters, state dict."""

    kind = ""

    def __init__(self, config, dtype):
        self.config = config
        self.dtype = np.dtype(dtype)
        self._named = []  # ordered (name, layer) pairs

    def _register(self, pairs):
        self._named.extend(pairs)

    def _init_weights(self, rng):
        rng = np.random.default_rng(rng)
        for _name, layer in self._named:
            if isinstance(layer, (Conv2d, Linear)):
                xavier_init(layer, rng)

    def named_layers(self):
        return list(self._named)

    def parameters(self):
        """Stable, uniquely named list of learnable tensors."""
        out = []
        for name, layer in self._named:
            if isinstance(layer, Conv2d):
                out.append((f"{name}.weight", layer.weight))
                if layer.bias is not None:
                    out.append((f"{name}.bias", layer.bias))
            elif isinstance(layer, BatchNorm2d):
                out.append((f"{name}.gamma", layer.gamma))
                out.append((f"{name}.beta", layer.beta))
            elif isinstance(layer, Linear):
                out.append((f"{name}.weight", layer.weight))
                out.append((f"{name}.bias", layer.bias))
        return out

    def state_arrays(self):
        """Parameters plus batch-norm running stats, as (name, ndarray)."""
        out = [(name, t.data) for name, t in self.parameters()]
        for name, layer in self._named:
            if isinstance(layer, BatchNorm2d):
                out.append((f"{name}.running_mean", layer.running_mean))
                out.append((f"{name}.running_var", layer.running_var))
        return out

    def load_state(self, arrays):
        """Overwrite all state from a {name: ndarray} mapping."""
        own = dict(self.state_arrays())
        missing = set(own) - set(arrays)
        if missing:
            raise TensorShapeError(f"state is missing tensors: {sorted(missing)[:4]}...")
        for name, dst in own.items():
            src = np.asarray(arrays[name])
            if src.shape != dst.shape:
                raise TensorShapeError(f"{name}: stored shape {src.shape} != model shape {dst.shape}")
            dst[...] = src.astype(dst.dtype)

    def zero_grad(self):
        for _name, t in self.parameters():
            t.grad = None

    def forward(self, x, training=False):
        return self.decode(self.encode(x, training), training)

    def _check_image(self, x):
        n_a, n_t = self.config.n_a, self.config.n_t
        if x.data.ndim != 4 or x.data.shape[1:] != (2, n_a, n_t):
            raise ValueError(f"expected input (N, 2, {n_a}, {n_t}), got {x.shape}")

    def _check_codeword(self, v):
        cw = self.config.codeword_length
        if v.data.ndim != 2 or v.data.shape[1] != cw:
            raise ValueError(f"expected codeword (N, {cw}), got {v.shape}")


class CRNet(_CodecBase):
    """Multi-resolution codec: factorized-kernel encoder paths and two
    CRBlocks behind a configurable head convolution in the decoder."""

    kind = CRNET_KIND

    def __init__(self, config, rng=0, dtype=np.float32):
        super().__init__(config, dtype)
        cw = config.codeword_length
        size = config.image_size
        self.enc_path_a = [ConvBN(2, 2, 3, 3, dtype), ConvBN(2, 2, 1, 9, dtype), ConvBN(2, 2, 9, 1, dtype)]
        self.enc_path_b = [ConvBN(2, 2, 3, 3, dtype)]
        self.enc_merge = ConvBN(4, 2, 1, 1, dtype)
        self.enc_fc = Linear(size, cw, dtype=dtype)
        self.dec_fc = Linear(cw, size, dtype=dtype)
        self.dec_head = [
            ConvBN(2, 2, k, k, dtype) for k in _HEAD_KERNELS[config.head_conv]
        ]
        self.dec_blocks = [CRBlock(dtype), CRBlock(dtype)]

        for i, u in enumerate(self.enc_path_a):
            self._register(_named_convbn(f"enc.path_a.{i}", u))
        for i, u in enumerate(self.enc_path_b):
            self._register(_named_convbn(f"enc.path_b.{i}", u))
        self._register(_named_convbn("enc.merge", self.enc_merge))
        self._register([("enc.fc", self.enc_fc), ("dec.fc", self.dec_fc)])
        for i, u in enumerate(self.dec_head):
            self._register(_named_convbn(f"dec.head.{i}", u))
        for bi, block in enumerate(self.dec_blocks, start=1):
            for i, u in enumerate(block.path1):
                self._register(_named_convbn(f"dec.block{bi}.path1.{i}", u))
            for i, u in enumerate(block.path2):
                self._register(_named_convbn(f"dec.block{bi}.path2.{i}", u))
            self._register(_named_convbn(f"dec.block{bi}.merge", block.merge))
        self._init_weights(rng)

    def encode(self, x, training=False):
        self._check_image(x)
        slope = self.config.negative_slope
        h = permute(x, (0, 2, 3, 1))
        a = h
        for stage in self.enc_path_a:
            a = leaky_relu(stage.forward(a, training), slope)
        b = h
        for stage in self.enc_path_b:
            b = leaky_relu(stage.forward(b, training), slope)
        m = self.enc_merge.forward(concat_channels(a, b, axis=_CH_AXIS), training)
        m = leaky_relu(m, slope)
        flat = reshape(m, (m.shape[0], self.config.image_size))
        return self.enc_fc.forward(flat)

    def decode(self, v, training=False):
        self._check_codeword(v)
        cfg = self.config
        slope = cfg.negative_slope
        h = self.dec_fc.forward(v)
        h = reshape(h, (h.shape[0], cfg.n_a, cfg.n_t, 2))
        for stage in self.dec_head:
            h = leaky_relu(stage.forward(h, training), slope)
        h = self.dec_blocks[0].forward(h, training, slope, final_sigmoid=False)
        h = self.dec_blocks[1].forward(h, training, slope, final_sigmoid=True)
        return permute(h, (0, 3, 1, 2))


class CsiNet(_CodecBase):
    """Single-resolution baseline: one encoder conv, two RefineNet blocks."""

    kind = CSINET_KIND

    def __init__(self, config, rng=0, dtype=np.float32):
        super().__init__(config, dtype)
        cw = config.codeword_length
        size = config.image_size
        self.enc_conv = ConvBN(2, 2, 3, 3, dtype)
        self.enc_fc = Linear(size, cw, dtype=dtype)
        self.dec_fc = Linear(cw, size, dtype=dtype)
        self.dec_blocks = [RefineBlock(dtype), RefineBlock(dtype)]
        self.dec_final = ConvBN(2, 2, 3, 3, dtype)

        self._register(_named_convbn("enc.conv", self.enc_conv))
        self._register([("enc.fc", self.enc_fc), ("dec.fc", self.dec_fc)])
        for bi, block in enumerate(self.dec_blocks, start=1):
            for i, u in enumerate(block.stages):
                self._register(_named_convbn(f"dec.refine{bi}.{i}", u))
        self._register(_named_convbn("dec.final", self.dec_final))
        self._init_weights(rng)

    def encode(self, x, training=False):
        self._check_image(x)
        slope = self.config.negative_slope
        h = permute(x, (0, 2, 3, 1))
        h = leaky_relu(self.enc_conv.forward(h, training), slope)
        flat = reshape(h, (h.shape[0], self.config.image_size))
        return self.enc_fc.forward(flat)

    def decode(self, v, training=False):
        self._check_codeword(v)
        cfg = self.config
        slope = cfg.negative_slope
        h = self.dec_fc.forward(v)
        h = reshape(h, (h.shape[0], cfg.n_a, cfg.n_t, 2))
        for block in self.dec_blocks:
            h = block.forward(h, training, slope)
        h = sigmoid(self.dec_final.forward(h, training))
        return permute(h, (0, 3, 1, 2))


def crnet_build(config, rng=0, dtype=np.float32):
    return CRNet(config, rng=rng, dtype=dtype)


def csinet_build(config, rng=0, dtype=np.float32):
    return CsiNet(config, rng=rng, dtype=dtype)


def build_model(kind, config, rng=0, dtype=np.float32):
    if kind == CRNET_KIND:
        return crnet_build(config, rng, dtype)
    if kind == CSINET_KIND:
        return csinet_build(config, rng, dtype)
    raise ValueError(f"unknown model kind {kind!r}")


@dataclass
class FlopsRow:
    name: str
    kernel: str
    c_in: int
    c_out: int
    flops: int


@dataclass
class FlopsReport:
    rows: list = field(default_factory=list)
    total: int = 0

    def table(self):
        lines = [f"{'layer':<28}{'kernel':>8}{'in':>6}{'out':>6}{'flops':>14}"]
        for r in self.rows:
            lines.append(f"{r.name:<28}{r.kernel:>8}{r.c_in:>6}{r.c_out:>6}{r.flops:>14,}")
        lines.append(f"{'total':<28}{'':>8}{'':>6}{'':>6}{self.total:>14,}")
        return "\n".join(lines)


def model_flops(model):
    """Per-layer multiply-accumulate report at the model's actual dims."""
    cfg = model.config
    rows = []
    for name, layer in model.named_layers():
        if isinstance(layer, Conv2d):
            rows.append(
                FlopsRow(name, f"{layer.k_h}x{layer.k_w}", layer.c_in, layer.c_out,
                         layer_flops(layer, cfg.n_a, cfg.n_t))
            )
        elif isinstance(layer, Linear):
            rows.append(
                FlopsRow(name, "fc", layer.in_features, layer.out_features,
                         layer_flops(layer, 1, 1))
            )
    return FlopsReport(rows, total=sum(r.flops for r in rows))
