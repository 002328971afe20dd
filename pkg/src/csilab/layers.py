"""Parameterized layers: 2-D convolution, batch norm, fully connected.

Convolution is cross-correlation (deep-learning convention, no kernel
flip) with stride 1 and "same" zero padding, so spatial dims are
preserved. Layers accept either ``channels_first`` (N, C, H, W) or
``channels_last`` (N, H, W, C) activations; the channels-last path is the
fast one (per-tap shifted GEMMs over contiguous pixel blocks) and is what
the codec models use internally.

Flops are counted as multiply-accumulates: convolutions and FC layers
pay per weight application, batch norm / activations / bias adds are free.
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, record

_FORMATS = ("channels_first", "channels_last")


def _check_format(data_format):
    if data_format not in _FORMATS:
        raise ValueError(f"data_format must be one of {_FORMATS}, got {data_format!r}")


def _same_pads(k):
    lo = (k - 1) // 2
    return lo, k - 1 - lo


def _conv_forward_nhwc(xd, w):
    """Cross-correlate (N,H,W,C) with (O,C,kh,kw), same padding.

    Returns the (N,H,W,O) output plus the per-tap contiguous input blocks,
    kept so the weight gradient later reduces to plain GEMMs.
    """
    n, h, wd, c = xd.shape
    o, _, kh, kw = w.shape
    pixels = n * h * wd
    w2 = w.transpose(2, 3, 1, 0).reshape(kh * kw, c, o)
    if kh == 1 and kw == 1:
        taps = (xd.reshape(pixels, c),)
        return (taps[0] @ w2[0]).reshape(n, h, wd, o), taps

    pht, phb = _same_pads(kh)
    pwl, pwr = _same_pads(kw)
    xp = np.pad(xd, ((0, 0), (pht, phb), (pwl, pwr), (0, 0)))
    taps = []
    out = None
    tmp = None
    t = 0
    for i in range(kh):
        for j in range(kw):
            v = np.ascontiguousarray(xp[:, i : i + h, j : j + wd, :]).reshape(pixels, c)
            taps.append(v)
            if out is None:
                out = v @ w2[0]
            else:
                if tmp is None:
                    tmp = np.empty_like(out)
                np.matmul(v, w2[t], out=tmp)
                out += tmp
            t += 1
    return out.reshape(n, h, wd, o), tuple(taps)


def _conv_backward_input_nhwc(g, w, x_shape):
    n, h, wd, c = x_shape
    o, _, kh, kw = w.shape
    g2 = g.reshape(-1, o)
    wt = w.transpose(2, 3, 0, 1).reshape(kh * kw, o, c)
    if kh == 1 and kw == 1:
        return (g2 @ wt[0]).reshape(x_shape)
    pht, _ = _same_pads(kh)
    pwl, _ = _same_pads(kw)
    dxp = np.zeros((n, h + kh - 1, wd + kw - 1, c), dtype=g.dtype)
    tmp = np.empty((n, h, wd, c), dtype=g.dtype)
    tmp2 = tmp.reshape(-1, c)
    t = 0
    for i in range(kh):
        for j in range(kw):
            np.matmul(g2, wt[t], out=tmp2)
            dxp[:, i : i + h, j : j + wd, :] += tmp
            t += 1
    return np.ascontiguousarray(dxp[:, pht : pht + h, pwl : pwl + wd, :])


def _conv_backward_weight_nhwc(g, taps, w_shape):
    o, c, kh, kw = w_shape
    g2 = g.reshape(-1, o)
    dw = np.empty((kh * kw, c, o), dtype=g.dtype)
    for t, v in enumerate(taps):
        np.matmul(v.T, g2, out=dw[t])  # contiguous tap: pure GEMM
    return np.ascontiguousarray(dw.reshape(kh, kw, c, o).transpose(3, 2, 0, 1))


class Conv2d:
    """Stride-1 "same"-padded 2-D convolution layer.

    Weight shape is (c_out, c_in, k_h, k_w). Bias is off by default since
    every conv in the codec is followed by a batch norm.
    """

    def __init__(self, c_in, c_out, k_h, k_w, bias=False, data_format="channels_first", dtype=np.float32):
        _check_format(data_format)
        if min(c_in, c_out, k_h, k_w) < 1:
            raise ValueError("channel counts and kernel dims must be positive")
        self.c_in = int(c_in)
        self.c_out = int(c_out)
        self.k_h = int(k_h)
        self.k_w = int(k_w)
        self.data_format = data_format
        self.weight = Tensor(np.zeros((c_out, c_in, k_h, k_w), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x):
        xd = x.data
        if xd.ndim != 4:
            raise ValueError(f"conv2d expects 4-D input, got shape {x.shape}")
        ch_axis = 1 if self.data_format == "channels_first" else 3
        if xd.shape[ch_axis] != self.c_in:
            raise ValueError(f"conv2d expects {self.c_in} input channels, got {xd.shape[ch_axis]}")
        first = self.data_format == "channels_first"
        xh = np.ascontiguousarray(xd.transpose(0, 2, 3, 1)) if first else xd
        w = self.weight
        out, taps = _conv_forward_nhwc(xh, w.data)
        bias = self.bias
        if bias is not None:
            out += bias.data
        if first:
            out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

        x_shape = xh.shape
        w_shape = w.data.shape

        def backward_fn(g):
            gh = np.ascontiguousarray(g.transpose(0, 2, 3, 1)) if first else g
            gx = None
            if x.requires_grad:
                gx = _conv_backward_input_nhwc(gh, w.data, x_shape)
                if first:
                    gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
            gw = _conv_backward_weight_nhwc(gh, taps, w_shape) if w.requires_grad else None
            if bias is None:
                return gx, gw
            gb = gh.sum(axis=(0, 1, 2)) if bias.requires_grad else None
            return gx, gw, gb

        inputs = (x, w) if bias is None else (x, w, bias)
        return record(out, inputs, backward_fn)

    def __repr__(self):
        return f"Conv2d({self.c_in}->{self.c_out}, {self.k_h}x{self.k_w})"


class BatchNorm2d:
    """Per-channel batch normalization with learnable affine.

    Train mode normalizes with biased batch statistics and updates the
    running estimates as new = (1 - momentum) * old + momentum * batch;
    eval mode normalizes with the running estimates. Defaults follow the
    common convention: eps = 1e-5, momentum = 0.1.
    """

    def __init__(self, num_channels, eps=1e-5, momentum=0.1, data_format="channels_first", dtype=np.float32):
        _check_format(data_format)
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {momentum}")
        self.num_channels = int(num_channels)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.data_format = data_format
        self.gamma = Tensor(np.ones(num_channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(num_channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(num_channels, dtype=dtype)
        self.running_var = np.ones(num_channels, dtype=dtype)

    def _flat(self, arr):
        """Channels-last 2-D pixel view; copies only for channels_first."""
        if self.data_format == "channels_last":
            return arr.reshape(-1, self.num_channels)
        return np.ascontiguousarray(arr.transpose(0, 2, 3, 1)).reshape(-1, self.num_channels)

    def _unflat(self, flat, like):
        if self.data_format == "channels_last":
            return flat.reshape(like.shape)
        n, c, h, w = like.shape
        return np.ascontiguousarray(flat.reshape(n, h, w, c).transpose(0, 3, 1, 2))

    def forward(self, x, training):
        xd = x.data
        if xd.ndim != 4:
            raise ValueError(f"batch norm expects 4-D input, got shape {x.shape}")
        ch_axis = 3 if self.data_format == "channels_last" else 1
        if xd.shape[ch_axis] != self.num_channels:
            raise ValueError(f"batch norm expects {self.num_channels} channels, got {xd.shape[ch_axis]}")
        xf = self._flat(xd)
        m = xf.shape[0]
        if training:
            if m <= 1:
                raise ValueError("train-mode batch norm needs more than one value per channel")
            mean64 = xf.mean(axis=0, dtype=np.float64)
            sq64 = np.einsum("ij,ij->j", xf, xf, dtype=np.float64) / m
            var64 = sq64 - mean64 * mean64
            mean = mean64.astype(xd.dtype)
            var = var64.astype(xd.dtype)
            mom = self.momentum
            self.running_mean += mom * (mean - self.running_mean)
            self.running_var += mom * (var - self.running_var)
        else:
            # copy: running stats mutate in place on later train forwards
            mean = self.running_mean.copy()
            var = self.running_var.copy()
            mean64 = mean.astype(np.float64)
            var64 = var.astype(np.float64)

        gamma, beta = self.gamma, self.beta
        istd64 = 1.0 / np.sqrt(var64 + self.eps)
        a = (gamma.data * istd64).astype(xd.dtype)
        b = (beta.data - a * mean).astype(xd.dtype)
        out = xf * a
        out += b
        out = self._unflat(out, xd)

        def backward_fn(g):
            gf = self._flat(g)
            dbeta64 = gf.sum(axis=0, dtype=np.float64)
            gxdot64 = np.einsum("ij,ij->j", gf, xf, dtype=np.float64)
            dgamma64 = (gxdot64 - mean64 * dbeta64) * istd64
            dgamma = dgamma64.astype(xd.dtype)
            dbeta = dbeta64.astype(xd.dtype)
            if not x.requires_grad:
                return None, dgamma, dbeta
            if training:
                # gx = a * (g - dbeta/m - xhat * dgamma/m), expanded so x is
                # touched once: gx = a*g + q*x + r
                a64 = gamma.data.astype(np.float64) * istd64
                q64 = -a64 * istd64 * dgamma64 / m
                r64 = -a64 * dbeta64 / m - q64 * mean64
                gx = gf * a
                gx += xf * q64.astype(xd.dtype)
                gx += r64.astype(xd.dtype)
            else:
                gx = gf * a
            return self._unflat(gx, xd), dgamma, dbeta

        return record(out, (x, gamma, beta), backward_fn)

    def __repr__(self):
        return f"BatchNorm2d({self.num_channels})"


class Linear:
    """Fully connected layer: y = x W^T + b."""

    def __init__(self, in_features, out_features, dtype=np.float32):
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.weight = Tensor(np.zeros((out_features, in_features), dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def forward(self, x):
        xd = x.data
        if xd.ndim != 2:
            raise ValueError(f"linear expects 2-D input, got shape {x.shape}")
        if xd.shape[1] != self.in_features:
            raise ValueError(f"linear expects {self.in_features} features, got {xd.shape[1]}")
        w, bias = self.weight, self.bias
        out = xd @ w.data.T
        out += bias.data

        def backward_fn(g):
            gx = g @ w.data if x.requires_grad else None
            gw = g.T @ xd if w.requires_grad else None
            gb = g.sum(axis=0) if bias.requires_grad else None
            return gx, gw, gb

        return record(out, (x, w, bias), backward_fn)

    def __repr__(self):
        return f"Linear({self.in_features}->{self.out_features})"


def xavier_init(layer, rng):
    """Xavier-uniform weight init, zero bias, for conv and FC layers.

    Weights are drawn uniform in [-a, a] with a = sqrt(6 / (fan_in +
    fan_out)); conv fans count kernel area.
    """
    if isinstance(layer, Conv2d):
        k = layer.k_h * layer.k_w
        fan_in, fan_out = layer.c_in * k, layer.c_out * k
    elif isinstance(layer, Linear):
        fan_in, fan_out = layer.in_features, layer.out_features
    else:
        raise TypeError(f"xavier_init supports Conv2d and Linear, got {type(layer).__name__}")
    a = np.sqrt(6.0 / (fan_in + fan_out))
    w = layer.weight.data
    w[...] = rng.uniform(-a, a, size=w.shape).astype(w.dtype)
    if layer.bias is not None:
        layer.bias.data[...] = 0.0


def layer_flops(layer, out_h, out_w):
    """Multiply-accumulate count of one layer at the given output dims.

    Batch norm, activations, bias adds and residual adds count zero.
    """
    if isinstance(layer, Conv2d):
        return layer.k_h * layer.k_w * layer.c_in * layer.c_out * out_h * out_w
    if isinstance(layer, Linear):
        return layer.in_features * layer.out_features
    if isinstance(layer, BatchNorm2d):
        return 0
    raise TypeError(f"no flops rule for {type(layer).__name__}")
