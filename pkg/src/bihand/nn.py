"""Neural layers: convolution, layer norm, MLP, softmax, bilinear sampling,
and the cross-hand non-local attention block.

Feature maps are [channels, height, width] tensors. Layers are immutable
parameter holders after construction; ``params()`` yields (name, Tensor)
pairs in a fixed order so the checkpoint format and the parameter counter
see identical registries.
"""

import numpy as np

from .tensor import Tensor, graph_op, matmul, reshape, transpose, _accum


def he_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / max(fan_in, 1)), size=shape)


class Linear:
    """x[n,in] @ weight[in,out] + bias[out]."""

    def __init__(self, in_features, out_features, rng=None, zero_init=False):
        self.in_features = in_features
        self.out_features = out_features
        if zero_init or rng is None:
            w = np.zeros((in_features, out_features))
        else:
            w = he_normal(rng, (in_features, out_features), in_features)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True)

    def __call__(self, x):
        if x.shape[-1] != self.in_features:
            raise ValueError(f"linear expects width {self.in_features}, got {x.shape}")
        flat = x if x.ndim == 2 else reshape(x, (1, self.in_features))
        out = matmul(flat, self.weight) + self.bias
        return out if x.ndim == 2 else reshape(out, (self.out_features,))

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]


def conv2d_raw(x, weight, bias, stride=1, padding=0):
    """Cross-correlation of x[cin,h,w] with weight[cout,cin,kh,kw] plus bias.

    im2col inside a single graph node; the backward rule is the standard
    col2im scatter. Output spatial size is floor((in + 2*pad - k)/stride) + 1.
    """
    cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(f"conv2d spatial dims {x.shape} too small for kernel {weight.shape} "
                         f"with padding {padding}")
    s, p = stride, padding
    oh = (h + 2 * p - kh) // s + 1
    ow = (w + 2 * p - kw) // s + 1

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p))) if p else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    cols = np.ascontiguousarray(
        win[:, ::s, ::s].transpose(0, 3, 4, 1, 2)).reshape(cin * kh * kw, oh * ow)
    w2 = weight.data.reshape(cout, cin * kh * kw)
    out_data = (w2 @ cols + bias.data[:, None]).reshape(cout, oh, ow)

    out = graph_op(out_data, (x, weight, bias), "conv2d")
    if out._parents:
        def bw():
            g2 = out.grad.reshape(cout, oh * ow)
            if bias.requires_grad:
                _accum(bias, g2.sum(axis=1))
            if weight.requires_grad:
                _accum(weight, (g2 @ cols.T).reshape(weight.shape))
            if x.requires_grad:
                dcols = (w2.T @ g2).reshape(cin, kh, kw, oh, ow)
                dxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, i, j]
                _accum(x, dxp[:, p:p + h, p:p + w] if p else dxp)
        out._backward = bw
    return out


class Conv2dLayer:
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 rng=None, zero_init=False):
        k = kernel_size
        fan_in = in_channels * k * k
        if zero_init or rng is None:
            w = np.zeros((out_channels, in_channels, k, k))
        else:
            w = he_normal(rng, (out_channels, in_channels, k, k), fan_in)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return conv2d_raw(x, self.weight, self.bias, self.stride, self.padding)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]


def conv1x1_as_matmul(x, weight, bias):
    """Reference path: a 1x1 convolution is a per-pixel matmul."""
    c, h, w = x.shape
    cout = weight.shape[0]
    flat = reshape(x, (c, h * w))
    out = matmul(reshape(weight, (cout, c)), flat) + reshape(bias, (cout, 1))
    return reshape(out, (cout, h, w))


class LayerNormLayer:
    """Normalize the trailing feature axis, then scale and shift."""

    def __init__(self, features, eps=1e-5):
        self.features = features
        self.eps = float(eps)
        if self.eps <= 0:
            raise ValueError("layernorm eps must be positive")
        self.gamma = Tensor(np.ones(features), requires_grad=True)
        self.beta = Tensor(np.zeros(features), requires_grad=True)

    def __call__(self, x):
        if x.shape[-1] != self.features:
            raise ValueError(f"layernorm expects trailing dim {self.features}, got {x.shape}")
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered / (var + self.eps).sqrt()
        return normed * self.gamma + self.beta

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


class MlpLayer:
    """Linear -> ReLU -> Linear with equal input and output widths."""

    def __init__(self, width, ratio=2, rng=None, zero_init_out=False):
        self.width = width
        hidden = int(round(width * ratio))
        self.fc1 = Linear(width, hidden, rng=rng)
        self.fc2 = Linear(hidden, width, rng=rng, zero_init=zero_init_out)

    def __call__(self, x):
        return self.fc2(self.fc1(x).relu())

    def params(self):
        return ([("fc1." + n, t) for n, t in self.fc1.params()]
                + [("fc2." + n, t) for n, t in self.fc2.params()])


def softmax(x, axis=-1):
    """exp-normalize along ``axis`` with max subtraction for stability.

    The shift is a detached constant; softmax is shift invariant so the
    gradient is unchanged.
    """
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    e = (x - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def grid_sample(f, points):
    """Bilinear sample of f[c,h,w] at continuous pixel points[J,2] as (x, y).

    Out-of-range coordinates clamp to the border, which keeps values and
    gradients defined everywhere. Differentiable in both the map and the
    sampling positions; the position gradient is zero outside the map.
    """
    c, h, w = f.shape
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError(f"points must be [J,2], got {points.shape}")
    px = points.data[:, 0]
    py = points.data[:, 1]
    xc = np.clip(px, 0.0, w - 1.0)
    yc = np.clip(py, 0.0, h - 1.0)
    # non-finite coordinates must not crash the gather; the fractional parts
    # keep the NaN so the output (and any loss) reports it honestly
    x0 = np.clip(np.floor(np.nan_to_num(xc)), 0, max(w - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(np.nan_to_num(yc)), 0, max(h - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0

    f00 = f.data[:, y0, x0]  # [c, J]
    f01 = f.data[:, y0, x1]
    f10 = f.data[:, y1, x0]
    f11 = f.data[:, y1, x1]
    top = f00 * (1 - fx) + f01 * fx
    bot = f10 * (1 - fx) + f11 * fx
    out_data = (top * (1 - fy) + bot * fy).T  # [J, c]

    out = graph_op(out_data, (f, points), "grid_sample")
    if out._parents:
        def bw():
            g = out.grad.T  # [c, J]
            if f.requires_grad:
                df = np.zeros_like(f.data)
                np.add.at(df, (slice(None), y0, x0), g * ((1 - fx) * (1 - fy)))
                np.add.at(df, (slice(None), y0, x1), g * (fx * (1 - fy)))
                np.add.at(df, (slice(None), y1, x0), g * ((1 - fx) * fy))
                np.add.at(df, (slice(None), y1, x1), g * (fx * fy))
                _accum(f, df)
            if points.requires_grad:
                dxc = (1 - fy) * (f01 - f00) + fy * (f11 - f10)
                dyc = bot - top
                in_x = (px >= 0.0) & (px <= w - 1.0)
                in_y = (py >= 0.0) & (py <= h - 1.0)
                dp = np.stack([(g * dxc).sum(axis=0) * in_x,
                               (g * dyc).sum(axis=0) * in_y], axis=1)
                _accum(points, dp)
        out._backward = bw
    return out


class NonLocalBlock:
    """Embedded-Gaussian non-local attention with a residual connection.

    Queries come from ``x`` and keys/values from ``context``, so calling it
    with the two hands' maps in either order realizes cross-hand attention.
    The output projection starts at zero, making the block an exact identity
    at initialization.
    """

    def __init__(self, channels, rng, zero_init_out=True):
        self.channels = channels
        inner = max(1, channels // 2)
        self.inner = inner
        self.theta = Conv2dLayer(channels, inner, 1, rng=rng)
        self.phi = Conv2dLayer(channels, inner, 1, rng=rng)
        self.g = Conv2dLayer(channels, inner, 1, rng=rng)
        self.z = Conv2dLayer(inner, channels, 1, rng=rng, zero_init=zero_init_out)

    def __call__(self, x, context):
        if x.shape != context.shape:
            raise ValueError(f"non_local shape mismatch: {x.shape} vs {context.shape}")
        c, h, w = x.shape
        n = h * w
        q = reshape(self.theta(x), (self.inner, n))
        k = reshape(self.phi(context), (self.inner, n))
        v = reshape(self.g(context), (self.inner, n))
        attn = softmax(matmul(transpose(q), k), axis=1)  # [n, n], rows sum to 1
        y = matmul(v, transpose(attn))                   # [inner, n]
        return self.z(reshape(y, (self.inner, h, w))) + x

    def attention_weights(self, x, context):
        """Attention matrix [query, key] alone, for verification."""
        c, h, w = x.shape
        n = h * w
        q = reshape(self.theta(x), (self.inner, n))
        k = reshape(self.phi(context), (self.inner, n))
        return softmax(matmul(transpose(q), k), axis=1)

    def params(self):
        out = []
        for name, layer in (("theta", self.theta), ("phi", self.phi),
                            ("g", self.g), ("z", self.z)):
            out += [(f"{name}.{n}", t) for n, t in layer.params()]
        return out


def non_local(block, x, context):
    return block(x, context)


def mlp(layer, x):
    return layer(x)


def layernorm(layer, x):
    return layer(x)


def conv2d(layer, x):
    return layer(x)
