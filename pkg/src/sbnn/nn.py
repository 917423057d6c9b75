"""Desk-scale trainable binarized network with manual backward passes.

Layers form a fixed feed-forward stack (3x3 conv, linear, batchnorm, sign
activation, 2x2 max pool, full-precision classifier head). Binarized layers
hold real latent weights; the forward pass quantizes them on the fly and the
backward pass routes gradients through the clipped straight-through
estimator. First conv and classifier stay full precision.

Every layer also supports a `relaxed` forward in which the sign function is
replaced by its straight-through surrogate clip(x, -1, 1). In that mode the
backward pass computes the exact gradient of the forward (away from the
clip kinks), which is what the finite-difference tests check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .binquant import (
    OmegaParams,
    ValidationError,
    fit_omega,
    sign_binarize,
)

OMEGA_MODES = ("pm1", "analytic", "learned")


def _binarize(x, relaxed):
    """sign(x) with sign(0) = +1, or the clipped-identity surrogate."""
    if relaxed:
        return np.clip(x, -1.0, 1.0)
    return np.where(x >= 0.0, 1.0, -1.0)


def _ste_mask(x):
    return (np.abs(x) <= 1.0).astype(np.float64)


@dataclass
class LayerSpec:
    kind: str
    in_ch: int = 0
    out_ch: int = 0
    stride: int = 1
    padding: int = 0
    binarized: bool = False
    omega_mode: str = "analytic"
    bias: bool = False

    def __post_init__(self):
        if self.omega_mode not in OMEGA_MODES:
            raise ValidationError(f"unknown omega mode {self.omega_mode!r}")

    @property
    def weight_count(self) -> int:
        if self.kind == "conv3x3":
            return self.out_ch * self.in_ch * 9
        if self.kind in ("linear", "classifier"):
            return self.out_ch * self.in_ch
        return 0


NetworkSpec = tuple  # tuple of LayerSpec, in forward order


class Parameter:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name, value):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)


class Layer:
    spec: LayerSpec

    def params(self):
        return []

    def forward(self, x, train=False, relaxed=False):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError


# ---------------------------------------------------------------------------
# quantized-weight machinery shared by conv and linear layers
# ---------------------------------------------------------------------------

class _WeightedLayer(Layer):
    """Holds latent weights plus the optional learned (tau, phi) pair and
    implements the latent -> effective weight quantization and its backward."""

    def __init__(self, spec: LayerSpec, rng: np.random.Generator, fan_in: int):
        if fan_in < 1 or spec.out_ch < 1:
            raise ValidationError(f"{spec.kind}: empty fan-in or fan-out")
        self.spec = spec
        shape = self._weight_shape()
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = Parameter("weight", rng.uniform(-bound, bound, size=shape))
        self.bias = None
        if spec.bias:
            self.bias = Parameter("bias", np.zeros(spec.out_ch))
        self.tau = None
        self.phi = None
        if spec.binarized and spec.omega_mode == "learned":
            om = fit_omega(self.weight.value.ravel(), sign_binarize(self.weight.value.ravel()))
            self.tau = Parameter("tau", np.array(om.tau if not om.degenerate else 1.0))
            self.phi = Parameter("phi", np.array(om.phi))
        self._cache = None

    def _weight_shape(self):
        raise NotImplementedError

    def params(self):
        out = [self.weight]
        if self.bias is not None:
            out.append(self.bias)
        if self.tau is not None:
            out.extend([self.tau, self.phi])
        return out

    def effective_weight(self, relaxed=False):
        """(w_eff, cache) where cache carries what backward needs."""
        w = self.weight.value
        if not self.spec.binarized:
            return w, ("fp",)
        wb = _binarize(w, relaxed)
        mode = self.spec.omega_mode
        if mode == "pm1":
            return wb, ("pm1", w)
        if mode == "learned":
            tau = float(self.tau.value)
            phi = float(self.phi.value)
            return tau * wb + phi, ("learned", w, wb, tau)
        om = fit_omega(w.ravel(), sign_binarize(w.ravel()))
        return om.tau * wb + om.phi, ("analytic", w, om.tau)

    def backward_weight(self, d_eff):
        """Route the effective-weight gradient back to the latent parameters.
        Analytic (tau, phi) are treated as constants of the fit."""
        cache = self._wcache
        kind = cache[0]
        if kind == "fp":
            self.weight.grad += d_eff
        elif kind == "pm1":
            self.weight.grad += d_eff * _ste_mask(cache[1])
        elif kind == "analytic":
            _, w, tau = cache
            self.weight.grad += tau * d_eff * _ste_mask(w)
        else:  # learned
            _, w, wb, tau = cache
            self.tau.grad += np.sum(d_eff * wb)
            self.phi.grad += np.sum(d_eff)
            self.weight.grad += tau * d_eff * _ste_mask(w)

    def current_omega(self) -> OmegaParams:
        """The (tau, phi) this layer quantizes to right now."""
        if not self.spec.binarized:
            raise ValidationError("full-precision layer has no weight domain")
        mode = self.spec.omega_mode
        if mode == "pm1":
            return OmegaParams(tau=1.0, phi=0.0)
        if mode == "learned":
            return OmegaParams(tau=float(self.tau.value), phi=float(self.phi.value))
        w = self.weight.value.ravel()
        return fit_omega(w, sign_binarize(w))


# ---------------------------------------------------------------------------
# conv / linear
# ---------------------------------------------------------------------------

def _conv_out_hw(h, w, stride, pad):
    return (h + 2 * pad - 3) // stride + 1, (w + 2 * pad - 3) // stride + 1


def _im2col(x, stride, pad, pad_value):
    """x (B, C, H, W) -> cols (B, C*9, P) plus geometry for col2im."""
    b, c, h, w = x.shape
    ho, wo = _conv_out_hw(h, w, stride, pad)
    if ho < 1 or wo < 1:
        raise ValidationError("input smaller than the 3x3 window")
    if pad:
        xp = np.full((b, c, h + 2 * pad, w + 2 * pad), pad_value, dtype=x.dtype)
        xp[:, :, pad : pad + h, pad : pad + w] = x
    else:
        xp = x
    ci = np.repeat(np.arange(c), 9)
    ki, kj = np.meshgrid(np.arange(3), np.arange(3), indexing="ij")
    ki, kj = np.tile(ki.ravel(), c), np.tile(kj.ravel(), c)
    oi, oj = np.meshgrid(np.arange(ho) * stride, np.arange(wo) * stride, indexing="ij")
    rows = ki[:, None] + oi.ravel()[None, :]  # (C*9, P)
    cols_ix = kj[:, None] + oj.ravel()[None, :]
    cols = xp[:, ci[:, None], rows, cols_ix]
    return cols, (b, c, h, w, ho, wo, ci, rows, cols_ix, pad)


def _col2im(dcols, geom):
    b, c, h, w, ho, wo, ci, rows, cols_ix, pad = geom
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    bi = np.arange(b)[:, None, None]
    np.add.at(dxp, (bi, ci[None, :, None], rows[None], cols_ix[None]), dcols)
    if pad:
        return dxp[:, :, pad : pad + h, pad : pad + w]
    return dxp


class Conv3x3(_WeightedLayer):
    def __init__(self, spec: LayerSpec, rng):
        super().__init__(spec, rng, fan_in=spec.in_ch * 9)

    def _weight_shape(self):
        return (self.spec.out_ch, self.spec.in_ch, 3, 3)

    @property
    def pad_value(self):
        # binarized layers pad with -1-valued activations (bit 0 halo)
        return -1.0 if self.spec.binarized else 0.0

    def forward(self, x, train=False, relaxed=False):
        w_eff, wcache = self.effective_weight(relaxed)
        self._wcache = wcache
        cols, geom = _im2col(
            np.asarray(x, dtype=np.float64), self.spec.stride, self.spec.padding, self.pad_value
        )
        wf = w_eff.reshape(self.spec.out_ch, -1)
        y = np.einsum("of,bfp->bop", wf, cols, optimize=True)
        self._cache = (cols, geom, wf)
        b = x.shape[0]
        ho, wo = geom[4], geom[5]
        return y.reshape(b, self.spec.out_ch, ho, wo)

    def backward(self, grad_out):
        cols, geom, wf = self._cache
        b, o = grad_out.shape[0], self.spec.out_ch
        g = grad_out.reshape(b, o, -1)
        d_wf = np.einsum("bop,bfp->of", g, cols, optimize=True)
        self.backward_weight(d_wf.reshape(self.weight.value.shape))
        dcols = np.einsum("of,bop->bfp", wf, g, optimize=True)
        return _col2im(dcols, geom)


class Linear(_WeightedLayer):
    def __init__(self, spec: LayerSpec, rng):
        super().__init__(spec, rng, fan_in=spec.in_ch)

    def _weight_shape(self):
        return (self.spec.out_ch, self.spec.in_ch)

    def forward(self, x, train=False, relaxed=False):
        w_eff, wcache = self.effective_weight(relaxed)
        self._wcache = wcache
        x = np.asarray(x, dtype=np.float64)
        y = x @ w_eff.T
        if self.bias is not None:
            y = y + self.bias.value
        self._cache = (x, w_eff)
        return y

    def backward(self, grad_out):
        x, w_eff = self._cache
        self.backward_weight(grad_out.T @ x)
        if self.bias is not None:
            self.bias.grad += grad_out.sum(axis=0)
        return grad_out @ w_eff


# ---------------------------------------------------------------------------
# batchnorm / sign / pool / flatten
# ---------------------------------------------------------------------------

class BatchNorm(Layer):
    def __init__(self, spec: LayerSpec, rng=None, eps=1e-5, momentum=0.1):
        self.spec = spec
        c = spec.out_ch
        self.gamma = Parameter("gamma", np.ones(c))
        self.beta = Parameter("beta", np.zeros(c))
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)
        self.eps = eps
        self.momentum = momentum
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    @staticmethod
    def _shape_for(x):
        if x.ndim == 4:
            return (0, 2, 3), (1, -1, 1, 1)
        if x.ndim == 2:
            return (0,), (1, -1)
        raise ValidationError("batchnorm expects 2-D or 4-D input")

    def forward(self, x, train=False, relaxed=False):
        x = np.asarray(x, dtype=np.float64)
        axes, bshape = self._shape_for(x)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
        self._cache = (x, xhat, mean, inv_std, axes, bshape, train)
        return self.gamma.value.reshape(bshape) * xhat + self.beta.value.reshape(bshape)

    def backward(self, grad_out):
        x, xhat, mean, inv_std, axes, bshape, train = self._cache
        self.dgamma_dbeta(grad_out, xhat, axes)
        dxhat = grad_out * self.gamma.value.reshape(bshape)
        if not train:
            return dxhat * inv_std.reshape(bshape)
        m = x.size // x.shape[1 if x.ndim == 4 else -1]
        xc = x - mean.reshape(bshape)
        istd = inv_std.reshape(bshape)
        dvar = np.sum(dxhat * xc, axis=axes) * (-0.5) * inv_std**3
        dmean = np.sum(dxhat, axis=axes) * (-inv_std) + dvar * np.sum(-2.0 * xc, axis=axes) / m
        return (
            dxhat * istd
            + dvar.reshape(bshape) * 2.0 * xc / m
            + dmean.reshape(bshape) / m
        )

    def dgamma_dbeta(self, grad_out, xhat, axes):
        self.gamma.grad += np.sum(grad_out * xhat, axis=axes)
        self.beta.grad += np.sum(grad_out, axis=axes)


class SignAct(Layer):
    def __init__(self, spec: LayerSpec, rng=None):
        self.spec = spec
        self._cache = None

    def forward(self, x, train=False, relaxed=False):
        x = np.asarray(x, dtype=np.float64)
        self._cache = x
        return _binarize(x, relaxed)

    def backward(self, grad_out):
        return grad_out * _ste_mask(self._cache)


class MaxPool2x2(Layer):
    """2x2 stride-2 max pool; on tied values (e.g. +-1 activations) the
    gradient routes to the first of the tied positions."""

    def __init__(self, spec: LayerSpec, rng=None):
        self.spec = spec
        self._cache = None

    def forward(self, x, train=False, relaxed=False):
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValidationError("pool input dims must be even")
        xr = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        flat = xr.reshape(b, c, h // 2, w // 2, 4)
        idx = np.argmax(flat, axis=-1)
        self._cache = (idx, x.shape)
        return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad_out):
        idx, (b, c, h, w) = self._cache
        dflat = np.zeros((b, c, h // 2, w // 2, 4))
        np.put_along_axis(dflat, idx[..., None], grad_out[..., None], axis=-1)
        return (
            dflat.reshape(b, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(b, c, h, w)
        )


class Flatten(Layer):
    def __init__(self, spec: LayerSpec, rng=None):
        self.spec = spec
        self._cache = None

    def forward(self, x, train=False, relaxed=False):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._cache)


_LAYER_TYPES = {
    "conv3x3": Conv3x3,
    "linear": Linear,
    "classifier": Linear,
    "batchnorm": BatchNorm,
    "signact": SignAct,
    "pool": MaxPool2x2,
    "flatten": Flatten,
}


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class Network:
    def __init__(self, spec: NetworkSpec, rng: np.random.Generator):
        self.spec = tuple(spec)
        self.layers = []
        for ls in self.spec:
            if ls.kind not in _LAYER_TYPES:
                raise ValidationError(f"unknown layer kind {ls.kind!r}")
            if ls.kind in ("classifier",) and ls.binarized:
                raise ValidationError("classifier head must stay full precision")
            self.layers.append(_LAYER_TYPES[ls.kind](ls, rng))

    def forward(self, x, train=False, relaxed=False):
        for layer in self.layers:
            x = layer.forward(x, train=train, relaxed=relaxed)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def params(self):
        out = []
        for i, layer in enumerate(self.layers):
            for p in layer.params():
                out.append((f"{i}.{p.name}", p))
        return out

    def zero_grads(self):
        for _, p in self.params():
            p.grad[...] = 0.0

    def binarized_layers(self):
        return [
            l
            for l in self.layers
            if isinstance(l, _WeightedLayer) and l.spec.binarized
        ]

    def binarized_weight_count(self) -> int:
        return sum(l.weight.value.size for l in self.binarized_layers())

    def concat_sign_weights(self):
        """Sign weights of every binarized layer, concatenated; the penalty
        and the ones-fraction report both read this."""
        parts = [
            sign_binarize(l.weight.value.ravel()) for l in self.binarized_layers()
        ]
        if not parts:
            return np.zeros(0, dtype=np.int8)
        return np.concatenate(parts)

    def ones_fraction(self) -> float:
        wb = self.concat_sign_weights()
        if wb.size == 0:
            return 0.0
        return float(np.count_nonzero(wb == 1) / wb.size)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and d(loss)/d(logits)."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    b = logits.shape[0]
    nll = -np.log(np.maximum(probs[np.arange(b), labels], 1e-300))
    dlogits = probs.copy()
    dlogits[np.arange(b), labels] -= 1.0
    return float(nll.mean()), dlogits / b


# ---------------------------------------------------------------------------
# spec-level forward helpers for binary layers
# ---------------------------------------------------------------------------

def forward_binary_linear(x_signs, weight_signs):
    """Pre-activations of a +-1 linear layer: y = W x, float reference path.
    Sums of +-1 products are exact integers in float64, so the result is
    bit-exact against integer arithmetic."""
    w = np.asarray(weight_signs, dtype=np.float64)
    x = np.asarray(x_signs, dtype=np.float64)
    if w.shape[-1] != x.shape[-1]:
        raise ValidationError("shape mismatch")
    return x @ w.T


def forward_binary_conv(x_signs, weight_signs, stride=1, padding=0):
    """Pre-activations of a +-1 3x3 conv; padding uses the -1-valued halo."""
    w = np.asarray(weight_signs, dtype=np.float64)
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ValidationError("weights must be (out, in, 3, 3)")
    x = np.asarray(x_signs, dtype=np.float64)
    cols, geom = _im2col(x, stride, padding, -1.0)
    y = np.einsum("of,bfp->bop", w.reshape(w.shape[0], -1), cols, optimize=True)
    ho, wo = geom[4], geom[5]
    return y.reshape(x.shape[0], w.shape[0], ho, wo)


# ---------------------------------------------------------------------------
# ready-made desk architectures
# ---------------------------------------------------------------------------

def conv_net_spec(
    in_ch=1,
    classes=2,
    width=8,
    image_hw=8,
    omega_mode="analytic",
):
    """Small 3-conv network: full-precision stem, two binarized conv blocks,
    full-precision classifier. Valid (unpadded) convolutions keep the
    integer pipeline trivial."""
    h = image_hw
    spec = [
        LayerSpec("conv3x3", in_ch=in_ch, out_ch=width),
        LayerSpec("batchnorm", out_ch=width),
        LayerSpec("signact"),
    ]
    h -= 2
    spec += [
        LayerSpec("conv3x3", in_ch=width, out_ch=2 * width, binarized=True, omega_mode=omega_mode),
        LayerSpec("batchnorm", out_ch=2 * width),
        LayerSpec("signact"),
    ]
    h -= 2
    spec += [
        LayerSpec("conv3x3", in_ch=2 * width, out_ch=2 * width, binarized=True, omega_mode=omega_mode),
        LayerSpec("batchnorm", out_ch=2 * width),
        LayerSpec("signact"),
    ]
    h -= 2
    if h < 1:
        raise ValidationError(f"image_hw={image_hw} too small for three valid convs")
    spec += [
        LayerSpec("flatten"),
        LayerSpec("classifier", in_ch=2 * width * h * h, out_ch=classes, bias=True),
    ]
    return tuple(spec)


def mlp_spec(in_features, classes=2, hidden=32, omega_mode="analytic"):
    """Tiny MLP with one binarized hidden block."""
    return (
        LayerSpec("linear", in_ch=in_features, out_ch=hidden),
        LayerSpec("batchnorm", out_ch=hidden),
        LayerSpec("signact"),
        LayerSpec("linear", in_ch=hidden, out_ch=hidden, binarized=True, omega_mode=omega_mode),
        LayerSpec("batchnorm", out_ch=hidden),
        LayerSpec("signact"),
        LayerSpec("classifier", in_ch=hidden, out_ch=classes, bias=True),
    )
