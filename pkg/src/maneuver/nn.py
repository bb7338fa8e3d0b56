"""Network building blocks: convolution, dense, batch norm, dropout.

Convolutions are cross-correlations (no kernel flip) implemented with
im2col + GEMM, with exact hand-derived backward passes. Layers that own
parameters are ``Module`` subclasses so checkpoints and parameter counts
can enumerate them by name.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError
from .tensor import Tensor

# ---------------------------------------------------------------------------
# Convolution geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one 2-d convolution.

    ``rounding`` selects how fractional output sizes resolve: ``floor``
    drops the partial window, ``ceil`` keeps it and implicitly zero-fills
    the missing bottom/right input samples.
    """

    in_channels: int
    out_channels: int
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    rounding: str = "floor"

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ConfigError(f"bad conv geometry: {self}")
        if self.rounding not in ("floor", "ceil"):
            raise ConfigError(f"rounding must be floor or ceil, got {self.rounding!r}")

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        out = []
        for n, k, s, p in ((h, *self._hw(0)), (w, *self._hw(1))):
            span = n + 2 * p - k
            if self.rounding == "floor":
                m = span // s + 1
            else:
                m = -((-span) // s) + 1
            if m < 1:
                raise ConfigError(
                    f"conv output size < 1 for input {h}x{w} with {self}"
                )
            out.append(m)
        return out[0], out[1]

    def _hw(self, i: int) -> tuple[int, int, int]:
        return self.kernel[i], self.stride[i], self.padding[i]


def _out_len(n: int, k: int, s: int, p: int, ceil_mode: bool) -> int:
    span = n + 2 * p - k
    m = (-((-span) // s) if ceil_mode else span // s) + 1
    if m < 1:
        raise ConfigError(f"conv output length < 1 (n={n}, k={k}, s={s}, p={p})")
    return m


# ---------------------------------------------------------------------------
# Raw n-d convolution kernels (batched, pure numpy)
# ---------------------------------------------------------------------------


def _conv_pads(spatial, kernel, stride, padding, out_sp):
    """Per-axis (before, after) pads; ceil mode zero-fills bottom/right."""
    pads = [(0, 0), (0, 0)]
    for i in range(len(kernel)):
        need = (out_sp[i] - 1) * stride[i] + kernel[i]
        extra = max(0, need - (spatial[i] + 2 * padding[i]))
        pads.append((padding[i], padding[i] + extra))
    return pads


def _offset_slices(kidx, out_sp, stride):
    return (slice(None), slice(None)) + tuple(
        slice(kidx[i], kidx[i] + out_sp[i] * stride[i], stride[i])
        for i in range(len(kidx))
    )


def _im2col(xp, kernel, stride, out_sp):
    """[N,C,*padded] -> [C*prod(kernel), N*prod(out)] via per-offset copies."""
    n, c = xp.shape[:2]
    k_total = int(np.prod(kernel))
    o_total = n * int(np.prod(out_sp))
    cols = np.empty((c, k_total, o_total))
    for ki, kidx in enumerate(np.ndindex(*kernel)):
        block = xp[_offset_slices(kidx, out_sp, stride)]  # [N, C, *out]
        cols[:, ki, :] = np.moveaxis(block, 1, 0).reshape(c, o_total)
    return cols.reshape(c * k_total, o_total)


def _convnd_forward(x, w, stride, padding, ceil_mode, return_cols=False):
    """x: [N, C, *spatial], w: [O, C, *kernel] -> [N, O, *out_spatial]."""
    nd = w.ndim - 2
    spatial = x.shape[2:]
    kernel = w.shape[2:]
    out_sp = tuple(
        _out_len(spatial[i], kernel[i], stride[i], padding[i], ceil_mode)
        for i in range(nd)
    )
    pads = _conv_pads(spatial, kernel, stride, padding, out_sp)
    xp = np.pad(x, pads) if any(lo or hi for lo, hi in pads) else x
    n, o = x.shape[0], w.shape[0]
    cols = _im2col(xp, kernel, stride, out_sp)
    y = w.reshape(o, -1) @ cols  # [O, N*prod(out)]
    y = y.reshape((o, n) + out_sp)
    y = np.ascontiguousarray(np.moveaxis(y, 1, 0))
    return (y, cols) if return_cols else y


def _convnd_backward(x, w, gy, stride, padding, ceil_mode, need_gx, need_gw,
                     cols=None):
    """Exact gradients of ``_convnd_forward`` w.r.t. input and weights."""
    nd = w.ndim - 2
    n = x.shape[0]
    kernel = w.shape[2:]
    out_sp = gy.shape[2:]
    pads = _conv_pads(x.shape[2:], kernel, stride, padding, out_sp)
    o = w.shape[0]
    gy_mat = np.moveaxis(gy, 1, 0).reshape(o, -1)  # [O, N*prod(out)]

    gw = None
    if need_gw:
        if cols is None:
            xp = np.pad(x, pads) if any(lo or hi for lo, hi in pads) else x
            cols = _im2col(xp, kernel, stride, out_sp)
        gw = (gy_mat @ cols.T).reshape(w.shape)

    gx = None
    if need_gx:
        gcols = w.reshape(o, -1).T @ gy_mat  # [C*prod(kernel), N*prod(out)]
        c = w.shape[1]
        gcols = gcols.reshape((c,) + tuple(kernel) + (n,) + tuple(out_sp))
        padded_shape = tuple(x.shape[2 + i] + sum(pads[2 + i]) for i in range(nd))
        gxp = np.zeros((n, c) + padded_shape)
        for kidx in np.ndindex(*kernel):
            block = gcols[(slice(None),) + kidx]  # [C, N, *out]
            gxp[_offset_slices(kidx, out_sp, stride)] += np.moveaxis(block, 1, 0)
        crop = (slice(None), slice(None)) + tuple(
            slice(pads[2 + i][0], pads[2 + i][0] + x.shape[2 + i]) for i in range(nd)
        )
        gx = np.ascontiguousarray(gxp[crop])
    return gx, gw


def _check_conv_shapes(x, w, spec_in, nd, op):
    if x.ndim not in (nd + 1, nd + 2):
        raise DimensionError(f"{op}: input must be {nd + 1}-d or batched, got {x.shape}")
    chan = x.shape[0] if x.ndim == nd + 1 else x.shape[1]
    if chan != w.shape[1]:
        raise DimensionError(f"{op}: input channels {x.shape} vs weights {w.shape}")
    if spec_in is not None and chan != spec_in:
        raise DimensionError(f"{op}: input {x.shape} does not carry {spec_in} channels")


# ---------------------------------------------------------------------------
# Autograd-aware functional ops
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, spec: ConvSpec, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """2-d cross-correlation with zero padding per ``spec``.

    ``x`` is [C,H,W] or [N,C,H,W]; ``weights`` is [O,C,kh,kw]; optional
    ``bias`` is [O]. No bias is added unless one is passed.
    """
    _check_conv_shapes(x.data, weights.data, spec.in_channels, 2, "conv2d")
    if weights.data.shape[:2] != (spec.out_channels, spec.in_channels) or \
            weights.data.shape[2:] != tuple(spec.kernel):
        raise DimensionError(
            f"conv2d: weights {weights.shape} do not match spec {spec}"
        )
    return _conv_apply(x, weights, bias, spec.stride, spec.padding,
                       spec.rounding == "ceil", 2, "conv2d")


def conv3d(x: Tensor, weights: Tensor, stride=(1, 1, 1), padding=(0, 0, 0),
           bias: Tensor | None = None) -> Tensor:
    """3-d cross-correlation over [C,T,H,W] (or batched), floor rounding."""
    _check_conv_shapes(x.data, weights.data, None, 3, "conv3d")
    return _conv_apply(x, weights, bias, tuple(stride), tuple(padding), False, 3, "conv3d")


_COLS_CACHE_LIMIT = 48 * 1024 * 1024  # bytes of im2col worth keeping for backward


def _conv_apply(x, weights, bias, stride, padding, ceil_mode, nd, op):
    unbatched = x.data.ndim == nd + 1
    xd = x.data[None] if unbatched else x.data
    keep_cols = weights.requires_grad or x.requires_grad
    y, cols = _convnd_forward(xd, weights.data, stride, padding, ceil_mode,
                              return_cols=True)
    if not (keep_cols and cols.nbytes <= _COLS_CACHE_LIMIT):
        cols = None
    if bias is not None:
        if bias.data.shape != (weights.data.shape[0],):
            raise DimensionError(f"{op}: bias {bias.shape} vs out channels {weights.shape[0]}")
        y = y + bias.data.reshape((1, -1) + (1,) * nd)
    out_data = y[0] if unbatched else y

    parents = (x, weights) if bias is None else (x, weights, bias)

    def _bwd(g):
        gb = g[None] if unbatched else g
        gx, gw = _convnd_backward(
            xd, weights.data, gb, stride, padding, ceil_mode,
            x.requires_grad, weights.requires_grad, cols=cols,
        )
        if gx is not None:
            x.accumulate_grad(gx[0] if unbatched else gx)
        if gw is not None:
            weights.accumulate_grad(gw)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(gb.sum(axis=(0,) + tuple(range(2, 2 + nd))))

    return Tensor.from_op(out_data, parents, _bwd, op)


def conv2d_grad(x: Tensor, spec: ConvSpec, weights: Tensor,
                upstream_grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reverse-mode gradients of :func:`conv2d` for a given upstream gradient."""
    _check_conv_shapes(x.data, weights.data, spec.in_channels, 2, "conv2d_grad")
    unbatched = x.data.ndim == 3
    xd = x.data[None] if unbatched else x.data
    gy = np.asarray(upstream_grad, dtype=np.float64)
    gyb = gy[None] if unbatched else gy
    h, w = xd.shape[2], xd.shape[3]
    expect = (xd.shape[0], spec.out_channels, *spec.out_size(h, w))
    if gyb.shape != expect:
        raise DimensionError(
            f"conv2d_grad: upstream {gy.shape} does not match forward output {expect}"
        )
    gx, gw = _convnd_backward(xd, weights.data, gyb, spec.stride, spec.padding,
                              spec.rounding == "ceil", True, True)
    return (gx[0] if unbatched else gx), gw


def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map: [n] -> [m] via weights [m,n], or batched [N,n] -> [N,m]."""
    w = weights.data
    if w.ndim != 2 or x.data.shape[-1] != w.shape[1]:
        raise DimensionError(f"dense: input {x.shape} vs weights {weights.shape}")
    if bias is not None and bias.data.shape != (w.shape[0],):
        raise DimensionError(f"dense: bias {bias.shape} vs weights {weights.shape}")
    y = x.data @ w.T
    if bias is not None:
        y = y + bias.data
    parents = (x, weights) if bias is None else (x, weights, bias)

    def _bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g @ w)
        if weights.requires_grad:
            if g.ndim == 1:
                weights.accumulate_grad(np.outer(g, x.data))
            else:
                weights.accumulate_grad(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g if g.ndim == 1 else g.sum(axis=0))

    return Tensor.from_op(y, parents, _bwd, "dense")


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: scales kept units by 1/(1-rate) at train time."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0,1), got {rate}")
    if rate == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)

    def _bwd(g):
        x.accumulate_grad(g * mask)

    return Tensor.from_op(x.data * mask, (x,), _bwd, "dropout")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all axes after the channel axis: [C, *spatial] -> [C]."""
    axes = tuple(range(1, x.data.ndim))
    n = int(np.prod(x.data.shape[1:]))
    out_data = x.data.mean(axis=axes)

    def _bwd(g):
        x.accumulate_grad(np.broadcast_to(
            g.reshape((-1,) + (1,) * (x.data.ndim - 1)), x.data.shape) / n)

    return Tensor.from_op(out_data, (x,), _bwd, "global_avg_pool")


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------


class Module:
    """Minimal parameter container with named traversal.

    Attributes that are trainable ``Tensor``s, ``Module``s, or lists of
    either are discovered in definition order, giving stable names for
    checkpoints and optimizers.
    """

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        self._walk("", out, buffers=False)
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out: list[tuple[str, np.ndarray]] = []
        self._walk("", out, buffers=True)
        return out

    def _local_buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def _walk(self, prefix: str, out: list, buffers: bool) -> None:
        if buffers:
            for name, arr in self._local_buffers():
                out.append((prefix + name, arr))
        for name, value in vars(self).items():
            key = prefix + name
            if isinstance(value, Tensor):
                if not buffers and value.requires_grad:
                    out.append((key, value))
            elif isinstance(value, Module):
                value._walk(key + ".", out, buffers)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        item._walk(f"{key}.{i}.", out, buffers)
                    elif isinstance(item, Tensor) and not buffers and item.requires_grad:
                        out.append((f"{key}.{i}", item))

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: arr for name, arr in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise DimensionError(f"checkpoint missing parameter {name!r}")
            if state[name].shape != p.data.shape:
                raise DimensionError(
                    f"parameter {name!r}: checkpoint {state[name].shape} vs model {p.data.shape}"
                )
            p.data = np.ascontiguousarray(state[name], dtype=np.float64)
        for name, arr in self.named_buffers():
            if name not in state:
                raise DimensionError(f"checkpoint missing buffer {name!r}")
            arr[...] = state[name]


def count_parameters(model) -> int:
    """Total element count over all trainable tensors of a model."""
    if isinstance(model, Module):
        return sum(p.data.size for _, p in model.named_parameters())
    return sum(p.data.size for _, p in model)


def uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    """Weight init: uniform on +-sqrt(1/fan_in)."""
    bound = float(np.sqrt(1.0 / fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Conv2d(Module):
    """Convolution layer owning its kernel (and optional bias)."""

    def __init__(self, spec: ConvSpec, rng: np.random.Generator, with_bias: bool = True):
        self.spec = spec
        fan_in = spec.in_channels * spec.kernel[0] * spec.kernel[1]
        self.weight = uniform_fan_in(
            rng, (spec.out_channels, spec.in_channels, *spec.kernel), fan_in)
        self.bias = Tensor(np.zeros(spec.out_channels), requires_grad=True) if with_bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.spec, self.weight, self.bias)


class Conv3d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: tuple[int, int, int],
                 stride: tuple[int, int, int], padding: tuple[int, int, int],
                 rng: np.random.Generator, with_bias: bool = True):
        self.stride = tuple(stride)
        self.padding = tuple(padding)
        fan_in = in_channels * int(np.prod(kernel))
        self.weight = uniform_fan_in(rng, (out_channels, in_channels, *kernel), fan_in)
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if with_bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.stride, self.padding, self.bias)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 with_bias: bool = True):
        self.weight = uniform_fan_in(rng, (out_features, in_features), in_features)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if with_bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self.weight, self.bias)


class BatchNorm(Module):
    """Batch normalization over everything but the channel axis.

    ``feature_ndim`` declares the rank of one unbatched sample (1 for
    vectors, 3 for [C,H,W] maps, 4 for [C,T,H,W] volumes); inputs of rank
    ``feature_ndim + 1`` are treated as batches with channels on axis 1.
    Train mode normalizes with the statistics of the values it is given
    and folds them into running estimates with momentum 0.1; eval mode
    applies the running estimates.
    """

    EPS = 1e-5
    MOMENTUM = 0.1

    def __init__(self, channels: int, feature_ndim: int):
        if channels < 1:
            raise ConfigError("batch norm needs at least one channel")
        self.channels = channels
        self.feature_ndim = feature_ndim
        self.scale = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def _local_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return batch_norm(x, self, mode)


def batch_norm(x: Tensor, params: BatchNorm, mode: str) -> Tensor:
    """Normalize per channel, then scale and shift. See :class:`BatchNorm`."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"batch_norm mode must be train or eval, got {mode!r}")
    d = x.data
    if d.ndim == params.feature_ndim:
        ch_axis = 0
    elif d.ndim == params.feature_ndim + 1:
        ch_axis = 1
    else:
        raise DimensionError(
            f"batch_norm: rank {d.ndim} input for feature_ndim {params.feature_ndim}")
    if d.shape[ch_axis] != params.channels:
        raise DimensionError(
            f"batch_norm: {d.shape[ch_axis]} channels in input {d.shape}, "
            f"expected {params.channels}")
    reduce_axes = tuple(i for i in range(d.ndim) if i != ch_axis)
    if d.size == 0:
        raise DimensionError("batch_norm: zero-size input")

    bshape = tuple(params.channels if i == ch_axis else 1 for i in range(d.ndim))
    if mode == "train":
        mean = d.mean(axis=reduce_axes)
        var = d.var(axis=reduce_axes)
        params.running_mean *= 1.0 - params.MOMENTUM
        params.running_mean += params.MOMENTUM * mean
        params.running_var *= 1.0 - params.MOMENTUM
        params.running_var += params.MOMENTUM * var
    else:
        mean = params.running_mean
        var = params.running_var
    inv_std = 1.0 / np.sqrt(var + params.EPS)
    xhat = (d - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out_data = params.scale.data.reshape(bshape) * xhat + params.shift.data.reshape(bshape)

    scale, shift = params.scale, params.shift

    def _bwd(g):
        if scale.requires_grad:
            scale.accumulate_grad((g * xhat).sum(axis=reduce_axes))
        if shift.requires_grad:
            shift.accumulate_grad(g.sum(axis=reduce_axes))
        if x.requires_grad:
            gs = g * scale.data.reshape(bshape)
            if mode == "eval":
                x.accumulate_grad(gs * inv_std.reshape(bshape))
            elif not reduce_axes:
                # one element per channel: xhat == 0 identically, so dy/dx == 0
                x.accumulate_grad(np.zeros_like(gs))
            else:
                gmean = gs.mean(axis=reduce_axes, keepdims=True)
                gdot = (gs * xhat).mean(axis=reduce_axes, keepdims=True)
                x.accumulate_grad(inv_std.reshape(bshape) * (gs - gmean - xhat * gdot))

    return Tensor.from_op(out_data, (x, scale, shift), _bwd, "batch_norm")
