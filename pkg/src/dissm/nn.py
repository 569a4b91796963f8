"""Parameter containers and the handful of layers the model is built from."""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


_placeholder = False


@contextmanager
def placeholder_parameters() -> Iterator[None]:
    """Build modules whose parameters are zero-stride zero arrays.

    Used to trace shapes and operation counts of models too large to
    materialise; the random draws are skipped entirely.
    """
    global _placeholder
    prev, _placeholder = _placeholder, True
    try:
        yield
    finally:
        _placeholder = prev


def _zeros_view(shape, dtype) -> np.ndarray:
    return np.broadcast_to(np.zeros((), dtype=dtype), tuple(shape))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=None) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    if _placeholder:
        return _zeros_view(shape, dtype or T.default_dtype())
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype or T.default_dtype())


def uniform(rng: np.random.Generator, shape, bound: float, dtype=None) -> np.ndarray:
    """Uniform(-bound, bound)."""
    if _placeholder:
        return _zeros_view(shape, dtype or T.default_dtype())
    return rng.uniform(-bound, bound, shape).astype(dtype or T.default_dtype())


def param(data) -> Tensor:
    if _placeholder:
        return Tensor(_zeros_view(np.shape(data), T.default_dtype()), requires_grad=True)
    return Tensor(np.asarray(data, dtype=T.default_dtype()), requires_grad=True)


class Module:
    """Walks attributes to find parameters; names are dotted attribute paths."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, std: float = 0.02):
        self.weight = param(trunc_normal(rng, (d_in, d_out), std))
        self.bias = param(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


def causal_depthwise_conv1d(x, weight, bias) -> Tensor:
    """Per-channel causal convolution along axis -2.

    ``x`` is ``[..., M, C]``, ``weight`` is ``[C, K]`` and output position ``m``
    sees inputs ``m-K+1 .. m`` (zero padded on the left).
    """
    x, weight, bias = T._coerce(x, weight, bias)
    c, k = weight.shape
    if x.shape[-1] != c or bias.shape != (c,):
        raise T.DimensionError(f"conv1d: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    m = x.shape[-2]
    xd = x.data
    pad = [(0, 0)] * (xd.ndim - 2) + [(k - 1, 0), (0, 0)]
    xp = np.pad(xd, pad)
    w = weight.data
    out = np.broadcast_to(bias.data, xd.shape).copy()
    for j in range(k):
        out += xp[..., j:j + m, :] * w[:, j]
    T.tally("conv", int(np.prod(xd.shape)) * k)

    def back(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w)
        lead = tuple(range(g.ndim - 1))
        for j in range(k):
            gxp[..., j:j + m, :] += g * w[:, j]
            gw[:, j] = (g * xp[..., j:j + m, :]).sum(axis=lead)
        return gxp[..., k - 1:, :], gw, g.sum(axis=lead)

    return T._result(out, (x, weight, bias), back, "conv1d")


class DepthwiseConv1d(Module):
    def __init__(self, channels: int, kernel: int, rng: np.random.Generator):
        self.weight = param(uniform(rng, (channels, kernel), 1.0 / np.sqrt(kernel)))
        self.bias = param(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return causal_depthwise_conv1d(x, self.weight, self.bias)
