"""Parameter containers and the attention building blocks."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from coal import tensor as T
from coal.tensor import Parameter, Tensor


class Module:
    """Owns parameters and submodules; names are assigned by attribute path."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, root: str) -> None:
        seen = set()
        for path, p in self.named_parameters():
            p.name = f"{root}.{path}" if root else path
            if p.name in seen:
                raise ValueError(f"duplicate parameter name {p.name}")
            seen.add(p.name)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise KeyError(f"missing parameter {p.name}")
            value = state[p.name]
            if value.shape != p.shape or value.dtype != p.dtype:
                raise ValueError(
                    f"{p.name}: stored {value.dtype}{value.shape}, expected {p.dtype}{p.shape}"
                )
            p.data = value.copy()


class Linear(Module):
    """``y = x W + b`` on the last axis.

    Weights are drawn from uniform(+-1/sqrt(fan_in)); biases start at zero.
    ``exact`` selects per-row kernels (see ``tensor.matmul``).
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=None, exact: bool = False):
        dtype = dtype or T.default_dtype()
        bound = 1.0 / np.sqrt(d_in)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype))
        self.exact = exact

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight, exact=self.exact) + self.bias


class MultiHeadCrossAttention(Module):
    """Scaled dot-product cross-attention with learned q/k/v/out projections.

    Inputs are ``(B, Lq, d)`` queries and ``(B, Lk, d)`` keys/values (leading
    batch axes broadcast unless ``exact``, which needs them equal). Residual
    addition is left to the caller.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=None, exact: bool = False):
        if d % heads:
            raise ValueError(f"model dimension {d} is not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.exact = exact
        self.q_proj = Linear(d, d, rng, dtype, exact)
        self.k_proj = Linear(d, d, rng, dtype, exact)
        self.v_proj = Linear(d, d, rng, dtype, exact)
        self.out_proj = Linear(d, d, rng, dtype, exact)

    def _split(self, x: Tensor) -> Tensor:
        lead = x.shape[:-2]
        length = x.shape[-2]
        x = x.reshape(lead + (length, self.heads, self.d // self.heads))
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return x.transpose(axes)

    def attention_weights(self, q: Tensor, k: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        qh = self._split(self.q_proj(q))
        kh = self._split(self.k_proj(k))
        kt = T.transpose(kh, _swap_last(kh.ndim))
        scores = T.matmul(qh, kt, exact=self.exact) * (1.0 / np.sqrt(self.d // self.heads))
        mask = None
        if key_mask is not None:
            # (..., Lk) -> (..., 1, 1, Lk) against (..., heads, Lq, Lk)
            mask = np.asarray(key_mask, dtype=bool)[..., None, None, :]
        return T.softmax(scores, axis=-1, mask=mask)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        squeeze = q.ndim == 2 and k.ndim == 2 and v.ndim == 2
        if squeeze:
            q, k, v = (x.reshape((1,) + x.shape) for x in (q, k, v))
            if key_mask is not None:
                key_mask = np.asarray(key_mask)[None]
        if q.shape[-1] != self.d or k.shape[-1] != self.d or v.shape[-1] != self.d:
            raise ValueError(f"attention inputs must share dimension {self.d}")
        weights = self.attention_weights(q, k, key_mask)
        vh = self._split(self.v_proj(v))
        mixed = T.matmul(weights, vh, exact=self.exact)
        lead = mixed.shape[:-3]
        n = len(lead)
        mixed = mixed.transpose(tuple(range(n)) + (n + 1, n, n + 2))
        mixed = mixed.reshape(lead + (mixed.shape[-3], self.d))
        out = self.out_proj(mixed)
        if squeeze:
            out = out.reshape(out.shape[1:])
        return out


def _swap_last(ndim: int) -> tuple[int, ...]:
    return tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)
