"""Parameter containers and the small set of layers the detector is built from."""

from __future__ import annotations

import math
import weakref
from typing import Iterator

import numpy as np

from omdet.autodiff import functional as F
from omdet.autodiff.tensor import Tensor, get_default_dtype
from omdet.errors import ConfigError


_PARAMETERS: "weakref.WeakSet[Tensor]" = weakref.WeakSet()


def Parameter(data, name: str | None = None, dtype=None) -> Tensor:
    """A trainable tensor; it stays a parameter even while frozen (requires_grad off)."""
    t = Tensor(data, requires_grad=True, name=name, dtype=dtype)
    _PARAMETERS.add(t)
    return t


def is_parameter(value) -> bool:
    return isinstance(value, Tensor) and value in _PARAMETERS


class Module:
    """Recursive parameter registry keyed by dotted attribute path.

    Parameters are tensors made by ``Parameter``; children are Modules or
    lists of Modules. Iteration order follows attribute assignment order, so
    parameter naming is a pure function of construction.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            path = f"{prefix}{key}"
            if is_parameter(value):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
            elif isinstance(value, dict):
                for k in value:
                    item = value[k]
                    if is_parameter(item):
                        yield f"{path}.{k}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{k}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.named_parameters() if p.requires_grad}

    def cast(self, dtype) -> "Module":
        """Rebind every parameter array to ``dtype`` (used for 64-bit checks)."""
        for p in self.parameters().values():
            p.data = np.ascontiguousarray(p.data.astype(dtype))
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, scale: float = 1.0):
        bound = scale * math.sqrt(6.0 / (d_in + d_out))
        self.weight = Parameter(_uniform(rng, bound, (d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.weight = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int):
        if channels % groups:
            raise ConfigError(f"GroupNorm: {channels} channels not divisible into {groups} groups")
        self.groups = groups
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.group_norm(x, self.groups, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True):
        fan_in = c_in * kernel * kernel
        bound = math.sqrt(6.0 / fan_in)
        self.weight = Parameter(_uniform(rng, bound, (c_out, c_in, kernel, kernel)))
        self.bias = Parameter(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class AttentionWeights(Module):
    """Fused QKV projection, output projection and post-residual LayerNorm."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.qkv = Linear(d, 3 * d, rng)
        self.out = Linear(d, d, rng)
        self.norm = LayerNorm(d)


def mhsa(seq: Tensor, params: AttentionWeights, heads: int, key_mask: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention with residual connection and LayerNorm.

    ``seq`` is (L, d) or (B, L, d). ``key_mask`` (L,) or (B, L) marks valid
    positions; invalid keys receive exactly zero attention and invalid query
    rows attend to nothing. No positional information is injected.
    """
    d = seq.shape[-1]
    if d % heads:
        raise ConfigError(f"mhsa: model width {d} is not divisible by {heads} heads")
    if seq.ndim not in (2, 3) or seq.shape[-2] < 1:
        raise ConfigError(f"mhsa: expected (L, d) or (B, L, d) with L >= 1, got {seq.shape}")
    squeeze = seq.ndim == 2
    x = F.reshape(seq, (1,) + seq.shape) if squeeze else seq
    bsz, length, _ = x.shape
    dh = d // heads
    qkv = F.reshape(params.qkv(x), (bsz, length, 3, heads, dh))
    qkv = F.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, h, L, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = F.mul(F.matmul(q, F.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    mask = None
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool).reshape(-1 if not squeeze else 1, length)
        km = np.broadcast_to(km, (bsz, length))
        # query row i may attend key j iff both are valid positions
        mask = (km[:, None, :, None] & km[:, None, None, :])
    attn = F.softmax(scores, axis=-1, mask=mask)
    ctx = F.reshape(F.transpose(F.matmul(attn, v), (0, 2, 1, 3)), (bsz, length, d))
    out = params.norm(F.add(x, params.out(ctx)))
    return F.reshape(out, seq.shape) if squeeze else out


class MultiHeadSelfAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ConfigError(f"model width {d} is not divisible by {heads} heads")
        self.heads = heads
        self.weights = AttentionWeights(d, rng)

    def forward(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        return mhsa(x, self.weights, self.heads, key_mask)


class FeedForward(Module):
    """Post-norm position-wise MLP block: LN(x + W2 gelu(W1 x))."""

    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)
        self.norm = LayerNorm(d)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(F.add(x, self.fc2(F.gelu(self.fc1(x)))))
