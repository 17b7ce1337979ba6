"""Small layer library on top of the tensor engine.

Modules own their parameters as attributes; ``named_parameters`` walks the
attribute tree in creation order, which gives stable names for checkpoints
and for the inference-purity tracker.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

ATTN_MASK_FILL = -1e9


class Module:
    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[path] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{path}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{path}.{i}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{path}.{i}"] = item
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def bind_names(self, prefix: str = "") -> None:
        """Stamp each parameter with its tree path (used by access tracking)."""
        for name, p in self.named_parameters(prefix).items():
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def parameter(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(np.ascontiguousarray(data), requires_grad=True, name=name)


def normal_init(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 dtype=np.float32, bias: bool = True, init_std: float = 0.02):
        self.weight = parameter(normal_init(rng, (n_in, n_out), init_std, dtype))
        self.bias = parameter(np.zeros(n_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = parameter(np.ones(dim, dtype=dtype))
        self.beta = parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, count: int, dim: int, rng: np.random.Generator,
                 dtype=np.float32, init_std: float = 0.02):
        self.weight = parameter(normal_init(rng, (count, dim), init_std, dtype))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.gather_rows(self.weight, ids)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, L, d) -> (B, H, L, d/H)."""
    b, l, d = x.shape
    return T.permute(T.reshape(x, (b, l, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """(B, H, L, d_h) -> (B, L, H*d_h)."""
    b, h, l, dh = x.shape
    return T.reshape(T.permute(x, (0, 2, 1, 3)), (b, l, h * dh))


def key_mask_bias(valid: np.ndarray, dtype) -> Tensor:
    """Additive attention bias from a (B, L) key-validity mask."""
    bias = np.where(valid, 0.0, ATTN_MASK_FILL).astype(dtype)
    return Tensor(bias[:, None, None, :])


class SelfAttention(Module):
    """Standard multi-head self-attention, scores scaled by 1/sqrt(d_head)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if dim % heads:
            raise ConfigError(f"attention width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.scale = 1.0 / np.sqrt(dim // heads)
        self.q = Linear(dim, dim, rng, dtype)
        # no key bias: softmax scores are invariant to it, so it would be a
        # dead parameter with a structurally zero gradient
        self.k = Linear(dim, dim, rng, dtype, bias=False)
        self.v = Linear(dim, dim, rng, dtype)
        self.out = Linear(dim, dim, rng, dtype)

    def __call__(self, x: Tensor, mask_bias: Tensor | None = None) -> Tensor:
        q = split_heads(self.q(x), self.heads)
        k = split_heads(self.k(x), self.heads)
        v = split_heads(self.v(x), self.heads)
        scores = T.mul(T.matmul(q, T.permute(k, (0, 1, 3, 2))),
                       T.tensor(np.asarray(self.scale, dtype=x.dtype)))
        if mask_bias is not None:
            scores = T.add(scores, mask_bias)
        attn = T.softmax(scores, axis=-1)
        return self.out(merge_heads(T.matmul(attn, v)))


class TransformerBlock(Module):
    """Pre-norm block: x + attn(LN(x)), then x + mlp(LN(x)) with GELU."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 dtype=np.float32, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(dim, dtype)
        self.attn = SelfAttention(dim, heads, rng, dtype)
        self.ln2 = LayerNorm(dim, dtype)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng, dtype)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng, dtype)

    def __call__(self, x: Tensor, mask_bias: Tensor | None = None) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x), mask_bias))
        return T.add(x, self.fc2(T.gelu(self.fc1(self.ln2(x)))))


class Adam:
    """Adam with bias correction; constant learning rate, no weight decay."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        correct1 = 1.0 - b1 ** self.t
        correct2 = 1.0 - b2 ** self.t
        for key, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[key] = b1 * self.m[key] + (1.0 - b1) * g
            self.v[key] = b2 * self.v[key] + (1.0 - b2) * (g * g)
            m_hat = self.m[key] / correct1
            v_hat = self.v[key] / correct2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
