"""Small trainable layers built on the autograd engine.

Every layer exposes ``params() -> dict[str, Tensor]`` with stable names so
optimizers and checkpoints can address parameters uniformly.
"""

from __future__ import annotations

import numpy as np

from .autograd import (
    Tensor,
    gather_rows,
    layer_norm,
    matmul,
    relu,
    sigmoid,
    softmax,
    transpose_last,
)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    scale = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(scale=scale, size=shape or (fan_in, fan_out))


class Linear:
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = Tensor(glorot(rng, d_in, d_out), requires_grad=True, name="weight")
        self.bias = Tensor(np.zeros(d_out), requires_grad=True, name="bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out

    def params(self) -> dict[str, Tensor]:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


class MLP:
    """Two-layer perceptron with ReLU between and an optional output squash."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int,
                 out_sigmoid: bool = False):
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out)
        self.out_sigmoid = out_sigmoid

    def __call__(self, x: Tensor) -> Tensor:
        h = relu(self.fc1(x))
        out = self.fc2(h)
        return sigmoid(out) if self.out_sigmoid else out

    def params(self) -> dict[str, Tensor]:
        return {**_prefix("fc1", self.fc1.params()), **_prefix("fc2", self.fc2.params())}


class LayerNorm:
    def __init__(self, d: int):
        self.gain = Tensor(np.ones(d), requires_grad=True, name="gain")
        self.bias = Tensor(np.zeros(d), requires_grad=True, name="bias")

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)

    def params(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "bias": self.bias}


class TransformerEncoderLayer:
    """Pre-norm single-head self-attention block with learned positions.

    Input and output are (Z, S, d). The positional table has exactly
    ``max_len`` rows; longer sequences are a contract violation.
    """

    def __init__(self, rng: np.random.Generator, d: int, max_len: int,
                 ff_hidden: int | None = None):
        self.d = d
        self.max_len = max_len
        self.pos = Tensor(rng.normal(scale=0.02, size=(max_len, d)),
                          requires_grad=True, name="pos")
        self.wq = Linear(rng, d, d)
        self.wk = Linear(rng, d, d)
        self.wv = Linear(rng, d, d)
        self.wo = Linear(rng, d, d)
        self.ln1 = LayerNorm(d)
        self.ln2 = LayerNorm(d)
        hidden = ff_hidden or 2 * d
        self.ff1 = Linear(rng, d, hidden)
        self.ff2 = Linear(rng, hidden, d)

    def __call__(self, x: Tensor) -> Tensor:
        s = x.shape[-2]
        if s > self.max_len:
            raise ValueError(f"sequence length {s} exceeds positional table {self.max_len}")
        pos = gather_rows(self.pos, np.arange(s))
        h = x + pos
        normed = self.ln1(h)
        q, k, v = self.wq(normed), self.wk(normed), self.wv(normed)
        att = softmax(matmul(q, transpose_last(k)) * (1.0 / np.sqrt(self.d)))
        h = h + self.wo(matmul(att, v))
        h = h + self.ff2(relu(self.ff1(self.ln2(h))))
        return h

    def params(self) -> dict[str, Tensor]:
        out = {"pos": self.pos}
        for name, part in [("wq", self.wq), ("wk", self.wk), ("wv", self.wv),
                           ("wo", self.wo), ("ln1", self.ln1), ("ln2", self.ln2),
                           ("ff1", self.ff1), ("ff2", self.ff2)]:
            out.update(_prefix(name, part.params()))
        return out


class PerPositionMLP:
    """Two-layer perceptron applied independently at each sequence position."""

    def __init__(self, rng: np.random.Generator, d: int, hidden: int | None = None):
        self.net = MLP(rng, d, hidden or 2 * d, d)

    def __call__(self, x: Tensor) -> Tensor:
        return self.net(x)

    def params(self) -> dict[str, Tensor]:
        return self.net.params()


def _prefix(name: str, params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {f"{name}.{k}": v for k, v in params.items()}
