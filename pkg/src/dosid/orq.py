"""Orthogonal residual quantization.

Each layer rotates its input with a trainable square matrix (pressured
toward orthogonality by a penalty, never re-projected), scores dimensions
with a small MLP, splits the rotated features into a top-k primary part and
its complement, quantizes the primary part against a codebook, and hands
``secondary + residual`` to the next layer. The rotation keeps width d
constant, so the carry is an elementwise sum over (nearly) disjoint
supports rather than a concatenation.

Hard decisions (top-k, nearest code) are computed on raw arrays; gradient
routes around them are built explicitly from ``stop_gradient``:

* scorer:    ``mask * x_orth + (scores - sg(scores)) * x_orth``
* quantizer: ``sg(code) + (x_pri - sg(x_pri))`` (forward value is exactly
  the code vector; gradient flows to the primary features only, the
  codebook learns through the VQ loss alone)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, gather_rows, matmul, stop_gradient, transpose_last
from .nn import MLP


def straight_through(value: Tensor, grad_path: Tensor) -> Tensor:
    """Forward the exact value of ``value``; send gradients to ``grad_path``."""
    return stop_gradient(value) + (grad_path - stop_gradient(grad_path))


def topk_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """0/1 mask of the k largest entries along the last axis, ties to lowest index."""
    if not 1 <= k <= scores.shape[-1]:
        raise ValueError(f"k={k} out of range for width {scores.shape[-1]}")
    order = np.argsort(-scores, axis=-1, kind="stable")
    mask = np.zeros_like(scores)
    np.put_along_axis(mask, order[..., :k], 1.0, axis=-1)
    return mask


def nearest_code(points: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Index of the closest code per row (squared Euclidean, ties to lowest index).

    Distances use the same direct form as a brute-force scan so assignment
    agrees with the oracle even at exact ties.
    """
    dists = ((points[:, None, :] - codes[None, :, :]) ** 2).sum(axis=-1)
    return dists.argmin(axis=1)


class OrthoMap:
    """Trainable square rotation, QR-initialized so training starts orthogonal."""

    def __init__(self, rng: np.random.Generator, d: int):
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        self.weight = Tensor(q, requires_grad=True, name="ortho")
        self.d = d

    def params(self) -> dict[str, Tensor]:
        return {"weight": self.weight}


class Codebook:
    """K trainable code vectors plus usage accounting for dead-code repair.

    Codes start uninitialized and are seeded from the first batch of inputs
    they quantize (sampled rows plus small jitter), which keeps early
    assignments spread across the data instead of collapsing to one code.
    """

    def __init__(self, size: int, dim: int, rng: np.random.Generator | None = None,
                 vectors: np.ndarray | None = None):
        if size < 1:
            raise ValueError("codebook size must be >= 1")
        self.size = size
        self.dim = dim
        if vectors is not None:
            vectors = np.asarray(vectors, dtype=np.float64)
            if vectors.shape != (size, dim):
                raise ValueError(f"codebook vectors must be {(size, dim)}, got {vectors.shape}")
            self.codes = Tensor(vectors, requires_grad=True, name="codes")
            self.initialized = True
        else:
            self.codes = Tensor(np.zeros((size, dim)), requires_grad=True, name="codes")
            self.initialized = False
        self._rng = rng
        self.usage = np.zeros(size, dtype=np.int64)
        self.last_inputs: np.ndarray | None = None

    def ensure_init(self, donors: np.ndarray) -> None:
        if self.initialized:
            return
        if self._rng is None:
            raise RuntimeError("codebook has no rng for data-driven initialization")
        picks = self._rng.choice(donors.shape[0], size=self.size,
                                 replace=donors.shape[0] < self.size)
        jitter = 0.01 * donors.std() + 1e-8
        self.codes.assign(donors[picks] + self._rng.normal(scale=jitter,
                                                           size=(self.size, self.dim)))
        self.initialized = True

    def note_usage(self, indices: np.ndarray) -> None:
        self.usage += np.bincount(indices.reshape(-1), minlength=self.size)

    def reset_usage(self) -> None:
        self.usage[:] = 0

    def params(self) -> dict[str, Tensor]:
        return {"codes": self.codes}


class DimScorer:
    """Two-layer perceptron emitting per-dimension scores in (0, 1)."""

    def __init__(self, rng: np.random.Generator, d: int, hidden: int | None = None):
        self.net = MLP(rng, d, hidden or d, d, out_sigmoid=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.net(x)

    def params(self) -> dict[str, Tensor]:
        return self.net.params()


@dataclass
class LayerTrace:
    scores: Tensor
    mask: np.ndarray
    x_orth: Tensor
    x_pri: Tensor
    x_sec: Tensor
    code_index: np.ndarray
    code_vec: Tensor
    quantized: Tensor  # straight-through: value is the code, gradient goes to x_pri
    x_resi: Tensor


@dataclass
class QuantTrace:
    layers: list[LayerTrace] = field(default_factory=list)
    x_next: Tensor | None = None  # leftover after the last layer


class ORQLayer:
    def __init__(self, rng: np.random.Generator, d: int, k: int, codebook: Codebook,
                 scorer_hidden: int | None = None):
        if not 1 <= k <= d:
            raise ValueError(f"k={k} must lie in [1, {d}]")
        self.d = d
        self.k = k
        self.ortho = OrthoMap(rng, d)
        self.scorer = DimScorer(rng, d, scorer_hidden)
        self.codebook = codebook

    # -- spec operations -------------------------------------------------

    def rotate(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d:
            raise ValueError(f"rotate: input width {x.shape[-1]} != {self.d}")
        return matmul(x, transpose_last(self.ortho.weight))

    def orth_penalty(self) -> Tensor:
        w = self.ortho.weight
        gram = matmul(w, transpose_last(w)) - Tensor(np.eye(self.d))
        return (gram * gram).sum()

    def select_primary(self, x: Tensor, x_orth: Tensor):
        """Split rotated features into primary (top-k by score) and secondary.

        Scores are computed from the pre-rotation input. The additive
        straight-through term feeds gradient to the scorer without changing
        the forward value.
        """
        scores = self.scorer(x)
        mask = topk_mask(scores.data, self.k)
        mask_t = Tensor(mask)
        x_pri = mask_t * x_orth + (scores - stop_gradient(scores)) * x_orth
        x_sec = Tensor(1.0 - mask) * x_orth
        return x_pri, x_sec, scores, mask

    def quantize(self, x_pri: Tensor):
        """Assign each position to its nearest code and form the residual."""
        flat = x_pri.data.reshape(-1, self.d)
        self.codebook.ensure_init(flat)
        idx = nearest_code(flat, self.codebook.codes.data).reshape(x_pri.shape[:-1])
        self.codebook.note_usage(idx)
        self.codebook.last_inputs = flat.copy()
        code_vec = gather_rows(self.codebook.codes, idx)
        quantized = straight_through(code_vec, x_pri)
        x_resi = x_pri - stop_gradient(code_vec)
        return idx, code_vec, quantized, x_resi

    def params(self) -> dict[str, Tensor]:
        out = {f"ortho.{k}": v for k, v in self.ortho.params().items()}
        out.update({f"scorer.{k}": v for k, v in self.scorer.params().items()})
        return out


class ORQStack:
    """L chained layers; codebooks may be shared with another stack."""

    def __init__(self, layers: list[ORQLayer]):
        if not layers:
            raise ValueError("stack needs at least one layer")
        d = layers[0].d
        if any(layer.d != d for layer in layers):
            raise ValueError("all layers must share dimension d")
        self.layers = layers
        self.d = d

    @staticmethod
    def build(rng: np.random.Generator, d: int, n_layers: int, k: int,
              codebooks: list[Codebook], scorer_hidden: int | None = None) -> "ORQStack":
        if len(codebooks) != n_layers:
            raise ValueError("need one codebook per layer")
        return ORQStack([ORQLayer(rng, d, k, codebooks[i], scorer_hidden)
                         for i in range(n_layers)])

    def forward(self, x: Tensor) -> QuantTrace:
        trace = QuantTrace()
        for layer in self.layers:
            x_orth = layer.rotate(x)
            x_pri, x_sec, scores, mask = layer.select_primary(x, x_orth)
            idx, code_vec, quantized, x_resi = layer.quantize(x_pri)
            x_next = x_sec + x_resi
            trace.layers.append(LayerTrace(
                scores=scores, mask=mask, x_orth=x_orth, x_pri=x_pri, x_sec=x_sec,
                code_index=idx, code_vec=code_vec, quantized=quantized, x_resi=x_resi))
            x = x_next
        trace.x_next = x
        return trace

    def reconstruct(self, trace: QuantTrace) -> Tensor:
        """Decoder-free inversion: unwind the rotations with the final leftover
        zeroed, placing each layer's code on its mask via the ST branch."""
        e_hat = Tensor(np.zeros(trace.x_next.shape))
        for layer, lt in zip(reversed(self.layers), reversed(trace.layers)):
            inner = Tensor(lt.mask) * lt.quantized + e_hat
            # x_orth = x @ W^T, and for orthogonal W the inverse is x_orth @ W
            e_hat = matmul(inner, layer.ortho.weight)
        return e_hat

    def orth_penalty(self) -> Tensor:
        total = self.layers[0].orth_penalty()
        for layer in self.layers[1:]:
            total = total + layer.orth_penalty()
        return total

    def codebooks(self) -> list[Codebook]:
        return [layer.codebook for layer in self.layers]

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update({f"layer{i}.{k}": v for k, v in layer.params().items()})
        return out


def vq_loss(trace: QuantTrace, beta: float) -> Tensor:
    """Sum over layers of codebook term plus beta-weighted commitment term.

    The codebook term stops gradient on the inputs, the commitment term on
    the codes, matching standard straight-through quantizer training.
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    total: Tensor | None = None
    for lt in trace.layers:
        cb = stop_gradient(lt.x_pri) - lt.code_vec
        codebook_term = (cb * cb).sum()
        commit_term = (lt.x_resi * lt.x_resi).sum()  # x_resi = x_pri - sg(code)
        term = codebook_term + beta * commit_term
        total = term if total is None else total + term
    return total
