"""Minimal reverse-mode autodiff over dense numpy arrays, plus the NN blocks.

Supports exactly what the two policies and two baselines need: MLPs with
tanh hidden layers, an option-embedding matrix doubling as attention
keys, masked categorical distributions, and scalar-loss backward passes.
Network sizes here are tiny (widths <= 64, depth <= 3), so the engine
favors correctness and testability over throughput.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, TrainingError, UsageError

MASKED_LOGPROB = -1e30  # finite sentinel: exp() underflows to exactly 0.0


def masked_log_softmax_array(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax over unmasked entries of the last axis (numpy).

    Shared by the Tensor op and the graph-free sampling path so both
    produce identical floats.
    """
    neg = np.where(mask, logits, -np.inf)
    m = neg.max(axis=-1, keepdims=True)
    ez = np.where(mask, np.exp(logits - m), 0.0)
    lse = np.log(ez.sum(axis=-1, keepdims=True)) + m
    return np.where(mask, logits - lse, MASKED_LOGPROB)


def entropy_from_logp(logp: np.ndarray, mask: np.ndarray) -> float:
    p = np.where(mask, np.exp(logp), 0.0)
    return float(-(p * np.where(mask, logp, 0.0)).sum())


def draw_index(probs: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw; robust to cumsum rounding at the tail."""
    index = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
    index = min(index, len(probs) - 1)
    while not mask[index]:
        index -= 1
    return index


def sample_masked(
    logits: np.ndarray, mask: np.ndarray, rng: np.random.Generator
) -> tuple[int, float, float]:
    """Graph-free categorical sample: (index, log-prob, entropy)."""
    logp = masked_log_softmax_array(logits, mask)
    probs = np.where(mask, np.exp(logp), 0.0)
    index = draw_index(probs, mask, rng)
    return index, float(logp[index]), entropy_from_logp(logp, mask)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach the op's output shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A dense array node in a dynamically recorded computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_children", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _children=(), _backward=None):
        self.data = np.asarray(data, dtype=float)
        if not np.all(np.isfinite(self.data)):
            raise TrainingError("non-finite tensor value in forward pass")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(c.requires_grad for c in _children)
        self._children = tuple(_children)
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    # -- graph plumbing ------------------------------------------------

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        """Reverse-mode pass from a scalar loss; the graph is consumed."""
        if self.data.ndim != 0:
            raise UsageError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise UsageError("backward called twice on a consumed graph")
        self._consumed = True

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for child in node._children:
                if child.requires_grad and id(child) not in seen:
                    stack.append((child, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ------------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other) -> "Tensor":
        other = self._lift(other)
        out = Tensor(self.data + other.data, _children=(self, other))

        def backward(grad):
            if self.requires_grad:
                self._accumulate(_unbroadcast(grad, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(grad, other.data.shape))

        out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = Tensor(-self.data, _children=(self,))
        out._backward = lambda grad: self.requires_grad and self._accumulate(-grad)
        return out

    def __sub__(self, other) -> "Tensor":
        return self + (-self._lift(other))

    def __rsub__(self, other) -> "Tensor":
        return self._lift(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = self._lift(other)
        out = Tensor(self.data * other.data, _children=(self, other))

        def backward(grad):
            if self.requires_grad:
                self._accumulate(_unbroadcast(grad * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(grad * self.data, other.data.shape))

        out._backward = backward
        return out

    __rmul__ = __mul__

    def matmul(self, other: "Tensor") -> "Tensor":
        other = self._lift(other)
        a, b = self.data, other.data
        if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul width mismatch: {a.shape} @ {b.shape}")
        out = Tensor(a @ b, _children=(self, other))

        def backward(grad):
            if self.requires_grad:
                if a.ndim == 1 and b.ndim == 2:
                    self._accumulate(grad @ b.T)
                elif a.ndim == 2 and b.ndim == 1:
                    self._accumulate(np.outer(grad, b))
                else:
                    self._accumulate(grad @ b.T)
            if other.requires_grad:
                if a.ndim == 1 and b.ndim == 2:
                    other._accumulate(np.outer(a, grad))
                elif a.ndim == 2 and b.ndim == 1:
                    other._accumulate(a.T @ grad)
                else:
                    other._accumulate(a.T @ grad)

        out._backward = backward
        return out

    __matmul__ = matmul

    # -- nonlinearities ----------------------------------------------------

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        out = Tensor(y, _children=(self,))
        out._backward = lambda grad: self.requires_grad and self._accumulate(grad * (1.0 - y * y))
        return out

    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        out = Tensor(y, _children=(self,))
        out._backward = lambda grad: self.requires_grad and self._accumulate(grad * y)
        return out

    def clamp(self, lo: float, hi: float) -> "Tensor":
        inside = (self.data >= lo) & (self.data <= hi)
        out = Tensor(np.clip(self.data, lo, hi), _children=(self,))
        out._backward = lambda grad: self.requires_grad and self._accumulate(grad * inside)
        return out

    def minimum(self, other: "Tensor") -> "Tensor":
        other = self._lift(other)
        take_self = self.data <= other.data
        out = Tensor(np.minimum(self.data, other.data), _children=(self, other))

        def backward(grad):
            if self.requires_grad:
                self._accumulate(_unbroadcast(grad * take_self, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(grad * ~take_self, other.data.shape))

        out._backward = backward
        return out

    # -- reductions and views ------------------------------------------------

    def sum(self) -> "Tensor":
        out = Tensor(self.data.sum(), _children=(self,))
        out._backward = lambda grad: self.requires_grad and self._accumulate(
            np.full_like(self.data, float(grad))
        )
        return out

    def mean(self) -> "Tensor":
        n = self.data.size
        out = Tensor(self.data.mean(), _children=(self,))
        out._backward = lambda grad: self.requires_grad and self._accumulate(
            np.full_like(self.data, float(grad) / n)
        )
        return out

    def slice_last(self, start: int, stop: int) -> "Tensor":
        out = Tensor(self.data[..., start:stop], _children=(self,))

        def backward(grad):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                full[..., start:stop] = grad
                self._accumulate(full)

        out._backward = backward
        return out

    def transpose(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ShapeError(f"transpose needs a matrix, got shape {self.shape}")
        out = Tensor(self.data.T, _children=(self,))
        out._backward = lambda grad: self.requires_grad and self._accumulate(grad.T)
        return out

    def gather_rows(self, indices: np.ndarray) -> "Tensor":
        """out[i] = self[i, indices[i]] for a 2-D tensor."""
        if self.data.ndim != 2:
            raise ShapeError(f"gather_rows needs a matrix, got shape {self.shape}")
        idx = np.asarray(indices, dtype=int)
        rows = np.arange(self.data.shape[0])
        out = Tensor(self.data[rows, idx], _children=(self,))

        def backward(grad):
            if self.requires_grad:
                full = np.zeros_like(self.data)
                np.add.at(full, (rows, idx), grad)
                self._accumulate(full)

        out._backward = backward
        return out

    def masked_log_softmax(self, mask: np.ndarray) -> "Tensor":
        """Row-wise log-softmax over unmasked entries of the last axis.

        Masked entries get the finite MASKED_LOGPROB sentinel, so their
        probabilities are exactly 0 and downstream products stay finite.
        """
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != self.data.shape:
            raise ShapeError(f"mask shape {mask.shape} != logits shape {self.data.shape}")
        if not mask.any(axis=-1).all():
            raise UsageError("masked_log_softmax row with no unmasked entry")
        logp = masked_log_softmax_array(self.data, mask)
        out = Tensor(logp, _children=(self,))
        probs = np.where(mask, np.exp(logp), 0.0)

        def backward(grad):
            if self.requires_grad:
                g = np.where(mask, grad, 0.0)
                self._accumulate(g - probs * g.sum(axis=-1, keepdims=True))

        out._backward = backward
        return out


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, (fan_in, fan_out))


class MLP:
    """Affine layers with tanh hidden activations and a linear output."""

    def __init__(self, widths: list[int], rng: np.random.Generator, name: str):
        if len(widths) < 2:
            raise ConfigError(f"MLP {name!r} needs at least input and output widths")
        self.name = name
        self.widths = list(widths)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i in range(len(widths) - 1):
            self.weights.append(Tensor(xavier_uniform(rng, widths[i], widths[i + 1]),
                                       requires_grad=True))
            self.biases.append(Tensor(np.zeros(widths[i + 1]), requires_grad=True))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.widths[0]:
            raise ShapeError(
                f"MLP {self.name!r} expects input width {self.widths[0]}, got {x.shape[-1]}"
            )
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h.matmul(w) + b
            if i < last:
                h = h.tanh()
        return h

    def forward_array(self, x: np.ndarray) -> np.ndarray:
        """Graph-free forward mirroring forward() float for float."""
        if x.shape[-1] != self.widths[0]:
            raise ShapeError(
                f"MLP {self.name!r} expects input width {self.widths[0]}, got {x.shape[-1]}"
            )
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.data + b.data
            if i < last:
                h = np.tanh(h)
        return h

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{self.name}.w{i}"] = w
            out[f"{self.name}.b{i}"] = b
        return out


class OptionEmbedding:
    """(K options x d) matrix; rows embed option identities and serve as
    the attention key/value matrix (key width = value width = d)."""

    def __init__(self, n_options: int, dim: int, rng: np.random.Generator, name: str = "embed"):
        self.name = name
        self.n_options = n_options
        self.dim = dim
        self.matrix = Tensor(xavier_uniform(rng, n_options, dim), requires_grad=True)

    def row(self, option: int) -> np.ndarray:
        """Detached embedding row, for use as plain input data."""
        return self.matrix.data[option].copy()

    def parameters(self) -> dict[str, Tensor]:
        return {f"{self.name}.matrix": self.matrix}


def attention_scores(query: Tensor, embedding: OptionEmbedding, heads: int = 1) -> Tensor:
    """Scaled dot-product scores of a query against every option row.

    With one head: scores_k = (query . row_k) / sqrt(d).  With H heads
    the width-d/H slices are scored independently (scaled by sqrt(d/H))
    and summed.
    """
    d = embedding.dim
    if heads < 1 or d % heads != 0:
        raise ConfigError(f"embedding width {d} not divisible by {heads} heads")
    if query.shape[-1] != d:
        raise ShapeError(f"query width {query.shape[-1]} != embedding width {d}")
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    total: Tensor | None = None
    for h in range(heads):
        qh = query.slice_last(h * dh, (h + 1) * dh)
        kh = embedding.matrix.slice_last(h * dh, (h + 1) * dh)
        if query.data.ndim == 1:
            scores = kh.matmul(qh) * scale
        else:
            scores = qh.matmul(kh.transpose()) * scale
        total = scores if total is None else total + scores
    return total


def attention_scores_array(
    query: np.ndarray, matrix: np.ndarray, heads: int = 1
) -> np.ndarray:
    """Graph-free twin of attention_scores for the sampling hot path."""
    d = matrix.shape[1]
    if heads < 1 or d % heads != 0:
        raise ConfigError(f"embedding width {d} not divisible by {heads} heads")
    if query.shape[-1] != d:
        raise ShapeError(f"query width {query.shape[-1]} != embedding width {d}")
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    total = None
    for h in range(heads):
        qh = query[..., h * dh : (h + 1) * dh]
        kh = matrix[:, h * dh : (h + 1) * dh]
        scores = (kh @ qh if query.ndim == 1 else qh @ kh.T) * scale
        total = scores if total is None else total + scores
    return total


class CategoricalDist:
    """Masked categorical distribution over logits.

    Masked entries have probability exactly 0; probabilities over the
    unmasked support sum to 1.  log_prob stays differentiable through
    the logits when they carry a graph.
    """

    def __init__(self, logits: Tensor | np.ndarray, mask: np.ndarray | None = None):
        self.logits = logits if isinstance(logits, Tensor) else Tensor(logits)
        n = self.logits.shape[-1]
        self.mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if self.mask.shape != (n,):
            raise ShapeError(f"mask shape {self.mask.shape} != ({n},)")
        if not self.mask.any():
            raise UsageError("categorical distribution with every entry masked")

    def log_probs(self) -> Tensor:
        return self.logits.masked_log_softmax(self.mask)

    def probs(self) -> np.ndarray:
        return np.where(self.mask, np.exp(self.log_probs().data), 0.0)

    def log_prob(self, index: int) -> Tensor:
        if not self.mask[index]:
            raise UsageError(f"log_prob of masked index {index}")
        lp = self.log_probs()
        picked = np.zeros(self.logits.shape[-1])
        picked[index] = 1.0
        return (lp * Tensor(picked)).sum()

    def entropy(self) -> float:
        lp = self.log_probs().data
        p = np.where(self.mask, np.exp(lp), 0.0)
        return float(-(p * np.where(self.mask, lp, 0.0)).sum())

    def sample(self, rng: np.random.Generator) -> tuple[int, Tensor]:
        index = draw_index(self.probs(), self.mask, rng)
        return index, self.log_prob(index)


def sgd_step(params: dict[str, Tensor], lr: float) -> None:
    for t in params.values():
        if t.grad is not None:
            t.data = t.data - lr * t.grad


def zero_grads(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.grad = None


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

_MAGIC = b"FMCKPT01"


def save_checkpoint(
    path: str | Path,
    arrays: dict[str, np.ndarray],
    rng_state: dict | None = None,
    meta: dict | None = None,
) -> None:
    """Versioned binary container: header JSON + raw float64 payload.

    The byte layout is fully deterministic so identical parameters and
    RNG state produce identical files.
    """
    names = list(arrays.keys())
    header = {
        "version": 1,
        "arrays": [{"name": n, "shape": list(np.asarray(arrays[n]).shape)} for n in names],
        "rng_state": rng_state,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict | None, dict]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"no such checkpoint: {path}")
    raw = path.read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    offset = len(_MAGIC)
    (header_len,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
    if header.get("version") != 1:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')}")
    offset += header_len
    arrays: dict[str, np.ndarray] = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays[spec["name"]] = arr.copy()
        offset += count * 8
    return arrays, header.get("rng_state"), header.get("meta", {})
