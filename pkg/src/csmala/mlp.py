"""Feedforward ReLU regression networks over a flat parameter vector.

Layout of a parameter vector: for every layer ``l = 1..L+1`` the weight
matrix ``W^(l)`` (shape ``out x in``, row-major) followed by its bias vector.
"""
from __future__ import annotations

import io
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

__all__ = [
    "Architecture",
    "MLP",
    "Prediction",
    "UnsupportedConfigurationError",
    "batch_grad",
    "forward",
    "grad_loss",
    "lipschitz_bound",
    "load_params",
    "loss",
    "param_count",
    "save_params",
]


class UnsupportedConfigurationError(ValueError):
    """Raised when an operation needs a finite weight bound or clip level."""


@dataclass(frozen=True)
class Architecture:
    """Network shape ``(p, L, r)`` with optional weight box and output clip.

    ``weight_bound`` is ``B`` (``math.inf`` means unbounded) and
    ``output_clip`` is ``C`` (``None`` disables clipping).
    """

    p: int
    L: int
    r: int
    weight_bound: float = math.inf
    output_clip: float | None = None

    def __post_init__(self):
        for name in ("p", "L", "r"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if math.isfinite(self.weight_bound) and self.weight_bound < 1:
            raise ValueError("weight_bound must be >= 1 when finite")
        if self.output_clip is not None and self.output_clip < 1:
            raise ValueError("output_clip must be >= 1 when enabled")

    @property
    def P(self) -> int:
        return param_count(self)

    def layer_shapes(self) -> list[tuple[int, int]]:
        """``(out, in)`` for each of the ``L+1`` affine maps."""
        shapes = [(self.r, self.p)]
        shapes += [(self.r, self.r)] * (self.L - 1)
        shapes.append((1, self.r))
        return shapes

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "L": self.L,
            "r": self.r,
            "B": None if math.isinf(self.weight_bound) else self.weight_bound,
            "C": self.output_clip,
            "P": self.P,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        bound = d.get("B")
        return cls(
            p=int(d["p"]),
            L=int(d["L"]),
            r=int(d["r"]),
            weight_bound=math.inf if bound is None else float(bound),
            output_clip=None if d.get("C") is None else float(d["C"]),
        )


def param_count(arch: Architecture) -> int:
    """Total number of weights and biases, ``(p+1)r + (L-1)(r+1)r + r + 1``."""
    p, L, r = arch.p, arch.L, arch.r
    return (p + 1) * r + (L - 1) * (r + 1) * r + r + 1


class Prediction(NamedTuple):
    raw: float
    clipped: float


class MLP:
    """Batched forward/backward passes for one :class:`Architecture`.

    The object is stateless apart from precomputed slices, so a single
    instance can be shared by any number of chains.
    """

    def __init__(self, arch: Architecture):
        self.arch = arch
        self.n_params = arch.P
        self._slices = []
        offset = 0
        for out_dim, in_dim in arch.layer_shapes():
            w = slice(offset, offset + out_dim * in_dim)
            offset += out_dim * in_dim
            b = slice(offset, offset + out_dim)
            offset += out_dim
            self._slices.append((w, b, (out_dim, in_dim)))
        assert offset == self.n_params

    def __repr__(self):
        return f"MLP({self.arch!r})"

    def unpack(self, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, v)`` per layer into ``theta``."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ValueError(
                f"parameter vector has shape {theta.shape}, expected ({self.n_params},)"
            )
        return [(theta[w].reshape(shape), theta[b]) for w, b, shape in self._slices]

    def pack(self, layers) -> np.ndarray:
        theta = np.empty(self.n_params)
        for (w, b, shape), (W, v) in zip(self._slices, layers):
            theta[w] = np.asarray(W, dtype=np.float64).reshape(-1)
            theta[b] = v
        return theta

    def _check_inputs(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, self.arch.p) if self.arch.p == 1 else X.reshape(1, -1)
        if X.ndim != 2 or X.shape[1] != self.arch.p:
            raise ValueError(f"inputs must have {self.arch.p} columns, got shape {X.shape}")
        return X

    def raw(self, theta, X) -> np.ndarray:
        """Unclipped network output ``g_theta`` for every row of ``X``."""
        X = self._check_inputs(X)
        layers = self.unpack(theta)
        h = X
        for W, v in layers[:-1]:
            h = h @ W.T
            h += v
            np.maximum(h, 0.0, out=h)
        W, v = layers[-1]
        out = h @ W[0]
        out += v[0]
        return out

    def predict(self, theta, X) -> np.ndarray:
        """Network output ``f_theta``; clipped to ``[-C, C]`` when enabled."""
        out = self.raw(theta, X)
        C = self.arch.output_clip
        if C is not None:
            np.clip(out, -C, C, out=out)
        return out

    def losses(self, theta, X, y) -> np.ndarray:
        resid = np.asarray(y, dtype=np.float64) - self.predict(theta, X)
        return resid * resid

    def losses_and_grad(self, theta, X, y, scale: float = 1.0):
        """Per-sample squared losses and ``scale * grad(sum of losses)``.

        ReLU kinks take subgradient 0; the clip has derivative 0 outside
        ``[-C, C]``.
        """
        X = self._check_inputs(X)
        y = np.asarray(y, dtype=np.float64)
        layers = self.unpack(theta)
        grad = np.zeros(self.n_params)
        if X.shape[0] == 0:
            return np.zeros(0), grad

        hs = [X]
        h = X
        for W, v in layers[:-1]:
            h = h @ W.T
            h += v
            np.maximum(h, 0.0, out=h)
            hs.append(h)
        W_out, v_out = layers[-1]
        g = h @ W_out[0] + v_out[0]
        C = self.arch.output_clip
        f = g if C is None else np.clip(g, -C, C)
        resid = y - f
        losses = resid * resid

        delta = -2.0 * scale * resid
        if C is not None:
            delta = delta * (np.abs(g) <= C)
        (w_sl, b_sl, _) = self._slices[-1]
        grad[w_sl] = delta @ hs[-1]
        grad[b_sl] = delta.sum()
        delta = np.outer(delta, W_out[0])
        for layer in range(len(layers) - 2, -1, -1):
            delta *= hs[layer + 1] > 0.0
            w_sl, b_sl, _ = self._slices[layer]
            grad[w_sl] = (delta.T @ hs[layer]).reshape(-1)
            grad[b_sl] = delta.sum(axis=0)
            if layer:
                delta = delta @ layers[layer][0]
        return losses, grad

    def in_support(self, theta) -> bool:
        B = self.arch.weight_bound
        return bool(math.isinf(B) or np.all(np.abs(theta) <= B))

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform fan-in initialisation, ``U(-1/sqrt(in), 1/sqrt(in))`` per layer."""
        parts = []
        for out_dim, in_dim in self.arch.layer_shapes():
            bound = 1.0 / math.sqrt(in_dim)
            parts.append(rng.uniform(-bound, bound, size=out_dim * in_dim))
            parts.append(rng.uniform(-bound, bound, size=out_dim))
        theta = np.concatenate(parts)
        B = self.arch.weight_bound
        if math.isfinite(B):
            np.clip(theta, -B, B, out=theta)
        return theta


def forward(arch: Architecture, theta, x) -> Prediction:
    """Evaluate one input vector of length ``p``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != arch.p:
        raise ValueError(f"input has length {x.shape[0]}, expected {arch.p}")
    net = MLP(arch)
    raw = float(net.raw(theta, x.reshape(1, -1))[0])
    C = arch.output_clip
    clipped = raw if C is None else min(max(raw, -C), C)
    return Prediction(raw, clipped)


def loss(arch: Architecture, theta, sample) -> float:
    x, y = sample
    return (float(y) - forward(arch, theta, x).clipped) ** 2


def grad_loss(arch: Architecture, theta, sample) -> np.ndarray:
    x, y = sample
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != arch.p:
        raise ValueError(f"input has length {x.shape[1]}, expected {arch.p}")
    _, grad = MLP(arch).losses_and_grad(theta, x, np.array([float(y)]))
    return grad


def batch_grad(arch: Architecture, theta, data, mask, scale: float) -> np.ndarray:
    """``scale * sum_{mask_i = 1} grad loss_i``; an empty mask gives zeros."""
    mask = np.asarray(getattr(mask, "bits", mask), dtype=bool)
    if mask.shape != (len(data.ys),):
        raise ValueError(f"mask length {mask.shape} does not match n={len(data.ys)}")
    _, grad = MLP(arch).losses_and_grad(theta, data.xs[mask], data.ys[mask], scale)
    return grad


def lipschitz_bound(arch: Architecture, x) -> float:
    """``4 (2 r B)^L (|x|_1 v 1)``, the sup-norm Lipschitz constant of theta -> f_theta(x)."""
    B = arch.weight_bound
    if math.isinf(B):
        raise UnsupportedConfigurationError("Lipschitz bound needs a finite weight bound B")
    l1 = float(np.abs(np.asarray(x, dtype=np.float64)).sum())
    return 4.0 * (2.0 * arch.r * B) ** arch.L * max(l1, 1.0)


def save_params(path, arch: Architecture, thetas) -> None:
    """Write one or more parameter vectors: JSON header line, then little-endian float64."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype="<f8"))
    if thetas.shape[1] != arch.P:
        raise ValueError(f"vectors have length {thetas.shape[1]}, expected P={arch.P}")
    header = dict(arch.to_dict(), count=int(thetas.shape[0]))
    buf = io.BytesIO()
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    buf.write(np.ascontiguousarray(thetas).tobytes())
    _atomic_write(Path(path), buf.getvalue())


def load_params(path) -> tuple[Architecture, np.ndarray]:
    """Inverse of :func:`save_params`; returns ``(arch, array of shape (count, P))``."""
    raw = Path(path).read_bytes()
    head, sep, payload = raw.partition(b"\n")
    if not sep:
        raise ValueError(f"{path}: missing parameter header")
    header = json.loads(head)
    arch = Architecture.from_dict(header)
    count = int(header.get("count", 1))
    if len(payload) != count * arch.P * 8:
        raise ValueError(f"{path}: payload holds {len(payload)} bytes, expected {count * arch.P * 8}")
    return arch, np.frombuffer(payload, dtype="<f8").reshape(count, arch.P).astype(np.float64)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
