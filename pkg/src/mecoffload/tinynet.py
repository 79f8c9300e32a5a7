"""Minimal dense network machinery: MLPs with analytic backprop, Adam,
soft target updates, parameter (de)serialization, and a finite-difference
gradient checker.

Networks are plain float64 values.  ReLU hidden layers; the output head is
sigmoid (actors, forces outputs into (0, 1)) or identity (critics).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SAVE_FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    """Raised when a non-finite gradient or loss surfaces during training."""


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Mlp:
    """Fully connected network with analytic backprop.

    `dims` lists layer widths input->output, e.g. (9, 64, 512, 3).  Weights
    initialize uniform in +-1/sqrt(fan_in).
    """

    def __init__(self, dims: Sequence[int], out_activation: str = "identity",
                 rng: np.random.Generator | None = None):
        if len(dims) < 2:
            raise ValueError("need at least an input and an output width")
        if out_activation not in ("identity", "sigmoid"):
            raise ValueError(f"unknown output activation {out_activation!r}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.dims = tuple(int(d) for d in dims)
        self.out_activation = out_activation
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, fan_out))

    # -- evaluation ----------------------------------------------------------

    def _as_batch(self, x: np.ndarray) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return x[None, :], True
        return x, False

    def _forward_all(self, x: np.ndarray) -> list[np.ndarray]:
        """Activations per layer, input included; last entry is the output."""
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            if i < last:
                h = np.maximum(z, 0.0)
            elif self.out_activation == "sigmoid":
                h = _sigmoid(z)
            else:
                h = z
            acts.append(h)
        return acts

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the network; accepts (in,) or (batch, in) shapes."""
        batch, squeeze = self._as_batch(x)
        if batch.shape[1] != self.dims[0]:
            raise ValueError(f"expected input width {self.dims[0]}, "
                             f"got {batch.shape[1]}")
        out = self._forward_all(batch)[-1]
        return out[0] if squeeze else out

    def backward(self, x: np.ndarray, grad_out: np.ndarray,
                 acts: list[np.ndarray] | None = None
                 ) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
        """Gradients of sum(grad_out * forward(x)) w.r.t. parameters and input.

        grad_out must match the forward output shape; parameter gradients sum
        over the batch, the input gradient is per row.  `acts` may pass the
        activations from a preceding _forward_all on the same input to skip
        the recomputation.
        """
        batch, squeeze = self._as_batch(x)
        gout, _ = self._as_batch(grad_out)
        if acts is None:
            acts = self._forward_all(batch)
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.weights)
        delta = gout
        if self.out_activation == "sigmoid":
            y = acts[-1]
            delta = delta * y * (1.0 - y)
        for i in range(len(self.weights) - 1, -1, -1):
            h_in = acts[i]
            grads[i] = (h_in.T @ delta, delta.sum(axis=0))
            delta = delta @ self.weights[i].T
            if i > 0:
                delta = delta * (acts[i] > 0.0)
        return grads, (delta[0] if squeeze else delta)

    def input_gradient(self, x: np.ndarray, grad_out: np.ndarray,
                       acts: list[np.ndarray] | None = None) -> np.ndarray:
        """Gradient of sum(grad_out * forward(x)) w.r.t. the input only."""
        batch, squeeze = self._as_batch(x)
        gout, _ = self._as_batch(grad_out)
        if acts is None:
            acts = self._forward_all(batch)
        delta = gout
        if self.out_activation == "sigmoid":
            y = acts[-1]
            delta = delta * y * (1.0 - y)
        for i in range(len(self.weights) - 1, -1, -1):
            delta = delta @ self.weights[i].T
            if i > 0:
                delta = delta * (acts[i] > 0.0)
        return delta[0] if squeeze else delta

    # -- parameter plumbing ---------------------------------------------------

    def parameters(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.dims = self.dims
        clone.out_activation = self.out_activation
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone


@dataclass
class AdamState:
    """First/second moment accumulators plus step counter for one network."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_init(params: Sequence[np.ndarray], lr: float) -> AdamState:
    return AdamState(lr=lr,
                     m=[np.zeros_like(p) for p in params],
                     v=[np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params: Sequence[np.ndarray],
              grads: Sequence[np.ndarray]) -> None:
    """One in-place Adam update (descent direction)."""
    state.step += 1
    t = state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient in Adam update")
        m, v = state.m[i], state.v[i]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def soft_update(target: Mlp, online: Mlp, blend: float) -> None:
    """Blend online parameters into the target: t <- blend*o + (1-blend)*t."""
    if not 0.0 < blend <= 1.0:
        raise ValueError("blend must lie in (0, 1]")
    for pt, po in zip(target.parameters(), online.parameters()):
        pt *= 1.0 - blend
        pt += blend * po


def save_mlp(net: Mlp, path: str) -> None:
    """Write parameters as a JSON shape header plus flat float64 payload."""
    header = {
        "format": SAVE_FORMAT_VERSION,
        "dims": list(net.dims),
        "out_activation": net.out_activation,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        for p in net.parameters():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_mlp(path: str) -> Mlp:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        header = json.loads(header_line.decode("utf-8"))
        if header.get("format") != SAVE_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {header.get('format')}")
        net = Mlp(header["dims"], header["out_activation"],
                  rng=np.random.default_rng(0))
        payload = fh.read()
    offset = 0
    for p in net.parameters():
        nbytes = p.size * 8
        chunk = np.frombuffer(payload[offset:offset + nbytes], dtype="<f8")
        if chunk.size != p.size:
            raise ValueError("checkpoint payload truncated")
        p[...] = chunk.reshape(p.shape)
        offset += nbytes
    if offset != len(payload):
        raise ValueError("checkpoint payload has trailing bytes")
    return net


def finite_diff_param_grads(net: Mlp, x: np.ndarray, grad_out: np.ndarray,
                            coords: Sequence[tuple[int, int]] | None = None,
                            eps: float = 1e-5) -> list[tuple[int, int, float]]:
    """Central-difference gradients of sum(grad_out * forward(x)).

    `coords` lists (parameter index, flat element index) pairs; when omitted
    every coordinate of every parameter is checked.  Returns (param, elem,
    derivative) triples in the given order.
    """
    params = net.parameters()
    if coords is None:
        coords = [(pi, ei) for pi, p in enumerate(params) for ei in range(p.size)]
    out: list[tuple[int, int, float]] = []
    for pi, ei in coords:
        flat = params[pi].reshape(-1)
        saved = flat[ei]
        flat[ei] = saved + eps
        up = float(np.sum(grad_out * net.forward(x)))
        flat[ei] = saved - eps
        down = float(np.sum(grad_out * net.forward(x)))
        flat[ei] = saved
        out.append((pi, ei, (up - down) / (2.0 * eps)))
    return out


def gradient_check(net: Mlp, rng: np.random.Generator, batch: int = 4,
                   sample_coords: int | None = 64, eps: float = 1e-5
                   ) -> float:
    """Max relative error between analytic and finite-difference gradients.

    Checks `sample_coords` random parameter coordinates (all of them when
    None) on a random batch with a random upstream gradient.
    """
    x = rng.standard_normal((batch, net.dims[0]))
    grad_out = rng.standard_normal((batch, net.dims[-1]))
    grads, _ = net.backward(x, grad_out)
    flat_analytic = [np.concatenate([g[0].reshape(-1), g[1].reshape(-1)])
                     for g in grads]
    params = net.parameters()
    total = sum(p.size for p in params)
    if sample_coords is None or sample_coords >= total:
        coords = [(pi, ei) for pi, p in enumerate(params) for ei in range(p.size)]
    else:
        picks = rng.choice(total, size=sample_coords, replace=False)
        bounds = np.cumsum([p.size for p in params])
        coords = []
        for flat_idx in sorted(int(i) for i in picks):
            pi = int(np.searchsorted(bounds, flat_idx, side="right"))
            prev = 0 if pi == 0 else int(bounds[pi - 1])
            coords.append((pi, flat_idx - prev))
    numeric = finite_diff_param_grads(net, x, grad_out, coords, eps)
    worst = 0.0
    for pi, ei, fd in numeric:
        if pi % 2 == 0:
            analytic = grads[pi // 2][0].reshape(-1)[ei]
        else:
            analytic = grads[pi // 2][1].reshape(-1)[ei]
        scale = max(abs(fd), abs(analytic), 1e-8)
        worst = max(worst, abs(fd - analytic) / scale)
    return worst
