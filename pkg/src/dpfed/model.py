"""Minimal multi-layer perceptron used as the local learner on each client.

Parameters live in a single flat float64 vector so that client updates,
clipping and noise addition can treat the whole model as one vector.
Hidden layers use ReLU, the output layer is softmax with mean
cross-entropy loss. All operations are pure functions of their inputs.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ModelParams:
    """Flat parameter vector plus the layer sizes needed to unpack it."""

    values: np.ndarray  # float64, length = sum(in*out + out) over layer pairs
    arch: tuple

    def __post_init__(self):
        object.__setattr__(self, "arch", tuple(int(s) for s in self.arch))
        expected = param_count(self.arch)
        if self.values.shape != (expected,):
            raise ValueError(
                f"parameter vector has length {self.values.shape}, "
                f"arch {self.arch} needs {expected}"
            )


@dataclass(frozen=True)
class Batch:
    """A mini-batch of flattened images and integer class labels."""

    features: np.ndarray  # (batch, input_dim) float64 in [0, 1]
    labels: np.ndarray  # (batch,) int

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("features must be 2-D and labels 1-D")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.features.shape[0]} feature rows vs "
                f"{self.labels.shape[0]} labels"
            )
        if self.features.shape[0] < 1:
            raise ValueError("batch must hold at least one sample")


def param_count(arch) -> int:
    """Number of parameters of an MLP with the given layer sizes."""
    _check_arch(arch)
    return sum(fi * fo + fo for fi, fo in zip(arch[:-1], arch[1:]))


def _check_arch(arch):
    if len(arch) < 2:
        raise ValueError(f"arch needs at least input and output layer, got {arch}")
    if any(int(s) < 1 for s in arch):
        raise ValueError(f"layer sizes must be >= 1, got {arch}")


def _unpack(params: ModelParams):
    """Split the flat vector into (W, b) views per layer, no copies."""
    mats = []
    off = 0
    v = params.values
    for fi, fo in zip(params.arch[:-1], params.arch[1:]):
        w = v[off : off + fi * fo].reshape(fi, fo)
        off += fi * fo
        b = v[off : off + fo]
        off += fo
        mats.append((w, b))
    return mats


def init_params(arch, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, deterministic for a given seed."""
    _check_arch(arch)
    rng = np.random.default_rng(seed)
    chunks = []
    for fi, fo in zip(arch[:-1], arch[1:]):
        limit = np.sqrt(6.0 / (fi + fo))
        chunks.append(rng.uniform(-limit, limit, size=fi * fo))
        chunks.append(np.zeros(fo))
    return ModelParams(values=np.concatenate(chunks), arch=tuple(arch))


def _forward(params: ModelParams, features: np.ndarray):
    """Forward pass returning softmax probabilities and hidden activations."""
    if features.shape[1] != params.arch[0]:
        raise ValueError(
            f"input dim {features.shape[1]} does not match arch {params.arch}"
        )
    layers = _unpack(params)
    acts = [features]
    h = features
    for w, b in layers[:-1]:
        h = np.maximum(h @ w + b, 0.0)
        acts.append(h)
    w, b = layers[-1]
    logits = h @ w + b
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs, acts


def forward_loss(params: ModelParams, batch: Batch):
    """Mean negative log-likelihood and per-sample class probabilities."""
    probs, _ = _forward(params, batch.features)
    n = batch.features.shape[0]
    # tiny floor only guards log(0) from fully saturated softmax
    picked = np.maximum(probs[np.arange(n), batch.labels], 1e-300)
    loss = float(-np.mean(np.log(picked)))
    return loss, probs


def backward(params: ModelParams, batch: Batch) -> np.ndarray:
    """Exact gradient of the mean loss, flattened like ``params.values``."""
    probs, acts = _forward(params, batch.features)
    layers = _unpack(params)
    n = batch.features.shape[0]
    delta = probs.copy()
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n

    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        gw = acts[i].T @ delta
        gb = delta.sum(axis=0)
        grads[i] = (gw, gb)
        if i > 0:
            delta = (delta @ w.T) * (acts[i] > 0)

    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    if not np.all(np.isfinite(flat)):
        raise FloatingPointError("non-finite gradient")
    return flat


def sgd_step(params: ModelParams, gradient: np.ndarray, eta: float) -> ModelParams:
    """One plain gradient-descent step: values - eta * gradient."""
    if gradient.shape != params.values.shape:
        raise ValueError(
            f"gradient length {gradient.shape} vs params {params.values.shape}"
        )
    return ModelParams(values=params.values - eta * gradient, arch=params.arch)


def evaluate(params: ModelParams, features: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class."""
    if features.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty set")
    probs, _ = _forward(params, features)
    pred = probs.argmax(axis=1)  # argmax returns the first (lowest) index on ties
    return float(np.mean(pred == labels))
