"""MLP model, loss/gradient machinery, and the plain and encrypted SGD steps.

The model is a ReLU multilayer perceptron with a softmax head and mean
cross-entropy loss, operated entirely through flat parameter vectors so the
same arrays flow through encryption, aggregation, and the wire protocol.

Two update dynamics act on those vectors:

* plain:      ``w   <- w - lr * grad(w)``
* encrypted:  ``wt  <- wt - lr * lift(grad(project(wt)))``

where ``lift``/``project`` are the key set's blockwise ``G``/``M`` maps.  The
encrypted step evaluates the gradient at ``project(wt)`` (plain coordinates)
and pushes it back through ``G``, so each update stays in range(G) and the
kernel mask laid down at encryption time is carried along untouched.  That is
what makes the encrypted trajectory the exact lifted image of the plain one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .keys import EncryptedParamVector, KeySet

__all__ = [
    "ModelSpec",
    "ParamVector",
    "MiniBatch",
    "Hyperparams",
    "MLP",
    "NumericError",
    "flatten",
    "unflatten",
    "plain_sgd_step",
    "encrypted_sgd_step",
    "client_update",
]


class NumericError(ArithmeticError):
    """Raised when a forward pass produces non-finite activations."""


@dataclass(frozen=True)
class ModelSpec:
    """Layer layout of the MLP: (input, hidden..., output) unit counts."""

    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        if len(self.layer_sizes) < 3:
            raise ValueError(f"need at least one hidden layer, got sizes {self.layer_sizes}")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError(f"all layer sizes must be >= 1, got {self.layer_sizes}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def param_count(self) -> int:
        return sum(
            fan_in * fan_out + fan_out
            for fan_in, fan_out in zip(self.layer_sizes, self.layer_sizes[1:])
        )


@dataclass(frozen=True)
class ParamVector:
    """Flat model parameters in plain coordinates."""

    values: np.ndarray
    spec: ModelSpec

    def validate(self) -> None:
        if self.values.shape != (self.spec.param_count,):
            raise ValueError(
                f"parameter vector shape {self.values.shape} != ({self.spec.param_count},)"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter vector contains non-finite entries")


@dataclass(frozen=True)
class MiniBatch:
    """One batch of inputs with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.inputs) < 1:
            raise ValueError("batch must contain at least one sample")
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs vs {len(self.labels)} labels")


@dataclass(frozen=True)
class Hyperparams:
    lr: float
    local_epochs: int = 2
    rounds: int = 1
    batch_size: int = 32

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.local_epochs < 1 or self.rounds < 1 or self.batch_size < 1:
            raise ValueError("local_epochs, rounds and batch_size must all be >= 1")


def flatten(spec: ModelSpec, layers: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Pack per-layer (weights, bias) into one flat vector.

    Layout is layer-major: for each layer, the weight matrix row-major
    (fan_in x fan_out) followed by the bias.  Stable; the wire and key
    formats depend on it.
    """
    if len(layers) != len(spec.layer_sizes) - 1:
        raise ValueError(f"expected {len(spec.layer_sizes) - 1} layers, got {len(layers)}")
    parts = []
    for (fan_in, fan_out), (W, b) in zip(
        zip(spec.layer_sizes, spec.layer_sizes[1:]), layers
    ):
        if W.shape != (fan_in, fan_out) or b.shape != (fan_out,):
            raise ValueError(
                f"layer shapes {W.shape}, {b.shape} do not match ({fan_in}, {fan_out})"
            )
        parts.append(np.asarray(W, dtype=np.float64).ravel())
        parts.append(np.asarray(b, dtype=np.float64).ravel())
    return np.concatenate(parts)


def unflatten(spec: ModelSpec, w: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Inverse of :func:`flatten`; views into ``w`` where possible."""
    w = np.asarray(w)
    if w.shape != (spec.param_count,):
        raise ValueError(f"parameter vector shape {w.shape} != ({spec.param_count},)")
    layers = []
    pos = 0
    for fan_in, fan_out in zip(spec.layer_sizes, spec.layer_sizes[1:]):
        W = w[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = w[pos:pos + fan_out]
        pos += fan_out
        layers.append((W, b))
    return layers


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    # Subtracting the row max keeps exp() in range; exact softmax otherwise.
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


class MLP:
    """ReLU perceptron with softmax output over flat parameter vectors."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec

    def init_params(self, seed: int) -> np.ndarray:
        """Seeded Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        layers = []
        for fan_in, fan_out in zip(self.spec.layer_sizes, self.spec.layer_sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            layers.append(
                (rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out))
            )
        return flatten(self.spec, layers)

    def _forward_pass(self, w: np.ndarray, X: np.ndarray):
        layers = unflatten(self.spec, w)
        activations = [np.asarray(X, dtype=np.float64)]
        pre = []
        for idx, (W, b) in enumerate(layers):
            z = activations[-1] @ W + b
            if not np.all(np.isfinite(z)):
                raise NumericError(f"non-finite activation in layer {idx}")
            pre.append(z)
            if idx < len(layers) - 1:
                activations.append(np.maximum(z, 0.0))
        return layers, activations, pre

    def forward(self, w: np.ndarray, batch: MiniBatch) -> tuple[np.ndarray, float]:
        """Class probabilities (rows sum to 1) and mean cross-entropy loss."""
        _, _, pre = self._forward_pass(w, batch.inputs)
        log_probs = _log_softmax(pre[-1])
        probs = np.exp(log_probs)
        loss = -log_probs[np.arange(len(batch.labels)), batch.labels].mean()
        return probs, float(loss)

    def loss_and_gradient(self, w: np.ndarray, batch: MiniBatch) -> tuple[float, np.ndarray]:
        """Mean cross-entropy and its flat gradient via backpropagation."""
        layers, activations, pre = self._forward_pass(w, batch.inputs)
        B = len(batch.labels)
        log_probs = _log_softmax(pre[-1])
        loss = -log_probs[np.arange(B), batch.labels].mean()

        # Softmax + cross-entropy head: d(loss)/d(logits) = (p - onehot)/B.
        delta = np.exp(log_probs)
        delta[np.arange(B), batch.labels] -= 1.0
        delta /= B

        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)
        for idx in range(len(layers) - 1, -1, -1):
            W, _ = layers[idx]
            grads[idx] = (activations[idx].T @ delta, delta.sum(axis=0))
            if idx > 0:
                delta = delta @ W.T
                delta[pre[idx - 1] <= 0] = 0.0
        return float(loss), flatten(self.spec, grads)

    def gradient(self, w: np.ndarray, batch: MiniBatch) -> np.ndarray:
        return self.loss_and_gradient(w, batch)[1]

    def accuracy(self, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        _, _, pre = self._forward_pass(w, X)
        return float(np.mean(pre[-1].argmax(axis=1) == y))


GradFn = Callable[[np.ndarray], np.ndarray]


def plain_sgd_step(w: np.ndarray, grad_fn: GradFn, lr: float) -> np.ndarray:
    """One standard SGD step ``w - lr * grad_fn(w)``."""
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    return w - lr * grad_fn(w)


def encrypted_sgd_step(
    keys: KeySet, enc: EncryptedParamVector, grad_fn: GradFn, lr: float
) -> EncryptedParamVector:
    """One SGD step in encrypted coordinates.

    The gradient is evaluated at ``project(wt)``, i.e. in plain coordinates
    (the client holds both maps; the keys hide the model from everyone else
    on the wire, not from the client), then lifted back through ``G``.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    values = enc.values - lr * keys.lift(grad_fn(keys.project(enc.values)))
    return EncryptedParamVector(values=values, round_index=enc.round_index)


def iter_batches(
    X: np.ndarray, y: np.ndarray, batch_size: int, rng: np.random.Generator
):
    """Seeded shuffle, then contiguous slices; the short tail batch is kept."""
    order = rng.permutation(len(X))
    for start in range(0, len(X), batch_size):
        take = order[start:start + batch_size]
        yield MiniBatch(inputs=X[take], labels=y[take])


def client_update(
    mode: str,
    init: np.ndarray | EncryptedParamVector,
    dataset: tuple[np.ndarray, np.ndarray],
    hyper: Hyperparams,
    model: MLP,
    keys: KeySet | None = None,
    shuffle_seed: int = 0,
) -> tuple[np.ndarray | EncryptedParamVector, float]:
    """Local training: ``local_epochs`` passes of per-batch SGD steps.

    Batch order depends only on ``shuffle_seed``, so a plain and an encrypted
    run with the same seed walk the same data and stay in exact lifted
    correspondence.  Returns the updated parameters and the mean per-batch
    training loss.
    """
    X, y = dataset
    if len(X) == 0:
        raise ValueError("client dataset is empty")
    if mode not in ("plain", "encrypted"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "encrypted" and keys is None:
        raise ValueError("encrypted mode requires a key set")

    rng = np.random.default_rng(np.random.SeedSequence(shuffle_seed))
    params = init
    losses = []
    for _ in range(hyper.local_epochs):
        for batch in iter_batches(X, y, hyper.batch_size, rng):

            def grad_fn(wp, batch=batch):
                loss, g = model.loss_and_gradient(wp, batch)
                losses.append(loss)
                return g

            if mode == "plain":
                params = plain_sgd_step(params, grad_fn, hyper.lr)
            else:
                params = encrypted_sgd_step(keys, params, grad_fn, hyper.lr)
    return params, float(np.mean(losses))
