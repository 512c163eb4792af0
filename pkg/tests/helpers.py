"""Shared test fixtures-by-hand: pinned keys and independent oracles."""

import numpy as np

from sifl.keys import ImmersionKey, KeySet
from sifl.learner import MiniBatch


def hand_key():
    """The n=1, m=2 key with M=[2,1], G=[0.4, 0.2], N=[1, -2] (unnormalized)."""
    key = ImmersionKey(
        n=1,
        m=2,
        M=np.array([[2.0, 1.0]]),
        G=np.array([[0.4], [0.2]]),
        N=np.array([[1.0], [-2.0]]),
    )
    key.validate()
    return KeySet(blocks=(key,), block_layout=((0, 1),))


def naive_matmul(A, B):
    """Independent triple-loop multiplication; the oracle for MG and MN."""
    rows, inner = A.shape
    inner2, cols = B.shape
    assert inner == inner2
    out = np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            acc = 0.0
            for k in range(inner):
                acc += A[i, k] * B[k, j]
            out[i, j] = acc
    return out


def central_differences(loss_fn, w, h=1e-6):
    """Finite-difference gradient oracle, independent of backprop."""
    grad = np.zeros_like(w)
    for i in range(len(w)):
        bumped = w.copy()
        bumped[i] += h
        up = loss_fn(bumped)
        bumped[i] -= 2 * h
        down = loss_fn(bumped)
        grad[i] = (up - down) / (2 * h)
    return grad


def random_batch(rng, n_samples, input_dim, classes):
    return MiniBatch(
        inputs=rng.normal(size=(n_samples, input_dim)),
        labels=rng.integers(0, classes, size=n_samples),
    )


def make_dataset(rng, n, input_dim, classes):
    return rng.normal(size=(n, input_dim)), rng.integers(0, classes, size=n)
