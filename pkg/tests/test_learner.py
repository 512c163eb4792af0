"""Model, gradient, and the plain/encrypted step correspondence."""

import numpy as np
import pytest

from sifl.keys import RoundRandomness, block_layout, encrypt, decrypt, generate_keyset
from sifl.learner import (
    MLP,
    Hyperparams,
    MiniBatch,
    ModelSpec,
    NumericError,
    client_update,
    encrypted_sgd_step,
    flatten,
    plain_sgd_step,
    unflatten,
)
from helpers import central_differences, hand_key, make_dataset, random_batch


def test_spec_param_count():
    assert ModelSpec((2, 3, 2)).param_count == 2 * 3 + 3 + 3 * 2 + 2  # 17
    assert ModelSpec((784, 200, 200, 10)).param_count == 199210  # published scale


def test_spec_requires_hidden_layer():
    with pytest.raises(ValueError, match="hidden"):
        ModelSpec((4, 2))


def test_flatten_round_trip_bit_identical():
    spec = ModelSpec((2, 3, 2))
    rng = np.random.default_rng(0)
    layers = [
        (rng.normal(size=(2, 3)), rng.normal(size=3)),
        (rng.normal(size=(3, 2)), rng.normal(size=2)),
    ]
    w = flatten(spec, layers)
    assert w.shape == (17,)
    back = unflatten(spec, w)
    for (W, b), (W2, b2) in zip(layers, back):
        assert (W == W2).all() and (b == b2).all()


def test_unflatten_rejects_wrong_length():
    with pytest.raises(ValueError, match="shape"):
        unflatten(ModelSpec((2, 3, 2)), np.zeros(16))


def test_forward_zero_weights_uniform_two_classes():
    model = MLP(ModelSpec((3, 4, 2)))
    batch = random_batch(np.random.default_rng(1), 6, 3, 2)
    probs, loss = model.forward(np.zeros(model.spec.param_count), batch)
    assert np.abs(probs - 0.5).max() <= 1e-12
    assert abs(loss - np.log(2)) <= 1e-12


def test_forward_zero_weights_uniform_ten_classes():
    model = MLP(ModelSpec((5, 8, 10)))
    batch = random_batch(np.random.default_rng(2), 4, 5, 10)
    _, loss = model.forward(np.zeros(model.spec.param_count), batch)
    assert abs(loss - np.log(10)) <= 1e-12


def test_forward_rows_sum_to_one():
    model = MLP(ModelSpec((4, 6, 3)))
    rng = np.random.default_rng(3)
    w = rng.normal(0, 2, model.spec.param_count)
    probs, loss = model.forward(w, random_batch(rng, 32, 4, 3))
    assert np.abs(probs.sum(axis=1) - 1.0).max() <= 1e-12
    assert loss >= 0


def test_forward_nonfinite_names_layer():
    model = MLP(ModelSpec((2, 3, 2)))
    w = np.zeros(model.spec.param_count)
    w[0] = np.inf
    with pytest.raises(NumericError, match="layer 0"):
        model.forward(w, MiniBatch(inputs=np.ones((1, 2)), labels=np.array([0])))


def test_gradient_softmax_head_hand_case():
    # Pass-through hidden unit, zero output layer, x = [1], target class 0:
    # probabilities are uniform, so d(loss)/d(logits) = p - onehot = [-.5, .5]
    # and the output layer's weight/bias gradients equal that row.
    spec = ModelSpec((1, 1, 2))
    model = MLP(spec)
    w = flatten(spec, [(np.array([[1.0]]), np.zeros(1)), (np.zeros((1, 2)), np.zeros(2))])
    grad = model.gradient(w, MiniBatch(inputs=np.array([[1.0]]), labels=np.array([0])))
    layers = unflatten(spec, grad)
    assert np.allclose(layers[1][0], [[-0.5, 0.5]], atol=1e-15)  # weight grad = x outer (p - onehot)
    assert np.allclose(layers[1][1], [-0.5, 0.5], atol=1e-15)


def test_gradient_matches_central_differences():
    model = MLP(ModelSpec((3, 4, 2)))
    rng = np.random.default_rng(7)
    w = rng.normal(0, 1, model.spec.param_count)
    batch = random_batch(rng, 5, 3, 2)
    grad = model.gradient(w, batch)
    oracle = central_differences(lambda v: model.forward(v, batch)[1], w)
    rel = np.abs(grad - oracle) / np.maximum.reduce(
        [np.abs(grad), np.abs(oracle), np.full_like(grad, 1e-6)]
    )
    assert rel.max() <= 1e-4


def test_gradient_of_duplicated_batch_is_unchanged():
    model = MLP(ModelSpec((3, 4, 2)))
    rng = np.random.default_rng(8)
    w = rng.normal(size=model.spec.param_count)
    single = MiniBatch(inputs=rng.normal(size=(1, 3)), labels=np.array([1]))
    repeated = MiniBatch(
        inputs=np.repeat(single.inputs, 4, axis=0), labels=np.repeat(single.labels, 4)
    )
    assert np.allclose(model.gradient(w, single), model.gradient(w, repeated), atol=1e-12)


def quad_grad(w):
    # gradient of l(w) = 0.5 * (w - 4)^2
    return w - 4.0


def test_plain_step_scalar_quadratic():
    out = plain_sgd_step(np.array([5.0]), quad_grad, 0.5)
    assert np.allclose(out, [4.5], atol=0)


def test_plain_step_zero_lr_and_stationary_point():
    w = np.array([5.0])
    assert (plain_sgd_step(w, quad_grad, 0.0) == w).all()
    assert (plain_sgd_step(np.array([4.0]), quad_grad, 0.5) == np.array([4.0])).all()


def test_encrypted_step_hand_case():
    ks = hand_key()
    rr = RoundRandomness(round_index=0, R=np.array([3.0]))
    enc = encrypt(ks, np.array([5.0]), rr)
    stepped = encrypted_sgd_step(ks, enc, quad_grad, 0.5)
    assert np.allclose(stepped.values, [4.8, -5.1], atol=1e-12)
    expected = encrypt(ks, plain_sgd_step(np.array([5.0]), quad_grad, 0.5), rr)
    assert np.allclose(stepped.values, expected.values, atol=1e-12)


def test_encrypted_step_zero_lr():
    ks = hand_key()
    enc = encrypt(ks, np.array([5.0]), RoundRandomness(0, np.array([3.0])))
    assert (encrypted_sgd_step(ks, enc, quad_grad, 0.0).values == enc.values).all()


def test_encrypted_step_tracks_plain_step_on_mlp():
    model = MLP(ModelSpec((3, 4, 2)))
    ks = generate_keyset(block_layout(model.spec.param_count, 8), 1, seed=21)
    rng = np.random.default_rng(22)
    for _ in range(20):
        w = rng.normal(0, 1, ks.total_n)
        rr = RoundRandomness(0, rng.normal(size=ks.total_r))
        batch = random_batch(rng, 6, 3, 2)
        lr = float(rng.uniform(0.01, 1.0))
        grad_fn = lambda v: model.gradient(v, batch)
        enc_next = encrypted_sgd_step(ks, encrypt(ks, w, rr), grad_fn, lr)
        plain_next = plain_sgd_step(w, grad_fn, lr)
        tol = 1e-8 * (1 + np.linalg.norm(w))
        assert np.abs(decrypt(ks, enc_next) - plain_next).max() <= tol
        # immersion commutation: stepping encrypted == encrypting the stepped
        assert np.abs(enc_next.values - encrypt(ks, plain_next, rr).values).max() <= tol


def test_kernel_component_constant_across_iterations():
    # (I - G M) wt must not drift: every update lies in range(G).
    model = MLP(ModelSpec((3, 4, 2)))
    ks = generate_keyset(block_layout(model.spec.param_count, 16), 2, seed=31)
    rng = np.random.default_rng(32)
    w = rng.normal(size=ks.total_n)
    enc = encrypt(ks, w, RoundRandomness(0, rng.normal(size=ks.total_r)))
    kernel = lambda vec: vec - ks.lift(ks.project(vec))
    initial = kernel(enc.values)
    batch = random_batch(rng, 6, 3, 2)
    for _ in range(8):
        enc = encrypted_sgd_step(ks, enc, lambda v: model.gradient(v, batch), 0.1)
        assert np.abs(kernel(enc.values) - initial).max() <= 1e-9


class CountingMLP(MLP):
    def __init__(self, spec):
        super().__init__(spec)
        self.calls = 0

    def loss_and_gradient(self, w, batch):
        self.calls += 1
        return super().loss_and_gradient(w, batch)


def test_client_update_single_batch_single_epoch_is_one_step():
    model = CountingMLP(ModelSpec((3, 4, 2)))
    rng = np.random.default_rng(41)
    X, y = make_dataset(rng, 10, 3, 2)
    w0 = model.init_params(seed=1)
    hyper = Hyperparams(lr=0.1, local_epochs=1, batch_size=10)
    updated, _ = client_update("plain", w0, (X, y), hyper, model, shuffle_seed=5)
    assert model.calls == 1
    # reproduce the single step by hand with the same shuffled batch
    order = np.random.default_rng(np.random.SeedSequence(5)).permutation(10)
    batch = MiniBatch(inputs=X[order], labels=y[order])
    expected = w0 - 0.1 * MLP(model.spec).gradient(w0, batch)
    assert np.allclose(updated, expected, atol=0)


def test_client_update_two_epochs_walk_batches_twice():
    model = CountingMLP(ModelSpec((3, 4, 2)))
    rng = np.random.default_rng(42)
    X, y = make_dataset(rng, 33, 3, 2)  # 33 samples, batch 8 -> 5 batches (short tail kept)
    hyper = Hyperparams(lr=0.05, local_epochs=2, batch_size=8)
    client_update("plain", model.init_params(seed=2), (X, y), hyper, model, shuffle_seed=6)
    assert model.calls == 2 * 5


def test_client_update_modes_stay_in_lifted_correspondence():
    model = MLP(ModelSpec((8, 16, 3)))
    ks = generate_keyset(block_layout(model.spec.param_count, 64), 1, seed=51)
    rng = np.random.default_rng(52)
    X, y = make_dataset(rng, 150, 8, 3)
    w0 = model.init_params(seed=3)
    rr = RoundRandomness(0, rng.normal(size=ks.total_r))
    hyper = Hyperparams(lr=0.05, local_epochs=2, batch_size=32)

    plain_out, plain_loss = client_update("plain", w0, (X, y), hyper, model, shuffle_seed=9)
    enc_out, enc_loss = client_update(
        "encrypted", encrypt(ks, w0, rr), (X, y), hyper, model, keys=ks, shuffle_seed=9
    )
    tol = 1e-8 * (1 + np.linalg.norm(plain_out))
    assert np.abs(enc_out.values - encrypt(ks, plain_out, rr).values).max() <= tol
    assert abs(enc_loss - plain_loss) <= 1e-8


def test_client_update_rejects_empty_dataset_and_missing_keys():
    model = MLP(ModelSpec((3, 4, 2)))
    hyper = Hyperparams(lr=0.1)
    with pytest.raises(ValueError, match="empty"):
        client_update("plain", np.zeros(model.spec.param_count),
                      (np.empty((0, 3)), np.empty(0, dtype=int)), hyper, model)
    with pytest.raises(ValueError, match="key"):
        client_update("encrypted", np.zeros(model.spec.param_count),
                      make_dataset(np.random.default_rng(0), 4, 3, 2), hyper, model)


def test_plain_trajectory_deterministic_across_runs():
    model = MLP(ModelSpec((3, 4, 2)))
    rng = np.random.default_rng(60)
    data = make_dataset(rng, 40, 3, 2)
    hyper = Hyperparams(lr=0.1, local_epochs=3, batch_size=16)
    w0 = model.init_params(seed=4)
    a, _ = client_update("plain", w0, data, hyper, model, shuffle_seed=7)
    b, _ = client_update("plain", w0, data, hyper, model, shuffle_seed=7)
    assert (a == b).all()
