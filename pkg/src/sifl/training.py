"""Round orchestration: server, clients, and aggregator wired per Fig-1 roles.

One round, encrypted mode:

1. server draws fresh kernel randomness R and broadcasts encrypt(w, R)
2. every client runs its local epochs of the encrypted SGD step
3. the aggregator averages the encrypted updates by dataset size
4. server decrypts the aggregate, evaluates it, re-encrypts next round

The shared mask ``N @ R`` enters once via the broadcast, is preserved
verbatim by the encrypted dynamics (updates stay in range(G)), survives the
weight-sum-one average with coefficient exactly 1, and dies at decryption.
Clients therefore never see R itself.

In plain mode the same loop runs without any of the key machinery, which is
the baseline the equivalence harness compares against: a dual run executes
both modes from identical seeds and reports the per-round deviation of the
decrypted trajectory from the plain one.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .config import RunConfig
from .datasets import load_idx_dataset, make_synthetic, partition_iid
from .keys import (
    TAG_DATA,
    TAG_INIT,
    TAG_SHUFFLE,
    EncryptedParamVector,
    KeySet,
    RandomnessSource,
    RoundRandomness,
    block_layout,
    decrypt,
    derive_seed,
    encrypt,
    fresh_randomness,
    generate_keyset,
)
from .learner import MLP, Hyperparams, ModelSpec, client_update
from .metrics import EquivalenceReport, rel_param_error
from .protocol import Aggregator, ClientState, RoundRecord

__all__ = [
    "SessionResult",
    "TrainingResult",
    "build_model",
    "build_keys",
    "build_clients",
    "run_client_update",
    "Simulation",
    "run_session",
    "run_training",
]


def build_model(config: RunConfig) -> MLP:
    return MLP(ModelSpec(layer_sizes=tuple(config.layers)))


def build_keys(config: RunConfig, model: MLP) -> KeySet:
    layout = block_layout(model.spec.param_count, config.block_max)
    return generate_keyset(layout, config.expansion, config.seed)


def build_clients(config: RunConfig):
    """Client roster (ids 1..N) plus the held-out evaluation set."""
    if config.dataset == "synthetic":
        parts, test = make_synthetic(
            classes=config.classes,
            per_client=config.per_client,
            clients=config.clients,
            input_dim=config.layers[0],
            seed=derive_seed(config.seed, TAG_DATA),
            test_count=config.test_count,
        )
    else:
        X, y = load_idx_dataset(config.train_images, config.train_labels)
        if config.train_limit:
            X, y = X[: config.train_limit], y[: config.train_limit]
        X_test, y_test = load_idx_dataset(config.test_images, config.test_labels)
        if config.test_limit:
            X_test, y_test = X_test[: config.test_limit], y_test[: config.test_limit]
        parts = partition_iid(X, y, config.clients, derive_seed(config.seed, TAG_DATA))
        test = (X_test, y_test)
    clients = [ClientState(client_id=i + 1, dataset=part) for i, part in enumerate(parts)]
    return clients, test


def hyper_of(config: RunConfig) -> Hyperparams:
    return Hyperparams(
        lr=config.lr,
        local_epochs=config.local_epochs,
        rounds=config.rounds,
        batch_size=config.batch_size,
    )


def shuffle_seed_for(config_seed: int, round_index: int, client_id: int) -> int:
    return derive_seed(config_seed, TAG_SHUFFLE, round_index, client_id)


def run_client_update(
    mode: str,
    model: MLP,
    hyper: Hyperparams,
    client: ClientState,
    broadcast: np.ndarray | EncryptedParamVector,
    keys: KeySet | None,
    config_seed: int,
    round_index: int,
) -> tuple[np.ndarray, float]:
    """One client's local work for one round; returns (update values, loss)."""
    seed = shuffle_seed_for(config_seed, round_index, client.client_id)
    local_mode = "plain" if mode == "plain" else "encrypted"
    updated, loss = client_update(
        local_mode, broadcast, client.dataset, hyper, model, keys=keys, shuffle_seed=seed
    )
    values = updated.values if isinstance(updated, EncryptedParamVector) else updated
    return values, loss


@dataclass
class SessionResult:
    """One mode's full run: records plus the traces the harness compares."""

    mode: str
    records: list[RoundRecord]
    param_trace: list[np.ndarray]
    enc_trace: list[EncryptedParamVector] = field(default_factory=list)
    randomness_trace: list[RoundRandomness] = field(default_factory=list)
    keys: KeySet | None = None
    client_updates: list[dict[int, np.ndarray]] = field(default_factory=list)


@dataclass
class TrainingResult:
    config: RunConfig
    records: list[RoundRecord]
    sessions: dict[str, SessionResult]
    report: EquivalenceReport | None = None
    client_checks: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.report is None or self.report.passed


class Simulation:
    """In-process driver for a single mode (plain or sifl)."""

    def __init__(self, config: RunConfig, mode: str):
        if mode not in ("plain", "sifl"):
            raise ValueError(f"simulation mode must be plain or sifl, got {mode!r}")
        self.config = config
        self.mode = mode
        self.model = build_model(config)
        self.clients, self.test_set = build_clients(config)
        self.hyper = hyper_of(config)
        self.keys = build_keys(config, self.model) if mode == "sifl" else None
        self.randomness = RandomnessSource(seed=config.seed, scale=config.randomness_scale)
        self.w = self.model.init_params(derive_seed(config.seed, TAG_INIT))
        self.result = SessionResult(mode=mode, records=[], param_trace=[], keys=self.keys)

    def run_round(self, round_index: int) -> RoundRecord:
        """Execute one global round and advance the server's model."""
        keep_updates = self.config.verbosity >= 2
        enc_ms = dec_ms = 0.0
        if self.mode == "sifl":
            rr = fresh_randomness(self.keys, round_index, self.randomness)
            tic = time.perf_counter()
            broadcast = encrypt(self.keys, self.w, rr)
            enc_ms = (time.perf_counter() - tic) * 1e3
            self.result.randomness_trace.append(rr)
        else:
            broadcast = self.w

        agg = Aggregator([c.client_id for c in self.clients])
        per_client: dict[int, np.ndarray] = {}
        tic = time.perf_counter()
        for client in self.clients:
            values, loss = run_client_update(
                self.mode, self.model, self.hyper, client, broadcast,
                self.keys, self.config.seed, round_index,
            )
            agg.submit(client.client_id, values, client.size, loss, round_index)
            if keep_updates:
                per_client[client.client_id] = values
        train_ms = (time.perf_counter() - tic) * 1e3

        agg_values, train_loss, _ = agg.finish()
        if self.mode == "sifl":
            enc_agg = EncryptedParamVector(values=agg_values, round_index=round_index)
            tic = time.perf_counter()
            self.w = decrypt(self.keys, enc_agg)
            dec_ms = (time.perf_counter() - tic) * 1e3
            self.result.enc_trace.append(enc_agg)
        else:
            self.w = agg_values

        accuracy = self.model.accuracy(self.w, *self.test_set)
        record = RoundRecord(
            round_index=round_index,
            mode=self.mode,
            train_loss=train_loss,
            test_accuracy=accuracy,
            t_encrypt_ms=enc_ms,
            t_decrypt_ms=dec_ms,
            t_train_ms=train_ms,
        )
        record.validate()
        self.result.records.append(record)
        self.result.param_trace.append(self.w.copy())
        if keep_updates:
            self.result.client_updates.append(per_client)
        return record

    def run(self) -> SessionResult:
        for t in range(self.config.rounds):
            self.run_round(t)
        return self.result


def run_session(config: RunConfig, mode: str, transport: str = "sim") -> SessionResult:
    if transport == "sim":
        return Simulation(config, mode).run()
    if transport == "socket":
        from .transport import run_socket_session

        return run_socket_session(config, mode)
    raise ValueError(f"unknown transport {transport!r}")


def _client_checks(
    config: RunConfig, plain: SessionResult, sifl: SessionResult
) -> list[dict]:
    """Per-client encrypted-vs-expected comparison (verbosity >= 2 only).

    For each round and client, the client's encrypted update should equal
    encrypt(plain update, same round randomness) exactly up to float noise;
    emits the norms of both and their relative deviation.
    """
    checks = []
    keys = sifl.keys
    for t, rr in enumerate(sifl.randomness_trace):
        if t >= len(plain.client_updates) or t >= len(sifl.client_updates):
            break
        for cid in sorted(sifl.client_updates[t]):
            actual = sifl.client_updates[t][cid]
            expected = encrypt(keys, plain.client_updates[t][cid], rr).values
            check = {
                "round": t,
                "client": cid,
                "norm_encrypted": float(np.linalg.norm(actual)),
                "norm_expected": float(np.linalg.norm(expected)),
                "rel_err": rel_param_error(expected, actual),
            }
            checks.append(check)
            print(
                "round {round} client {client}: |enc update| = {norm_encrypted:.6f}, "
                "|expected| = {norm_expected:.6f}, rel err = {rel_err:.3e}".format(**check)
            )
    return checks


def run_training(config: RunConfig, transport: str = "sim") -> TrainingResult:
    """Run the configured experiment; dual mode fills equivalence metrics."""
    config.validate()
    if config.mode in ("plain", "sifl"):
        session = run_session(config, config.mode, transport)
        return TrainingResult(
            config=config, records=session.records, sessions={config.mode: session}
        )

    plain = run_session(config, "plain", transport)
    sifl = run_session(config, "sifl", transport)
    for rec_plain, rec_sifl, w_plain, w_sifl in zip(
        plain.records, sifl.records, plain.param_trace, sifl.param_trace
    ):
        rec_sifl.equivalence_rel_err = rel_param_error(w_plain, w_sifl)
    report = metrics.check_equivalence(
        plain.param_trace, sifl.enc_trace, sifl.keys, config.equivalence_threshold
    )
    checks = _client_checks(config, plain, sifl) if config.verbosity >= 2 else []
    records = [rec for pair in zip(plain.records, sifl.records) for rec in pair]
    return TrainingResult(
        config=config,
        records=records,
        sessions={"plain": plain, "sifl": sifl},
        report=report,
        client_checks=checks,
    )
