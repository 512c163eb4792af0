"""Federated averaging on matrix-encrypted model parameters.

Clients train on parameters lifted into a higher-dimensional coordinate
system by a random affine map; an untrusted aggregator averages the lifted
updates; the server projects the aggregate back with a left inverse.  The
construction commutes exactly with SGD and with dataset-size-weighted
averaging, so the encrypted run reproduces the plain FedAvg trajectory to
floating-point accuracy — which this package treats as a testable property,
not a slogan.
"""

from .config import RunConfig, desk_benchmark, load_config, parse_config, reduced_mnist
from .keys import (
    EncryptedParamVector,
    FreshnessLog,
    FreshnessViolationError,
    ImmersionKey,
    KeyGenerationError,
    KeySet,
    RandomnessSource,
    RoundRandomness,
    decrypt,
    encrypt,
    fresh_randomness,
    generate_key,
    generate_keyset,
    key_from_matrix,
    keyset_from_bytes,
    keyset_to_bytes,
    load_keyset,
    save_keyset,
)
from .learner import (
    MLP,
    Hyperparams,
    MiniBatch,
    ModelSpec,
    ParamVector,
    client_update,
    encrypted_sgd_step,
    flatten,
    plain_sgd_step,
    unflatten,
)
from .metrics import EquivalenceReport, check_equivalence, rel_param_error, write_metrics
from .protocol import (
    Aggregator,
    ClientState,
    DecodeError,
    Message,
    ProtocolError,
    RoundRecord,
    aggregate,
    decode_message,
    encode_message,
)
from .training import Simulation, TrainingResult, run_training

__version__ = "0.1.0"
