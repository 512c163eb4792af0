"""Random-matrix encryption keys and the lift/mask/project algebra.

A key for a block of ``n`` parameters is a triple of real matrices
``(M, G, N)`` with ``M`` of shape ``n x m`` (``m = n + r``, ``r >= 1``):

* ``G`` (``m x n``) is a right inverse of ``M``: ``M @ G = I``.  Lifting a
  parameter vector through ``G`` moves it into the higher-dimensional
  encrypted coordinates.
* ``N`` (``m x (m - n)``) spans ``ker M``: ``M @ N = 0``.  The per-round mask
  ``N @ R`` lives entirely in that kernel, so projecting back through ``M``
  annihilates it.

Encryption of a flat parameter vector ``w`` with round randomness ``R`` is the
affine map ``G @ w + N @ R``; decryption is ``M @ (.)``.  Because ``M G = I``
and ``M N = 0``, decrypt(encrypt(w)) == w and the map commutes with convex
(weight-sum-one) averaging, which is what lets an aggregator average encrypted
client updates without holding any key.

Large models use a :class:`KeySet`: the flat vector is partitioned into
contiguous blocks, each with its own independent key.  A dense single key at
realistic model sizes would need hundreds of GB; blocking preserves every
algebraic identity because the blocks never mix.
"""

from __future__ import annotations

import hashlib
import struct
import threading
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "ImmersionKey",
    "KeySet",
    "RoundRandomness",
    "RandomnessSource",
    "FreshnessLog",
    "EncryptedParamVector",
    "KeyGenerationError",
    "KeyValidationError",
    "FreshnessViolationError",
    "derive_seed",
    "derive_rng",
    "key_from_matrix",
    "generate_key",
    "generate_keyset",
    "encrypt",
    "decrypt",
    "fresh_randomness",
    "save_keyset",
    "load_keyset",
    "keyset_to_bytes",
    "keyset_from_bytes",
]

RIGHT_INVERSE_TOL = 1e-9
KERNEL_TOL = 1e-9
MAX_CONDITION = 1e6
MAX_GENERATION_ATTEMPTS = 16

# Domain tags for deterministic seed derivation; distinct per stream so one
# run seed yields independent key / randomness / shuffle streams.
TAG_KEY_BLOCK = 1
TAG_ROUND_RANDOMNESS = 2
TAG_SHUFFLE = 3
TAG_INIT = 4
TAG_DATA = 5


class KeyGenerationError(RuntimeError):
    """Raised when key sampling cannot meet the conditioning guard."""


class KeyValidationError(ValueError):
    """Raised when a key or key set violates its algebraic invariants."""


class FreshnessViolationError(RuntimeError):
    """Raised when a round's randomness digest repeats an earlier round."""


def derive_seed(seed: int, *path: int) -> int:
    """Derive a stable child seed from a master seed and an integer path.

    Deterministic across runs and platforms; used so that key blocks, round
    randomness, and client shuffles all draw from independent streams of one
    configured seed.
    """
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(path))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def derive_rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=tuple(path))
    )


@dataclass(frozen=True)
class ImmersionKey:
    """Encryption key for one contiguous block of ``n`` parameters.

    ``M`` decrypts (projects m -> n), ``G`` lifts (n -> m, right inverse of
    M), ``N`` spans ker M and carries the per-round mask.
    """

    n: int
    m: int
    M: np.ndarray
    G: np.ndarray
    N: np.ndarray

    def validate(self) -> None:
        r = self.m - self.n
        if self.n < 1 or r < 1:
            raise KeyValidationError(f"need n >= 1 and m > n, got n={self.n} m={self.m}")
        if self.M.shape != (self.n, self.m):
            raise KeyValidationError(f"M shape {self.M.shape} != ({self.n}, {self.m})")
        if self.G.shape != (self.m, self.n):
            raise KeyValidationError(f"G shape {self.G.shape} != ({self.m}, {self.n})")
        if self.N.shape != (self.m, r):
            raise KeyValidationError(f"N shape {self.N.shape} != ({self.m}, {r})")
        right_inv_err = np.abs(self.M @ self.G - np.eye(self.n)).max()
        if right_inv_err > RIGHT_INVERSE_TOL:
            raise KeyValidationError(f"|MG - I| = {right_inv_err:.3e} exceeds {RIGHT_INVERSE_TOL}")
        kernel_err = np.abs(self.M @ self.N).max()
        if kernel_err > KERNEL_TOL:
            raise KeyValidationError(f"|MN| = {kernel_err:.3e} exceeds {KERNEL_TOL}")
        if np.linalg.matrix_rank(self.G) != self.n:
            raise KeyValidationError("G is not of full column rank")
        if np.linalg.matrix_rank(self.N) != r:
            raise KeyValidationError("N is not of full column rank")
        cond = np.linalg.cond(self.M @ self.M.T)
        if cond > MAX_CONDITION:
            raise KeyValidationError(f"cond(M M^T) = {cond:.3e} exceeds {MAX_CONDITION:.0e}")


class _Segments:
    """Index runs of equal length, one per block in a stacked group.

    When the runs happen to tile one contiguous span (true for every group a
    uniform layout produces), gather and scatter degenerate to reshaped views
    so the batched matmul reads and writes in place.
    """

    def __init__(self, idx: np.ndarray):
        self._idx = idx
        first = int(idx[0, 0])
        self._span = slice(first, first + idx.size)
        self._shape = idx.shape
        self.contiguous = bool((idx.ravel() == np.arange(first, first + idx.size)).all())

    def gather(self, v: np.ndarray) -> np.ndarray:
        if self.contiguous:
            return v[self._span].reshape(self._shape)
        return v[self._idx]

    def view(self, out: np.ndarray):
        return out[self._span].reshape(self._shape) if self.contiguous else None

    def scatter(self, out: np.ndarray, values: np.ndarray) -> None:
        out[self._idx] = values


def _batched_matvec(mats: np.ndarray, seg_in: "_Segments", seg_out: "_Segments",
                    v: np.ndarray, out: np.ndarray) -> None:
    """out[seg_out blocks] = mats[j] @ v[seg_in blocks], one matmul per group."""
    src = seg_in.gather(v)[..., None]
    dst = seg_out.view(out)
    if dst is not None:
        np.matmul(mats, src, out=dst[..., None])
    else:
        seg_out.scatter(out, np.matmul(mats, src)[..., 0])


@dataclass(frozen=True)
class KeySet:
    """Per-block keys partitioning a flat parameter vector.

    ``block_layout`` lists ``(offset, n_j)`` pairs in ascending, contiguous,
    non-overlapping order; the offsets index the plain vector.  Encrypted
    vectors concatenate the per-block ``m_j`` segments in the same order.
    """

    blocks: tuple[ImmersionKey, ...]
    block_layout: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if len(self.blocks) != len(self.block_layout):
            raise KeyValidationError("blocks and block_layout length mismatch")
        if not self.blocks:
            raise KeyValidationError("empty key set")
        expected = 0
        for key, (offset, n_j) in zip(self.blocks, self.block_layout):
            if offset != expected:
                raise KeyValidationError(
                    f"block at offset {offset} is not contiguous (expected {expected})"
                )
            if key.n != n_j:
                raise KeyValidationError(f"block at offset {offset}: key n={key.n} != layout {n_j}")
            expected = offset + n_j

    @property
    def total_n(self) -> int:
        offset, n_last = self.block_layout[-1]
        return offset + n_last

    @property
    def total_m(self) -> int:
        return sum(k.m for k in self.blocks)

    @property
    def total_r(self) -> int:
        return sum(k.m - k.n for k in self.blocks)

    def validate(self) -> None:
        for key in self.blocks:
            key.validate()

    @cached_property
    def _stacked(self):
        """Blocks grouped by shape and stacked for batched matmul.

        A per-block Python loop spends more time in call overhead than in the
        small matvecs themselves; stacking same-shape blocks into one 3D
        matmul produces bit-identical results (numpy runs the same BLAS per
        slice) at a fraction of the overhead.
        """
        by_shape: dict[tuple[int, int], list[int]] = {}
        for idx, key in enumerate(self.blocks):
            by_shape.setdefault((key.n, key.m), []).append(idx)
        enc_off = np.concatenate(([0], np.cumsum([k.m for k in self.blocks])))
        r_off = np.concatenate(([0], np.cumsum([k.m - k.n for k in self.blocks])))
        groups = []
        for (n, m), indices in by_shape.items():
            idx_plain = np.stack([np.arange(self.block_layout[i][0],
                                            self.block_layout[i][0] + n) for i in indices])
            idx_enc = np.stack([np.arange(enc_off[i], enc_off[i] + m) for i in indices])
            idx_r = np.stack([np.arange(r_off[i], r_off[i] + m - n) for i in indices])
            groups.append((
                np.stack([self.blocks[i].M for i in indices]),
                np.stack([self.blocks[i].G for i in indices]),
                np.stack([self.blocks[i].N for i in indices]),
                _Segments(idx_plain), _Segments(idx_enc), _Segments(idx_r),
            ))
        return groups

    def lift(self, v: np.ndarray) -> np.ndarray:
        """Blockwise ``G_j @ v_j``: plain coordinates up to encrypted ones."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.total_n,):
            raise ValueError(f"expected vector of length {self.total_n}, got shape {v.shape}")
        out = np.empty(self.total_m)
        for _, G, _, seg_plain, seg_enc, _ in self._stacked:
            _batched_matvec(G, seg_plain, seg_enc, v, out)
        return out

    def project(self, v: np.ndarray) -> np.ndarray:
        """Blockwise ``M_j @ v_j``: encrypted coordinates back down to plain."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.total_m,):
            raise ValueError(f"expected vector of length {self.total_m}, got shape {v.shape}")
        out = np.empty(self.total_n)
        for M, _, _, seg_plain, seg_enc, _ in self._stacked:
            _batched_matvec(M, seg_enc, seg_plain, v, out)
        return out

    def kernel_mask(self, R: np.ndarray) -> np.ndarray:
        """Blockwise ``N_j @ R_j``: the additive mask, entirely in ker M."""
        R = np.asarray(R, dtype=np.float64)
        if R.shape != (self.total_r,):
            raise ValueError(f"expected randomness of length {self.total_r}, got shape {R.shape}")
        out = np.empty(self.total_m)
        for _, _, N, _, seg_enc, seg_r in self._stacked:
            _batched_matvec(N, seg_r, seg_enc, R, out)
        return out


@dataclass(frozen=True)
class RoundRandomness:
    """Fresh kernel randomness for one global round."""

    round_index: int
    R: np.ndarray

    def digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.R).tobytes()).hexdigest()


@dataclass(frozen=True)
class EncryptedParamVector:
    """Flat model parameters in encrypted (lifted) coordinates."""

    values: np.ndarray
    round_index: int

    def validate(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise ValueError("encrypted parameter vector contains non-finite entries")


class FreshnessLog:
    """Append-only record of round-randomness digests.

    Detects reuse of a randomness vector within one training run; reuse would
    void the one-time-mask property, so it is treated as an error, not a
    warning.  Appends are serialized for concurrent client workers.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._seen: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self._seen)

    def record(self, digest: str, round_index: int) -> None:
        with self._lock:
            prior = self._seen.get(digest)
            if prior is not None:
                raise FreshnessViolationError(
                    f"randomness digest for round {round_index} repeats round {prior}; "
                    "round randomness must never be reused"
                )
            self._seen[digest] = round_index


@dataclass
class RandomnessSource:
    """Seeded source of per-round randomness with a freshness log."""

    seed: int
    scale: float = 1.0
    log: FreshnessLog = field(default_factory=FreshnessLog)


def _key_components(M: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Right inverse, orthonormal kernel basis, and cond(M M^T) from one SVD.

    All matrices come out C-contiguous and aligned so the BLAS calls in
    lift/project round identically whether a key was generated in-process or
    deserialized from a blob.
    """
    n = M.shape[0]
    s = np.linalg.svd(M, compute_uv=False)
    cond = float((s[0] / s[-1]) ** 2) if s[-1] > 0 else np.inf
    G = np.ascontiguousarray(np.linalg.solve(M @ M.T, M).T)
    # Orthonormal completion: the trailing columns of a complete QR of M^T
    # are orthonormal and orthogonal to range(M^T), i.e. they span ker M.
    q = np.linalg.qr(M.T, mode="complete")[0]
    N = np.ascontiguousarray(q[:, n:])
    return G, N, cond


def key_from_matrix(M: np.ndarray) -> ImmersionKey:
    """Build a key from an explicit decryption matrix ``M`` (n x m, m > n).

    ``G`` is the Moore-Penrose right inverse ``M^T (M M^T)^-1`` and ``N`` an
    orthonormal basis of ``ker M``.  Validates all invariants; useful for
    tests that pin a particular key.
    """
    M = np.ascontiguousarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] >= M.shape[1]:
        raise KeyValidationError(f"M must be n x m with m > n, got shape {M.shape}")
    G, N, _ = _key_components(M)
    key = ImmersionKey(n=M.shape[0], m=M.shape[1], M=M, G=G, N=N)
    key.validate()
    return key


def generate_key(n: int, r: int, seed: int) -> ImmersionKey:
    """Sample a key for ``n`` parameters with expansion ``r`` (m = n + r).

    Entries of ``M`` are i.i.d. standard normal.  Draws that fail the
    conditioning guard ``cond(M M^T) <= 1e6`` are re-sampled from a fresh
    sub-seed, at most MAX_GENERATION_ATTEMPTS times.  Deterministic given the
    seed.  Only the cheap residual checks run here; call ``validate()`` for
    the full invariant sweep.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if r < 1:
        raise ValueError(f"expansion r must be >= 1, got {r}")
    m = n + r
    for attempt in range(MAX_GENERATION_ATTEMPTS):
        rng = derive_rng(seed, attempt)
        M = rng.standard_normal((n, m))
        G, N, cond = _key_components(M)
        if cond > MAX_CONDITION:
            continue
        key = ImmersionKey(n=n, m=m, M=M, G=G, N=N)
        if (np.abs(M @ G - np.eye(n)).max() > RIGHT_INVERSE_TOL
                or np.abs(M @ N).max() > KERNEL_TOL):
            continue  # conditioning passed but residuals did not; re-sample
        return key
    raise KeyGenerationError(
        f"could not draw a well-conditioned key for n={n}, r={r} from seed {seed} "
        f"after {MAX_GENERATION_ATTEMPTS} attempts"
    )


def block_layout(total_n: int, block_max: int) -> list[int]:
    """Split ``total_n`` parameters into block sizes of at most ``block_max``."""
    if total_n < 1:
        raise ValueError(f"total_n must be >= 1, got {total_n}")
    if block_max < 1:
        raise ValueError(f"block_max must be >= 1, got {block_max}")
    sizes = [block_max] * (total_n // block_max)
    if total_n % block_max:
        sizes.append(total_n % block_max)
    return sizes


def generate_keyset(layout: list[int], r: int, seed: int) -> KeySet:
    """Generate one key per block size in ``layout``, seeded independently."""
    if not layout:
        raise ValueError("empty block layout")
    if any(n_j < 1 for n_j in layout):
        raise ValueError(f"all block sizes must be >= 1, got {layout}")
    blocks = []
    offsets = []
    offset = 0
    for j, n_j in enumerate(layout):
        sub_seed = derive_seed(seed, TAG_KEY_BLOCK, j)
        blocks.append(generate_key(n_j, r, sub_seed))
        offsets.append((offset, n_j))
        offset += n_j
    return KeySet(blocks=tuple(blocks), block_layout=tuple(offsets))


def encrypt(keys: KeySet, w: np.ndarray, rr: RoundRandomness) -> EncryptedParamVector:
    """Encrypt plain parameters: blockwise ``G_j @ w_j + N_j @ R_j``."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (keys.total_n,):
        raise ValueError(
            f"parameter vector has shape {w.shape}, key set expects ({keys.total_n},)"
        )
    values = keys.lift(w) + keys.kernel_mask(rr.R)
    return EncryptedParamVector(values=values, round_index=rr.round_index)


def decrypt(keys: KeySet, enc: EncryptedParamVector | np.ndarray) -> np.ndarray:
    """Decrypt: blockwise ``M_j @ v_j``.  The kernel mask is annihilated."""
    values = enc.values if isinstance(enc, EncryptedParamVector) else np.asarray(enc)
    if values.shape != (keys.total_m,):
        raise ValueError(
            f"encrypted vector has shape {values.shape}, key set expects ({keys.total_m},)"
        )
    return keys.project(values)


def fresh_randomness(keys: KeySet, round_index: int, source: RandomnessSource) -> RoundRandomness:
    """Draw the round's kernel randomness and log its digest.

    Deterministic given ``(source.seed, round_index)``; a digest collision
    with any earlier round of the same source raises, which is how both RNG
    misuse and deliberate replay surface.
    """
    rng = derive_rng(source.seed, TAG_ROUND_RANDOMNESS, round_index)
    R = rng.standard_normal(keys.total_r) * source.scale
    rr = RoundRandomness(round_index=round_index, R=R)
    source.log.record(rr.digest(), round_index)
    return rr


# Key-set blob: magic, version, block count, then per block the layout ints
# and the raw little-endian float64 payloads of M, G, N.  Round-trips must be
# bit-exact, so floats are written via tobytes, never reformatted.

KEYSET_MAGIC = b"SIKY"
KEYSET_VERSION = 1


def keyset_to_bytes(keys: KeySet) -> bytes:
    out = [KEYSET_MAGIC, struct.pack("<B", KEYSET_VERSION), struct.pack("<I", len(keys.blocks))]
    for key, (offset, n_j) in zip(keys.blocks, keys.block_layout):
        out.append(struct.pack("<III", offset, n_j, key.m))
        for mat in (key.M, key.G, key.N):
            out.append(np.ascontiguousarray(mat, dtype="<f8").tobytes())
    return b"".join(out)


def keyset_from_bytes(data: bytes) -> KeySet:
    if len(data) < 9:
        raise KeyValidationError("key blob truncated before header")
    if data[:4] != KEYSET_MAGIC:
        raise KeyValidationError(f"bad key blob magic {data[:4]!r}")
    version = data[4]
    if version != KEYSET_VERSION:
        raise KeyValidationError(f"unsupported key blob version {version}")
    (count,) = struct.unpack_from("<I", data, 5)
    pos = 9
    blocks = []
    layout = []
    for _ in range(count):
        if pos + 12 > len(data):
            raise KeyValidationError("key blob truncated in block header")
        offset, n_j, m_j = struct.unpack_from("<III", data, pos)
        pos += 12
        r_j = m_j - n_j
        mats = []
        for rows, cols in ((n_j, m_j), (m_j, n_j), (m_j, r_j)):
            nbytes = rows * cols * 8
            if pos + nbytes > len(data):
                raise KeyValidationError("key blob truncated in matrix payload")
            flat = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos)
            # Copy out of the blob so the matrix is aligned; see key_from_matrix.
            mats.append(flat.reshape(rows, cols).copy())
            pos += nbytes
        M, G, N = mats
        blocks.append(ImmersionKey(n=n_j, m=m_j, M=M, G=G, N=N))
        layout.append((offset, n_j))
    if pos != len(data):
        raise KeyValidationError(f"key blob has {len(data) - pos} trailing bytes")
    return KeySet(blocks=tuple(blocks), block_layout=tuple(layout))


def save_keyset(keys: KeySet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(keyset_to_bytes(keys))


def load_keyset(path) -> KeySet:
    with open(path, "rb") as fh:
        return keyset_from_bytes(fh.read())
