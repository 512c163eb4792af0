"""Equivalence checking between plain and encrypted runs, and CSV metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .keys import EncryptedParamVector, KeySet, decrypt
from .protocol import RoundRecord

__all__ = ["EquivalenceReport", "rel_param_error", "check_equivalence", "write_metrics",
           "CSV_HEADER"]

CSV_HEADER = "round,mode,train_loss,test_accuracy,t_encrypt_ms,t_decrypt_ms,t_train_ms,equivalence_rel_err"


def rel_param_error(reference: np.ndarray, candidate: np.ndarray) -> float:
    """``||reference - candidate||_2 / (1 + ||reference||_2)``."""
    return float(
        np.linalg.norm(reference - candidate) / (1.0 + np.linalg.norm(reference))
    )


@dataclass
class EquivalenceReport:
    """Per-round deviation of the decrypted trajectory from the plain one."""

    per_round: list[float]
    threshold: float

    @property
    def max_error(self) -> float:
        return max(self.per_round)

    @property
    def worst_round(self) -> int:
        return int(np.argmax(self.per_round))

    @property
    def passed(self) -> bool:
        return self.max_error <= self.threshold

    def summary(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return (
            f"equivalence {verdict}: max relative error {self.max_error:.3e} "
            f"at round {self.worst_round} (threshold {self.threshold:.1e})"
        )


def check_equivalence(
    plain_trace: list[np.ndarray],
    encrypted_trace: list[EncryptedParamVector],
    keys: KeySet,
    threshold: float = 1e-6,
) -> EquivalenceReport:
    """Decrypt each round's aggregated model and compare to the plain trace."""
    if len(plain_trace) != len(encrypted_trace):
        raise ValueError(
            f"trace lengths differ: {len(plain_trace)} plain vs {len(encrypted_trace)} encrypted"
        )
    if not plain_trace:
        raise ValueError("empty traces")
    errors = [
        rel_param_error(w_plain, decrypt(keys, enc))
        for w_plain, enc in zip(plain_trace, encrypted_trace)
    ]
    return EquivalenceReport(per_round=errors, threshold=threshold)


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.17g}"


def format_metrics(records: list[RoundRecord]) -> str:
    lines = [CSV_HEADER]
    for rec in records:
        lines.append(
            ",".join(
                [
                    str(rec.round_index),
                    rec.mode,
                    _fmt(rec.train_loss),
                    _fmt(rec.test_accuracy),
                    _fmt(rec.t_encrypt_ms),
                    _fmt(rec.t_decrypt_ms),
                    _fmt(rec.t_train_ms),
                    _fmt(rec.equivalence_rel_err),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def write_metrics(records: list[RoundRecord], report: EquivalenceReport | None, path) -> None:
    """Write one CSV row per round per mode; reals carry 17 significant digits.

    If a report is given, its per-round errors fill any encrypted-mode rows
    that do not already carry one.
    """
    if not records:
        raise ValueError("no records to write")
    if report is not None:
        for rec in records:
            if rec.mode == "sifl" and rec.equivalence_rel_err is None:
                if rec.round_index < len(report.per_round):
                    rec.equivalence_rel_err = report.per_round[rec.round_index]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_metrics(records))
