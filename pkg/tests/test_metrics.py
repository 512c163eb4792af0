"""Equivalence report math and CSV emission."""

import numpy as np
import pytest

from sifl.keys import RoundRandomness, encrypt, generate_keyset
from sifl.metrics import check_equivalence, format_metrics, rel_param_error, write_metrics
from sifl.protocol import RoundRecord


def make_traces(rounds=4, n=6, seed=0):
    ks = generate_keyset([n], 1, seed=seed)
    rng = np.random.default_rng(seed)
    plain = [rng.normal(size=n) for _ in range(rounds)]
    enc = [
        encrypt(ks, w, RoundRandomness(t, rng.normal(size=ks.total_r)))
        for t, w in enumerate(plain)
    ]
    return ks, plain, enc


def test_identical_traces_pass_with_tiny_errors():
    ks, plain, enc = make_traces()
    report = check_equivalence(plain, enc, ks, threshold=1e-6)
    assert report.passed
    assert report.max_error <= 1e-12


def test_perturbed_round_fails_and_is_named():
    ks, plain, enc = make_traces()
    plain[2] = plain[2] + 1e-3
    report = check_equivalence(plain, enc, ks, threshold=1e-6)
    assert not report.passed
    assert report.worst_round == 2
    assert "round 2" in report.summary()


def test_trace_length_mismatch_is_an_error():
    ks, plain, enc = make_traces()
    with pytest.raises(ValueError, match="lengths differ"):
        check_equivalence(plain[:-1], enc, ks)


def test_rel_param_error_definition():
    a = np.array([3.0, 4.0])  # norm 5
    b = np.array([3.0, 4.0 + 0.6])
    assert rel_param_error(a, b) == pytest.approx(0.6 / 6.0)


def records_for(rounds, modes, with_eq=False):
    out = []
    for t in range(rounds):
        for mode in modes:
            out.append(
                RoundRecord(
                    round_index=t,
                    mode=mode,
                    train_loss=1.0 / (t + 1),
                    test_accuracy=0.5,
                    t_train_ms=1.5,
                    equivalence_rel_err=(1e-9 if with_eq and mode == "sifl" else None),
                )
            )
    return out


def test_single_record_writes_two_lines(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics(records_for(1, ["plain"]), None, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 2
    assert lines[0].startswith("round,mode,train_loss,test_accuracy,")


def test_dual_thirty_rounds_writes_61_lines(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics(records_for(30, ["plain", "sifl"], with_eq=True), None, path)
    assert len(path.read_text().splitlines()) == 61


def test_reals_carry_17_significant_digits():
    rec = RoundRecord(0, "plain", train_loss=1 / 3, test_accuracy=2 / 3)
    line = format_metrics([rec]).splitlines()[1]
    assert "0.33333333333333331" in line
    assert "0.66666666666666663" in line


def test_empty_equivalence_column_for_plain_rows():
    text = format_metrics(records_for(2, ["plain", "sifl"], with_eq=True))
    rows = text.splitlines()[1:]
    assert rows[0].endswith(",")  # plain row: absent equivalence
    assert rows[1].endswith("1.0000000000000001e-09")


def test_rerun_identical_except_timing_columns(tmp_path):
    def emit(noise):
        recs = records_for(3, ["plain", "sifl"], with_eq=True)
        for r in recs:
            r.t_train_ms = 1.0 + noise
        return format_metrics(recs)

    a, b = emit(0.0), emit(0.37)
    strip = lambda text: [
        ",".join(col for i, col in enumerate(line.split(",")) if i not in (4, 5, 6))
        for line in text.splitlines()
    ]
    assert a != b
    assert strip(a) == strip(b)


def test_write_metrics_fills_from_report(tmp_path):
    from sifl.metrics import EquivalenceReport

    recs = records_for(2, ["plain", "sifl"])
    report = EquivalenceReport(per_round=[1e-10, 2e-10], threshold=1e-6)
    path = tmp_path / "m.csv"
    write_metrics(recs, report, path)
    rows = path.read_text().splitlines()[1:]
    assert rows[1].endswith(",1e-10")
    assert rows[3].endswith(",2.0000000000000001e-10")


def test_write_metrics_requires_records(tmp_path):
    with pytest.raises(ValueError, match="no records"):
        write_metrics([], None, tmp_path / "m.csv")
