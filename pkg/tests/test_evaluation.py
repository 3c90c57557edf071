"""Evaluation tests: metric oracles, exclusion rules, harness outputs."""

import json
import math
import warnings

import httpx
import numpy as np
import pytest

from xraycot.backend import BackendConfig, TransportError
from xraycot.dataset import CONCEPT_ORDER
from xraycot.evaluation import (
    DISEASE_CLASSES,
    ROW_LVLM,
    ROW_MLC,
    ConfusionCounts,
    EvaluationWarning,
    MetricsReport,
    ablation_sweep,
    bacc_multiclass,
    compute_metrics,
    concept_metrics,
    concept_quadruples,
    confusion_from_labels,
    evaluate_run,
    f1_macro_multiclass,
    format_table,
    recognizer_comparison,
    samples_digest,
)
from xraycot.pipeline import DiagnosisPipeline, OracleRecognizer
from xraycot.prng import SplitMix64


# --------------------------------------------------------------------------
# independent brute-force oracles, written against the documented formulas
# --------------------------------------------------------------------------


def bacc_oracle(gold, predicted, classes):
    recalls = []
    for c in classes:
        idx = [i for i, g in enumerate(gold) if g == c]
        if not idx:
            continue
        recalls.append(sum(1 for i in idx if predicted[i] == c) / len(idx))
    return sum(recalls) / len(recalls)


def f1_oracle(gold, predicted, classes):
    scores = []
    for c in classes:
        tp = sum(1 for g, p in zip(gold, predicted) if g == c and p == c)
        fp = sum(1 for g, p in zip(gold, predicted) if g != c and p == c)
        fn = sum(1 for g, p in zip(gold, predicted) if g == c and p != c)
        if tp + fp + fn == 0:
            continue  # zero gold and zero predicted: excluded
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        scores.append(0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec))
    return sum(scores) / len(scores)


def concept_oracle(quads):
    baccs, f1s = [], []
    for tp, fp, tn, fn in quads:
        if tp + fn > 0 and tn + fp > 0:
            baccs.append(((tp / (tp + fn)) + (tn / (tn + fp))) / 2.0)
        if tp + fn > 0 or tp + fp > 0:
            prec = tp / (tp + fp) if tp + fp else 0.0
            rec = tp / (tp + fn) if tp + fn else 0.0
            f1s.append(0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec))
    bacc = sum(baccs) / len(baccs) if baccs else float("nan")
    f1 = sum(f1s) / len(f1s) if f1s else float("nan")
    return bacc, f1


def random_labels(rng, n_classes, n_samples):
    classes = [f"c{i}" for i in range(n_classes)]
    gold = [classes[rng.next_below(n_classes)] for _ in range(n_samples)]
    # predictions sometimes fall outside the gold classes entirely
    pool = classes + ["invalid"]
    predicted = [pool[rng.next_below(len(pool))] for _ in range(n_samples)]
    return classes, gold, predicted


def test_metrics_match_bruteforce_oracle_on_random_instances():
    rng = SplitMix64(515)
    checked = 0
    for _ in range(300):
        n_classes = 2 + rng.next_below(5)
        n_samples = 1 + rng.next_below(40)
        classes, gold, predicted = random_labels(rng, n_classes, n_samples)
        counts = confusion_from_labels(gold, predicted, class_names=classes)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EvaluationWarning)
            got_bacc = bacc_multiclass(counts)
            got_f1 = f1_macro_multiclass(counts)
        assert abs(got_bacc - bacc_oracle(gold, predicted, classes)) < 1e-12
        assert abs(got_f1 - f1_oracle(gold, predicted, classes)) < 1e-12
        checked += 1
    assert checked == 300


def test_concept_metrics_match_bruteforce_oracle():
    rng = SplitMix64(616)
    for _ in range(300):
        k = 1 + rng.next_below(8)
        quads = [
            tuple(rng.next_below(6) for _ in range(4))
            for _ in range(k)
        ]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EvaluationWarning)
            got = concept_metrics(quads)
        want = concept_oracle(quads)
        for g, w in zip(got, want):
            if math.isnan(w):
                assert math.isnan(g)
            else:
                assert abs(g - w) < 1e-12


def test_bacc_hand_cases():
    three = ConfusionCounts(
        multiclass=np.array([[2, 0, 0], [1, 1, 0], [0, 0, 2]]),
        class_names=("a", "b", "c"),
        predicted_names=("a", "b", "c"),
    )
    assert f"{bacc_multiclass(three):.6f}" == "0.833333"
    binary = ConfusionCounts(
        multiclass=np.array([[2, 1], [1, 3]]),
        class_names=("a", "b"),
        predicted_names=("a", "b"),
    )
    assert f"{bacc_multiclass(binary):.6f}" == "0.708333"
    perfect = ConfusionCounts(
        multiclass=np.diag([3, 2, 5]),
        class_names=("a", "b", "c"),
        predicted_names=("a", "b", "c"),
    )
    assert bacc_multiclass(perfect) == 1.0


def test_f1_hand_cases():
    binary = ConfusionCounts(
        multiclass=np.array([[2, 1], [1, 3]]),
        class_names=("a", "b"),
        predicted_names=("a", "b"),
    )
    assert f"{f1_macro_multiclass(binary):.6f}" == "0.708333"
    perfect = ConfusionCounts(
        multiclass=np.diag([4, 4]),
        class_names=("a", "b"),
        predicted_names=("a", "b"),
    )
    assert f1_macro_multiclass(perfect) == 1.0
    # class present in gold but never predicted contributes zero
    lopsided = ConfusionCounts(
        multiclass=np.array([[3, 0], [2, 0]]),
        class_names=("a", "b"),
        predicted_names=("a", "b"),
    )
    a_f1 = 2 * (3 / 5) * 1.0 / (3 / 5 + 1.0)
    assert f1_macro_multiclass(lopsided) == pytest.approx((a_f1 + 0.0) / 2)


def test_concept_hand_case():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EvaluationWarning)
        bacc, f1 = concept_metrics([(2, 1, 3, 1)])
    assert f"{bacc:.6f}" == "0.708333"
    assert f"{f1:.6f}" == "0.666667"
    bacc, f1 = concept_metrics([(3, 0, 4, 0), (2, 0, 5, 0)])
    assert bacc == 1.0 and f1 == 1.0


def test_zero_gold_class_excluded_with_warning():
    counts = ConfusionCounts(
        multiclass=np.array([[2, 0, 0], [0, 3, 0], [0, 0, 0]]),
        class_names=("a", "b", "empty"),
        predicted_names=("a", "b", "empty"),
    )
    with pytest.warns(EvaluationWarning, match="empty"):
        assert bacc_multiclass(counts) == 1.0


def test_bacc_errors_when_no_gold_at_all():
    counts = ConfusionCounts(
        multiclass=np.zeros((2, 2), dtype=int),
        class_names=("a", "b"),
        predicted_names=("a", "b"),
    )
    with pytest.raises(ValueError, match="gold"):
        bacc_multiclass(counts)
    with pytest.raises(ValueError, match="gold"):
        f1_macro_multiclass(counts)


def test_concept_exclusions_and_nan():
    with pytest.warns(EvaluationWarning, match="excluded"):
        bacc, f1 = concept_metrics([(0, 0, 5, 0), (2, 0, 2, 0)], ("no_pos", "fine"))
    assert bacc == 1.0  # only the second concept enters BACC
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EvaluationWarning)
        bacc, f1 = concept_metrics([(0, 0, 5, 0)])
    assert math.isnan(bacc)
    assert math.isnan(f1)


def test_confusion_from_labels_counts_and_sinks():
    gold = ["a", "a", "b", "b", "b"]
    predicted = ["a", "invalid", "b", "a", "b"]
    counts = confusion_from_labels(gold, predicted, class_names=("a", "b"))
    assert counts.predicted_names == ("a", "b", "invalid")
    assert counts.multiclass.tolist() == [[1, 0, 1], [1, 2, 0]]
    assert counts.n_samples == 5
    with pytest.raises(ValueError, match="equal length"):
        confusion_from_labels(["a"], [])


def test_confusion_order_invariance():
    rng = SplitMix64(17)
    classes, gold, predicted = random_labels(rng, 4, 30)
    counts = confusion_from_labels(gold, predicted, class_names=classes)
    order = list(range(30))
    rng2 = np.random.default_rng(0)
    rng2.shuffle(order)
    shuffled = confusion_from_labels(
        [gold[i] for i in order], [predicted[i] for i in order], class_names=classes
    )
    assert np.array_equal(counts.multiclass, shuffled.multiclass)


def test_confusion_counts_validation():
    with pytest.raises(ValueError, match="shape"):
        ConfusionCounts(
            multiclass=np.zeros((2, 2)), class_names=("a",), predicted_names=("a",)
        )
    with pytest.raises(ValueError, match="non-negative"):
        ConfusionCounts(
            multiclass=np.array([[1, -1], [0, 0]]),
            class_names=("a", "b"),
            predicted_names=("a", "b"),
        )
    with pytest.raises(ValueError, match="start with"):
        ConfusionCounts(
            multiclass=np.zeros((2, 2), dtype=int),
            class_names=("a", "b"),
            predicted_names=("b", "a"),
        )


def test_concept_quadruples_against_loops():
    rng = SplitMix64(27)
    g = rng.uniform_array((20, 5)) < 0.5
    p = rng.uniform_array((20, 5)) < 0.5
    quads = concept_quadruples(g, p)
    for k in range(5):
        tp = sum(1 for i in range(20) if g[i, k] and p[i, k])
        fp = sum(1 for i in range(20) if not g[i, k] and p[i, k])
        tn = sum(1 for i in range(20) if not g[i, k] and not p[i, k])
        fn = sum(1 for i in range(20) if g[i, k] and not p[i, k])
        assert quads[k] == (tp, fp, tn, fn)
    with pytest.raises(ValueError, match="shape"):
        concept_quadruples(g, p[:, :4])


def test_metrics_report_bounds_and_json():
    counts = confusion_from_labels(["a", "b"], ["a", "b"], class_names=("a", "b"))
    report = compute_metrics(counts, fingerprint="abc123", samples_digest="d1")
    assert report.diagnosis_bacc == 1.0
    assert report.fingerprint == "abc123"
    doc = report.to_json_dict()
    assert doc["diagnosis_confusion"]["matrix"] == [[1, 0], [0, 1]]
    assert doc["n_samples"] == 2
    # nan concept metrics serialize as null
    assert doc["concept_bacc"] is None
    with pytest.raises(ValueError):
        MetricsReport(
            diagnosis_bacc=1.5,
            diagnosis_f1_macro=1.0,
            concept_bacc=float("nan"),
            concept_f1_macro=float("nan"),
            per_class={},
            per_concept={},
            n_samples=2,
            fingerprint="x",
        )


def test_format_table_layout():
    counts = confusion_from_labels(["a", "b"], ["a", "b"], class_names=("a", "b"))
    report = compute_metrics(counts, fingerprint="abc", samples_digest="d")
    text = format_table([("full", report), ("w/o CoT", report)])
    lines = text.strip().split("\n")
    assert len(lines) == 4  # header, rule, two rows
    assert lines[0].split() == ["variant", "n", "diag_bacc", "diag_f1",
                                "concept_bacc", "concept_f1"]
    assert set(lines[1]) <= {"-", " "}
    assert lines[2].startswith("full")
    assert "n/a" in lines[2]  # no concept quadruples in this report
    assert "1.000000" in lines[2]


def test_samples_digest_tracks_ids(tiny_dataset):
    _, splits = tiny_dataset
    test = splits["test"]
    assert samples_digest(test) == samples_digest(list(test))
    assert samples_digest(test) != samples_digest(test[::-1])
    assert len(samples_digest(test)) == 12


# --------------------------------------------------------------------------
# harness over the real pipeline
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def oracle_pipeline(region_encoder):
    return DiagnosisPipeline(
        encoder=region_encoder,
        recognizer=OracleRecognizer(),
        backend=BackendConfig(kind="mock"),
    )


def test_evaluate_run_oracle_identity(tiny_dataset, oracle_pipeline, tmp_path):
    _, splits = tiny_dataset
    test = splits["test"]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EvaluationWarning)
        report = evaluate_run(test, oracle_pipeline, out_dir=tmp_path)
    assert report.diagnosis_bacc == 1.0
    assert report.diagnosis_f1_macro == 1.0
    assert report.concept_bacc == 1.0
    assert report.n_samples == len(test)
    assert report.fingerprint == oracle_pipeline.fingerprint
    assert report.samples_digest == samples_digest(test)

    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["diagnosis_bacc"] == 1.0
    table = (tmp_path / "table.txt").read_text()
    assert "diag_bacc" in table
    lines = (tmp_path / "per_sample.jsonl").read_text().strip().split("\n")
    assert len(lines) == len(test)
    first = json.loads(lines[0])
    assert first["sample_id"] == test[0].sample_id
    assert first["parse_ok"] is True
    assert first["predicted_class"] == first["gold_disease"]
    assert first["issues"] == []
    assert first["report_json"]["primary_diagnosis"] == first["gold_disease"]

    with pytest.raises(ValueError, match="no samples"):
        evaluate_run([], oracle_pipeline)


def test_evaluate_run_includes_invalid_sink(tiny_dataset, oracle_pipeline):
    _, splits = tiny_dataset
    test = splits["test"][:5]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EvaluationWarning)
        report = evaluate_run(test, oracle_pipeline)
    assert report.counts.predicted_names == DISEASE_CLASSES + ("invalid",)
    assert report.counts.concept_names == tuple(c.value for c in CONCEPT_ORDER)


class AlwaysDown(httpx.BaseTransport):
    def handle_request(self, request):
        return httpx.Response(503, json={})


def test_transport_failure_writes_partial_results(tiny_dataset, region_encoder, tmp_path):
    _, splits = tiny_dataset
    test = splits["test"][:4]
    pipeline = DiagnosisPipeline(
        encoder=region_encoder,
        recognizer=OracleRecognizer(),
        backend=BackendConfig(
            kind="remote", base_url="https://down.test", model="m", max_attempts=2
        ),
        transport=AlwaysDown(),
    )
    with pytest.raises(TransportError):
        evaluate_run(test, pipeline, out_dir=tmp_path)
    partial = tmp_path / "partial_results.jsonl"
    assert partial.exists()
    assert partial.read_text() == ""  # first sample already failed


def test_ablation_sweep_rows(tiny_dataset, oracle_pipeline, tmp_path):
    _, splits = tiny_dataset
    subset = splits["test"][:10]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EvaluationWarning)
        rows = ablation_sweep(subset, oracle_pipeline, out_dir=tmp_path)
    assert [name for name, _ in rows] == [
        "full", "w/o CoT", "w/o C_vis", "w/o F_img", "w/o P_med"
    ]
    doc = json.loads((tmp_path / "sweep.json").read_text())
    assert [entry["name"] for entry in doc] == [name for name, _ in rows]
    table = (tmp_path / "table.txt").read_text()
    assert len(table.strip().split("\n")) == 2 + len(rows)
    # every variant sees the identical sample set
    digests = {r.samples_digest for _, r in rows}
    assert len(digests) == 1


def test_recognizer_comparison_rows(tiny_dataset, oracle_pipeline, tmp_path):
    _, splits = tiny_dataset
    subset = splits["test"][:10]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EvaluationWarning)
        rows = recognizer_comparison(
            subset,
            oracle_pipeline,
            lvlm_recognizer=OracleRecognizer(),
            mlc_recognizer=OracleRecognizer(),
            out_dir=tmp_path,
        )
    assert [name for name, _ in rows] == [ROW_LVLM, ROW_MLC]
    assert (tmp_path / "comparison.json").exists()
    digests = {r.samples_digest for _, r in rows}
    assert len(digests) == 1
