"""Metrics (balanced accuracy, macro F1) and the evaluation harness.

Design rules, applied consistently:
- diagnosis classes with zero gold instances are excluded from BACC, with a
  warning;
- macro F1 excludes classes with zero gold and zero predicted instances, and
  a class with precision + recall = 0 contributes F1 = 0;
- unparseable or unrecognized diagnoses land in a dedicated "invalid"
  predicted column so no sample is ever dropped;
- per-concept BACC needs at least one gold positive and one gold negative,
  otherwise the concept is excluded with a warning.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .backend import TransportError
from .cot import AblationConfig, ablation_presets
from .dataset import CONCEPT_ORDER, DiseaseLabel, Sample
from .pipeline import INVALID_CLASS, DiagnosisPipeline, PipelineResult
from .report import serialize

ROW_LVLM = "LVLM-Concepts"
ROW_MLC = "MLC-Concepts"

DISEASE_CLASSES = tuple(d.value for d in DiseaseLabel)


class EvaluationWarning(UserWarning):
    """A metric definition forced an exclusion (e.g. zero-gold class)."""


@dataclass(frozen=True)
class ConfusionCounts:
    """Diagnosis confusion plus per-concept detection quadruples.

    multiclass rows are gold classes; columns are the same classes followed
    by any extra predicted-only sinks (such as "invalid"), so the diagonal
    stays aligned with the gold rows.
    """

    multiclass: np.ndarray
    class_names: tuple[str, ...]
    predicted_names: tuple[str, ...]
    per_concept: tuple[tuple[int, int, int, int], ...] = ()
    concept_names: tuple[str, ...] = ()

    def __post_init__(self):
        m = np.asarray(self.multiclass)
        if m.shape != (len(self.class_names), len(self.predicted_names)):
            raise ValueError("confusion shape does not match the label lists")
        if m.min(initial=0) < 0:
            raise ValueError("confusion counts must be non-negative")
        if self.predicted_names[: len(self.class_names)] != self.class_names:
            raise ValueError("predicted columns must start with the gold classes")
        if self.concept_names and len(self.concept_names) != len(self.per_concept):
            raise ValueError("one quadruple per concept name")
        for quad in self.per_concept:
            if len(quad) != 4 or any(c < 0 for c in quad):
                raise ValueError(f"bad concept quadruple {quad!r}")

    @property
    def n_samples(self) -> int:
        return int(np.asarray(self.multiclass).sum())


def confusion_from_labels(
    gold: Sequence[str],
    predicted: Sequence[str],
    class_names: Sequence[str] | None = None,
    per_concept: Sequence[tuple[int, int, int, int]] = (),
    concept_names: Sequence[str] = (),
) -> ConfusionCounts:
    """Count (gold, predicted) pairs; predicted-only labels get sink columns."""
    if len(gold) != len(predicted):
        raise ValueError("gold and predicted must have equal length")
    if class_names is None:
        class_names = sorted(set(gold))
    class_names = tuple(class_names)
    extra = sorted(set(predicted) - set(class_names))
    predicted_names = class_names + tuple(extra)
    row = {c: i for i, c in enumerate(class_names)}
    col = {c: i for i, c in enumerate(predicted_names)}
    m = np.zeros((len(class_names), len(predicted_names)), dtype=np.int64)
    for g, p in zip(gold, predicted):
        m[row[g], col[p]] += 1
    return ConfusionCounts(
        multiclass=m,
        class_names=class_names,
        predicted_names=predicted_names,
        per_concept=tuple(tuple(int(v) for v in q) for q in per_concept),
        concept_names=tuple(concept_names),
    )


def concept_quadruples(
    gold_mask: np.ndarray, predicted_mask: np.ndarray
) -> tuple[tuple[int, int, int, int], ...]:
    """(tp, fp, tn, fn) per column of two (N, K) boolean masks."""
    g = np.asarray(gold_mask, dtype=bool)
    p = np.asarray(predicted_mask, dtype=bool)
    if g.shape != p.shape or g.ndim != 2:
        raise ValueError("masks must share an (N, K) shape")
    tp = (g & p).sum(axis=0)
    fp = (~g & p).sum(axis=0)
    tn = (~g & ~p).sum(axis=0)
    fn = (g & ~p).sum(axis=0)
    return tuple(
        (int(tp[k]), int(fp[k]), int(tn[k]), int(fn[k])) for k in range(g.shape[1])
    )


def bacc_multiclass(counts: ConfusionCounts) -> float:
    """Mean per-class recall over classes that have gold instances."""
    m = np.asarray(counts.multiclass, dtype=np.float64)
    rows = m.sum(axis=1)
    included = rows > 0
    if not included.any():
        raise ValueError("no class has any gold instance")
    excluded = [c for c, keep in zip(counts.class_names, included) if not keep]
    if excluded:
        warnings.warn(
            f"classes with zero gold instances excluded from BACC: {excluded}",
            EvaluationWarning,
            stacklevel=2,
        )
    diag = np.array([m[i, i] for i in range(len(counts.class_names))])
    return float((diag[included] / rows[included]).mean())


def _f1(tp: float, fp: float, fn: float) -> float:
    p = tp / (tp + fp) if tp + fp > 0 else 0.0
    r = tp / (tp + fn) if tp + fn > 0 else 0.0
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def f1_macro_multiclass(counts: ConfusionCounts) -> float:
    """One-vs-rest F1 averaged over classes with any gold or predictions."""
    m = np.asarray(counts.multiclass, dtype=np.float64)
    rows = m.sum(axis=1)
    cols = m.sum(axis=0)
    scores = []
    for i in range(len(counts.class_names)):
        if rows[i] == 0 and cols[i] == 0:
            continue
        tp = m[i, i]
        scores.append(_f1(tp, cols[i] - tp, rows[i] - tp))
    if not scores:
        raise ValueError("no class has any gold or predicted instance")
    return float(np.mean(scores))


def concept_metrics(
    per_concept: Sequence[tuple[int, int, int, int]],
    concept_names: Sequence[str] = (),
) -> tuple[float, float]:
    """Macro (balanced accuracy, F1) over concept detection quadruples."""
    names = list(concept_names) or [f"concept_{k}" for k in range(len(per_concept))]
    baccs, f1s, excluded = [], [], []
    for name, (tp, fp, tn, fn) in zip(names, per_concept):
        if tp + fn > 0 and tn + fp > 0:
            baccs.append((tp / (tp + fn) + tn / (tn + fp)) / 2)
        else:
            excluded.append(name)
        if tp + fn > 0 or tp + fp > 0:
            f1s.append(_f1(tp, fp, fn))
    if excluded:
        warnings.warn(
            f"concepts without both gold positives and negatives excluded from "
            f"BACC: {excluded}",
            EvaluationWarning,
            stacklevel=2,
        )
    bacc = float(np.mean(baccs)) if baccs else float("nan")
    f1 = float(np.mean(f1s)) if f1s else float("nan")
    return bacc, f1


@dataclass(frozen=True)
class MetricsReport:
    diagnosis_bacc: float
    diagnosis_f1_macro: float
    concept_bacc: float
    concept_f1_macro: float
    per_class: dict
    per_concept: dict
    n_samples: int
    fingerprint: str
    samples_digest: str = ""
    counts: ConfusionCounts | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        for v in (self.diagnosis_bacc, self.diagnosis_f1_macro):
            if not 0.0 <= v <= 1.0:
                raise ValueError("diagnosis metrics must lie in [0, 1]")
        for v in (self.concept_bacc, self.concept_f1_macro):
            if not (math.isnan(v) or 0.0 <= v <= 1.0):
                raise ValueError("concept metrics must lie in [0, 1]")

    def to_json_dict(self) -> dict:
        doc = {
            "diagnosis_bacc": self.diagnosis_bacc,
            "diagnosis_f1_macro": self.diagnosis_f1_macro,
            "concept_bacc": None if math.isnan(self.concept_bacc) else self.concept_bacc,
            "concept_f1_macro": (
                None if math.isnan(self.concept_f1_macro) else self.concept_f1_macro
            ),
            "per_class": self.per_class,
            "per_concept": self.per_concept,
            "n_samples": self.n_samples,
            "fingerprint": self.fingerprint,
            "samples_digest": self.samples_digest,
        }
        if self.counts is not None:
            doc["diagnosis_confusion"] = {
                "gold_classes": list(self.counts.class_names),
                "predicted_classes": list(self.counts.predicted_names),
                "matrix": np.asarray(self.counts.multiclass).tolist(),
            }
        return doc


def compute_metrics(
    counts: ConfusionCounts, fingerprint: str = "", samples_digest: str = ""
) -> MetricsReport:
    m = np.asarray(counts.multiclass, dtype=np.float64)
    rows = m.sum(axis=1)
    cols = m.sum(axis=0)
    per_class = {}
    for i, name in enumerate(counts.class_names):
        tp = m[i, i]
        per_class[name] = {
            "support": int(rows[i]),
            "predicted": int(cols[i]),
            "recall": float(tp / rows[i]) if rows[i] > 0 else None,
            "precision": float(tp / cols[i]) if cols[i] > 0 else None,
            "f1": _f1(tp, cols[i] - tp, rows[i] - tp),
        }
    per_concept = {}
    for name, (tp, fp, tn, fn) in zip(counts.concept_names, counts.per_concept):
        per_concept[name] = {
            "tp": tp,
            "fp": fp,
            "tn": tn,
            "fn": fn,
            "bacc": (
                (tp / (tp + fn) + tn / (tn + fp)) / 2
                if tp + fn > 0 and tn + fp > 0
                else None
            ),
            "f1": _f1(tp, fp, fn) if tp + fn > 0 or tp + fp > 0 else None,
        }
    if counts.per_concept:
        concept_bacc, concept_f1 = concept_metrics(
            counts.per_concept, counts.concept_names
        )
    else:
        concept_bacc, concept_f1 = float("nan"), float("nan")
    return MetricsReport(
        diagnosis_bacc=bacc_multiclass(counts),
        diagnosis_f1_macro=f1_macro_multiclass(counts),
        concept_bacc=concept_bacc,
        concept_f1_macro=concept_f1,
        per_class=per_class,
        per_concept=per_concept,
        n_samples=counts.n_samples,
        fingerprint=fingerprint,
        samples_digest=samples_digest,
        counts=counts,
    )


def samples_digest(samples: Sequence[Sample]) -> str:
    joined = ",".join(s.sample_id for s in samples)
    return hashlib.sha256(joined.encode("utf-8")).hexdigest()[:12]


def _result_line(sample: Sample, result: PipelineResult) -> str:
    doc = {
        "sample_id": sample.sample_id,
        "gold_disease": sample.gold_disease.value,
        "gold_concepts": [c.value for c in CONCEPT_ORDER if c in sample.gold_concepts],
        "predicted_class": result.predicted_class,
        "predicted_concepts": [f.concept.value for f in result.findings],
        "parse_ok": result.parsed,
        "issues": [
            {"code": i.code.value, "detail": i.detail, "location": i.location}
            for i in result.issues
        ],
        "report_text": result.completion.text,
    }
    if result.parsed:
        doc["report_json"] = json.loads(serialize(result.report, result.trace, "json"))
    return json.dumps(doc, sort_keys=True)


def _run_all(
    samples: Sequence[Sample],
    pipeline: DiagnosisPipeline,
    max_workers: int,
    out_dir: Path | None,
) -> list[PipelineResult]:
    results: list[PipelineResult | None] = [None] * len(samples)
    try:
        if max_workers <= 1:
            for i, sample in enumerate(samples):
                results[i] = pipeline.run_sample(sample)
        else:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                futures = {
                    pool.submit(pipeline.run_sample, s): i for i, s in enumerate(samples)
                }
                for future in as_completed(futures):
                    results[futures[future]] = future.result()
    except TransportError:
        if out_dir is not None:
            _write_partial(out_dir, samples, results)
        raise
    return results  # type: ignore[return-value]


def _write_partial(out_dir: Path, samples, results) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        _result_line(s, r) for s, r in zip(samples, results) if r is not None
    ]
    (out_dir / "partial_results.jsonl").write_text(
        "".join(line + "\n" for line in lines)
    )


def evaluate_run(
    samples: Sequence[Sample],
    pipeline: DiagnosisPipeline,
    out_dir: Path | None = None,
    max_workers: int = 1,
    fingerprint: str | None = None,
) -> MetricsReport:
    """Run the pipeline over samples and score it.

    Concept confusion compares the recognizer's findings against gold
    concepts regardless of prompt ablation, so concept metrics always
    describe the recognizer. A TransportError aborts the run after writing
    partial_results.jsonl under out_dir.
    """
    if not samples:
        raise ValueError("no samples to evaluate")
    out_dir = Path(out_dir) if out_dir is not None else None
    results = _run_all(samples, pipeline, max_workers, out_dir)

    gold = [s.gold_disease.value for s in samples]
    predicted = [r.predicted_class for r in results]
    class_names = DISEASE_CLASSES
    extra = tuple(sorted(set(predicted) - set(class_names) - {INVALID_CLASS}))
    predicted_names = class_names + (INVALID_CLASS,) + extra
    row = {c: i for i, c in enumerate(class_names)}
    col = {c: i for i, c in enumerate(predicted_names)}
    m = np.zeros((len(class_names), len(predicted_names)), dtype=np.int64)
    for g, p in zip(gold, predicted):
        m[row[g], col[p]] += 1

    k = len(CONCEPT_ORDER)
    gold_mask = np.zeros((len(samples), k), dtype=bool)
    pred_mask = np.zeros((len(samples), k), dtype=bool)
    index = {c: j for j, c in enumerate(CONCEPT_ORDER)}
    for i, (s, r) in enumerate(zip(samples, results)):
        for c in s.gold_concepts:
            gold_mask[i, index[c]] = True
        for f in r.findings:
            pred_mask[i, index[f.concept]] = True

    counts = ConfusionCounts(
        multiclass=m,
        class_names=class_names,
        predicted_names=predicted_names,
        per_concept=concept_quadruples(gold_mask, pred_mask),
        concept_names=tuple(c.value for c in CONCEPT_ORDER),
    )
    report = compute_metrics(
        counts,
        fingerprint=fingerprint if fingerprint is not None else pipeline.fingerprint,
        samples_digest=samples_digest(samples),
    )
    if out_dir is not None:
        write_run_outputs(report, samples, results, out_dir)
    return report


def ablation_sweep(
    samples: Sequence[Sample],
    pipeline: DiagnosisPipeline,
    out_dir: Path | None = None,
    max_workers: int = 1,
) -> list[tuple[str, MetricsReport]]:
    """Evaluate the five ablation presets with shared artifacts and seeds."""
    rows = []
    for name, ablation in ablation_presets():
        rows.append(
            (name, evaluate_run(samples, pipeline.with_ablation(ablation),
                                max_workers=max_workers))
        )
    if out_dir is not None:
        write_table_outputs(rows, Path(out_dir), "sweep.json")
    return rows


def recognizer_comparison(
    samples: Sequence[Sample],
    pipeline: DiagnosisPipeline,
    lvlm_recognizer,
    mlc_recognizer,
    out_dir: Path | None = None,
    max_workers: int = 1,
) -> list[tuple[str, MetricsReport]]:
    """Two-row comparison: zero-shot (LVLM-style) vs trained MLC concepts."""
    rows = [
        (
            ROW_LVLM,
            evaluate_run(samples, pipeline.with_recognizer(lvlm_recognizer),
                         max_workers=max_workers),
        ),
        (
            ROW_MLC,
            evaluate_run(samples, pipeline.with_recognizer(mlc_recognizer),
                         max_workers=max_workers),
        ),
    ]
    if out_dir is not None:
        write_table_outputs(rows, Path(out_dir), "comparison.json")
    return rows


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------


def format_table(rows: list[tuple[str, MetricsReport]]) -> str:
    """Aligned text table, one data row per variant."""
    headers = ["variant", "n", "diag_bacc", "diag_f1", "concept_bacc", "concept_f1"]

    def cell(v: float) -> str:
        return "n/a" if math.isnan(v) else f"{v:.6f}"

    data = [
        [
            name,
            str(r.n_samples),
            cell(r.diagnosis_bacc),
            cell(r.diagnosis_f1_macro),
            cell(r.concept_bacc),
            cell(r.concept_f1_macro),
        ]
        for name, r in rows
    ]
    widths = [
        max(len(headers[j]), *(len(row[j]) for row in data)) if data else len(headers[j])
        for j in range(len(headers))
    ]
    lines = [
        "  ".join(h.ljust(widths[j]) for j, h in enumerate(headers)).rstrip(),
        "  ".join("-" * widths[j] for j in range(len(headers))),
    ]
    for row in data:
        lines.append(
            "  ".join(
                row[j].ljust(widths[j]) if j == 0 else row[j].rjust(widths[j])
                for j in range(len(headers))
            ).rstrip()
        )
    return "\n".join(lines) + "\n"


def write_run_outputs(
    report: MetricsReport,
    samples: Sequence[Sample],
    results: Sequence[PipelineResult],
    out_dir: Path,
) -> None:
    """metrics.json, table.txt, and per_sample.jsonl under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(
        json.dumps(report.to_json_dict(), sort_keys=True, indent=1) + "\n"
    )
    (out_dir / "table.txt").write_text(format_table([("run", report)]))
    lines = [_result_line(s, r) for s, r in zip(samples, results)]
    (out_dir / "per_sample.jsonl").write_text("".join(line + "\n" for line in lines))


def write_table_outputs(
    rows: list[tuple[str, MetricsReport]], out_dir: Path, json_name: str
) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = [{"name": name, "metrics": r.to_json_dict()} for name, r in rows]
    (out_dir / json_name).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    (out_dir / "table.txt").write_text(format_table(rows))
