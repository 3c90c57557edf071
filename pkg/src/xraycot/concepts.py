"""Visual concept recognizers.

Two variants over the same embedding space: a trained multi-label sigmoid
head (full-batch gradient descent on binary cross-entropy plus L2) and a
zero-shot recognizer that compares embeddings against unit prototypes by
cosine similarity. Both emit findings in canonical vocabulary order with
rendered natural-language descriptions.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .dataset import CONCEPT_ORDER, ConceptId, Sample, plant_concepts
from .encoder import VisualEmbedding
from .prng import SplitMix64, derive_seed

_EPS = 1e-12
K = len(CONCEPT_ORDER)


class CalibrationWarning(UserWarning):
    """A concept had no calibration positives; fallback threshold used."""


def _load_default_vocabulary() -> dict[ConceptId, str]:
    text = resources.files("xraycot.data").joinpath("vocabulary.json").read_text()
    raw = json.loads(text)
    return {ConceptId(k): v for k, v in raw.items()}


@dataclass(frozen=True)
class Vocabulary:
    """Closed concept vocabulary with one description template per concept."""

    descriptions: dict[ConceptId, str]

    def __post_init__(self):
        missing = [c.value for c in CONCEPT_ORDER if c not in self.descriptions]
        if missing:
            raise ValueError(f"vocabulary missing concepts: {missing}")
        for c, d in self.descriptions.items():
            if not d:
                raise ValueError(f"empty description for {c.value}")
        if len(set(self.descriptions.values())) != len(self.descriptions):
            raise ValueError("descriptions must be unique (the mock inverts them)")

    def describe(self, concept: ConceptId) -> str:
        return self.descriptions[concept]

    def concept_for_description(self, description: str) -> ConceptId | None:
        for c, d in self.descriptions.items():
            if d == description:
                return c
        return None

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(_load_default_vocabulary())

    @classmethod
    def from_file(cls, path: Path) -> "Vocabulary":
        raw = json.loads(Path(path).read_text())
        return cls({ConceptId(k): v for k, v in raw.items()})


DEFAULT_VOCABULARY = Vocabulary.default()


def render_description(concept: ConceptId, vocabulary: Vocabulary = DEFAULT_VOCABULARY) -> str:
    return vocabulary.describe(concept)


@dataclass(frozen=True)
class ConceptFinding:
    concept: ConceptId
    score: float  # sigmoid probability for MLC, cosine for zero-shot
    description: str

    def __post_init__(self):
        if not self.description:
            raise ValueError("finding description must be non-empty")


def findings_from_scores(
    scores: np.ndarray,
    thresholds: np.ndarray,
    vocabulary: Vocabulary = DEFAULT_VOCABULARY,
) -> list[ConceptFinding]:
    """Detected findings in canonical order; score ties at threshold detect."""
    out = []
    for k, concept in enumerate(CONCEPT_ORDER):
        if scores[k] >= thresholds[k]:
            out.append(
                ConceptFinding(
                    concept=concept,
                    score=float(scores[k]),
                    description=vocabulary.describe(concept),
                )
            )
    return out


# ---------------------------------------------------------------------------
# multi-label classifier head
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlcHyper:
    lr: float = 0.1
    epochs: int = 500
    l2: float = 1e-4
    seed: int = 0


@dataclass(frozen=True)
class MlcHead:
    weights: np.ndarray  # (K, D_v)
    biases: np.ndarray  # (K,)
    trained_on: str  # encoder_tag
    feature_mean: np.ndarray  # (D_v,) standardization fitted on train
    feature_scale: np.ndarray  # (D_v,)
    threshold: float = 0.5

    def __post_init__(self):
        if self.weights.shape[0] != K or self.biases.shape != (K,):
            raise ValueError("head must have one row and bias per concept")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def standardize(self, values: np.ndarray) -> np.ndarray:
        return (values - self.feature_mean) / self.feature_scale


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss(probabilities: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy over concepts, probabilities clamped."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {y.shape}")
    p = np.clip(p, _EPS, 1.0 - _EPS)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def mlc_objective(
    w: np.ndarray, b: np.ndarray, x: np.ndarray, y: np.ndarray, l2: float
) -> float:
    """Mean BCE over samples and concepts plus L2 on the weights (not biases)."""
    probs = _sigmoid(x @ w.T + b)
    return float(bce_loss(probs, y) + l2 * np.sum(w * w))


def mlc_gradient(
    w: np.ndarray, b: np.ndarray, x: np.ndarray, y: np.ndarray, l2: float
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of mlc_objective wrt (w, b)."""
    n, k = x.shape[0], w.shape[0]
    probs = _sigmoid(x @ w.T + b)
    # clamping makes the loss constant outside [eps, 1-eps]
    active = (probs > _EPS) & (probs < 1.0 - _EPS)
    resid = np.where(active, probs - y, 0.0) / (n * k)
    return resid.T @ x + 2.0 * l2 * w, resid.sum(axis=0)


def train_mlc(
    features: list[VisualEmbedding],
    labels: np.ndarray,
    hyper: MlcHyper = MlcHyper(),
    loss_sink: list | None = None,
) -> MlcHead:
    """Full-batch gradient descent on sigmoid + BCE + L2; deterministic."""
    if not features:
        raise ValueError("empty training set")
    tags = {f.encoder_tag for f in features}
    if len(tags) != 1:
        raise ValueError(f"features from multiple encoders: {sorted(tags)}")
    x = np.stack([f.values for f in features])
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != (x.shape[0], K):
        raise ValueError(f"labels must be (n, {K}), got {y.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("NaN or Inf in features")

    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)  # constant dims pass through
    xs = (x - mean) / scale

    rng = SplitMix64(derive_seed(hyper.seed, "mlc-init"))
    w = rng.uniform_array((K, x.shape[1]), -0.01, 0.01)
    b = np.zeros(K)
    for _ in range(hyper.epochs):
        if loss_sink is not None:
            loss_sink.append(mlc_objective(w, b, xs, y, hyper.l2))
        gw, gb = mlc_gradient(w, b, xs, y, hyper.l2)
        w = w - hyper.lr * gw
        b = b - hyper.lr * gb
    if loss_sink is not None:
        loss_sink.append(mlc_objective(w, b, xs, y, hyper.l2))

    return MlcHead(
        weights=w,
        biases=b,
        trained_on=next(iter(tags)),
        feature_mean=mean,
        feature_scale=scale,
    )


def mlc_scores(head: MlcHead, embedding: VisualEmbedding) -> np.ndarray:
    if embedding.dim != head.dim:
        raise ValueError(f"embedding dim {embedding.dim} != head dim {head.dim}")
    scores = _sigmoid(head.weights @ head.standardize(embedding.values) + head.biases)
    # saturated logits round to exactly 0.0 or 1.0 in float64; both are fine
    assert np.all((scores >= 0.0) & (scores <= 1.0)), "sigmoid scores must lie in [0,1]"
    return scores


def predict_mlc(
    head: MlcHead,
    embedding: VisualEmbedding,
    vocabulary: Vocabulary = DEFAULT_VOCABULARY,
) -> list[ConceptFinding]:
    scores = mlc_scores(head, embedding)
    return findings_from_scores(scores, np.full(K, head.threshold), vocabulary)


# ---------------------------------------------------------------------------
# zero-shot prototype recognizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PrototypeSet:
    prototypes: np.ndarray  # (K, D_v), rows unit-norm
    thresholds: np.ndarray  # (K,) cosine thresholds
    encoder_tag: str
    exemplars_per_concept: int = 16
    calibration_warnings: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.prototypes.shape[0] != K or self.thresholds.shape != (K,):
            raise ValueError("one prototype and threshold per concept required")
        norms = np.linalg.norm(self.prototypes, axis=1)
        if not np.all(np.abs(norms - 1.0) <= 1e-9):
            raise ValueError("prototypes must be unit-normalized")
        if np.any(self.thresholds < -1.0) or np.any(self.thresholds > 1.0):
            raise ValueError("cosine thresholds must lie in [-1, 1]")

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]


def build_prototypes(
    vocabulary: Vocabulary,
    encoder,
    exemplars_per_concept: int = 16,
    seed: int = 0,
    width: int = 64,
    height: int = 64,
) -> PrototypeSet:
    """Mean embedding of clean single-concept exemplars, unit-normalized."""
    if exemplars_per_concept < 1:
        raise ValueError("exemplars_per_concept must be >= 1")
    protos = np.empty((K, encoder.dim))
    for k, concept in enumerate(CONCEPT_ORDER):
        embs = []
        for i in range(exemplars_per_concept):
            image = plant_concepts(
                width,
                height,
                {concept},
                derive_seed(seed, "prototype", concept.value, str(i)),
                0.0,
            )
            embs.append(encoder.encode(image).values)
        mean = np.mean(embs, axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0.0:
            raise ValueError(f"degenerate zero prototype for {concept.value}")
        protos[k] = mean / norm
    return PrototypeSet(
        prototypes=protos,
        thresholds=np.full(K, 0.5),
        encoder_tag=encoder.tag,
        exemplars_per_concept=exemplars_per_concept,
    )


def cosine_scores(embedding: VisualEmbedding, prototypes: PrototypeSet) -> np.ndarray:
    if embedding.dim != prototypes.dim:
        raise ValueError(f"embedding dim {embedding.dim} != prototype dim {prototypes.dim}")
    norm = np.linalg.norm(embedding.values)
    if norm == 0.0:
        raise ValueError("cannot score a zero-norm embedding")
    cos = prototypes.prototypes @ embedding.values / norm
    assert np.all(np.abs(cos) <= 1.0 + 1e-9), "cosine must lie in [-1, 1]"
    return np.clip(cos, -1.0, 1.0)


def calibrate_thresholds(
    prototypes: PrototypeSet, calib: list[Sample], encoder
) -> PrototypeSet:
    """Per-concept threshold at the midpoint of mean positive/negative cosine.

    Concepts without calibration positives fall back to 0.9 and record a
    warning (also emitted as CalibrationWarning).
    """
    if not calib:
        raise ValueError("empty calibration set")
    cosines = np.stack([cosine_scores(encoder.encode(s.image), prototypes) for s in calib])
    positive = np.array(
        [[c in s.gold_concepts for c in CONCEPT_ORDER] for s in calib], dtype=bool
    )
    thresholds = np.empty(K)
    notes: list[str] = []
    for k, concept in enumerate(CONCEPT_ORDER):
        pos = cosines[positive[:, k], k]
        neg = cosines[~positive[:, k], k]
        if pos.size == 0:
            thresholds[k] = 0.9
            note = f"no calibration positives for {concept.value}; threshold fixed at 0.9"
            notes.append(note)
            warnings.warn(note, CalibrationWarning)
        elif neg.size == 0:
            thresholds[k] = float(pos.mean())
            notes.append(f"no calibration negatives for {concept.value}")
        else:
            thresholds[k] = float((pos.mean() + neg.mean()) / 2.0)
    return replace(
        prototypes, thresholds=thresholds, calibration_warnings=tuple(notes)
    )


def zero_shot_recognize(
    embedding: VisualEmbedding,
    prototypes: PrototypeSet,
    vocabulary: Vocabulary = DEFAULT_VOCABULARY,
) -> list[ConceptFinding]:
    cos = cosine_scores(embedding, prototypes)
    return findings_from_scores(cos, prototypes.thresholds, vocabulary)


# ---------------------------------------------------------------------------
# artifact persistence
# ---------------------------------------------------------------------------


class ArtifactError(ValueError):
    """Recognizer artifact file is malformed or encoder-incompatible."""


def save_mlc_head(head: MlcHead, path: Path) -> None:
    doc = {
        "kind": "mlc_head",
        "trained_on": head.trained_on,
        "threshold": head.threshold,
        "weights": head.weights.tolist(),
        "biases": head.biases.tolist(),
        "feature_mean": head.feature_mean.tolist(),
        "feature_scale": head.feature_scale.tolist(),
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_mlc_head(path: Path, expect_tag: str | None = None) -> MlcHead:
    try:
        doc = json.loads(Path(path).read_text())
        head = MlcHead(
            weights=np.array(doc["weights"], dtype=np.float64),
            biases=np.array(doc["biases"], dtype=np.float64),
            trained_on=doc["trained_on"],
            feature_mean=np.array(doc["feature_mean"], dtype=np.float64),
            feature_scale=np.array(doc["feature_scale"], dtype=np.float64),
            threshold=doc["threshold"],
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ArtifactError(f"{path}: bad MLC head artifact: {exc}") from exc
    if expect_tag is not None and head.trained_on != expect_tag:
        raise ArtifactError(
            f"{path}: head trained on {head.trained_on!r}, expected {expect_tag!r}"
        )
    return head


def save_prototypes(protos: PrototypeSet, path: Path) -> None:
    doc = {
        "kind": "prototype_set",
        "encoder_tag": protos.encoder_tag,
        "exemplars_per_concept": protos.exemplars_per_concept,
        "prototypes": protos.prototypes.tolist(),
        "thresholds": protos.thresholds.tolist(),
        "calibration_warnings": list(protos.calibration_warnings),
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_prototypes(path: Path, expect_tag: str | None = None) -> PrototypeSet:
    try:
        doc = json.loads(Path(path).read_text())
        protos = PrototypeSet(
            prototypes=np.array(doc["prototypes"], dtype=np.float64),
            thresholds=np.array(doc["thresholds"], dtype=np.float64),
            encoder_tag=doc["encoder_tag"],
            exemplars_per_concept=doc["exemplars_per_concept"],
            calibration_warnings=tuple(doc.get("calibration_warnings", ())),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ArtifactError(f"{path}: bad prototype artifact: {exc}") from exc
    if expect_tag is not None and protos.encoder_tag != expect_tag:
        raise ArtifactError(
            f"{path}: prototypes built on {protos.encoder_tag!r}, expected {expect_tag!r}"
        )
    return protos
