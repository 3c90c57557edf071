"""Single-image diagnosis pipeline.

Composes the stages in order: encode the image, recognize concepts, align
visual and concept embeddings, assemble the prompt, generate the report,
then parse and validate it. Each stage stays independently testable; this
module only does the wiring.
"""

from __future__ import annotations

from dataclasses import dataclass

import httpx

from .alignment import Aligner
from .backend import BackendConfig, CompletionResult, generate
from .concepts import (
    DEFAULT_VOCABULARY,
    ConceptFinding,
    MlcHead,
    PrototypeSet,
    Vocabulary,
    predict_mlc,
    zero_shot_recognize,
)
from .cot import (
    AblationConfig,
    GenerationRequest,
    PromptTemplates,
    assemble_prompt,
    render_messages,
)
from .dataset import CONCEPT_ORDER, ConceptId, Image, Sample
from .encoder import config_hash
from .report import (
    CoTTrace,
    DiagnosticReport,
    ReportParseError,
    ValidationIssue,
    parse_report,
    validate,
)

# predicted-class sink for unparseable or unrecognized diagnoses
INVALID_CLASS = "invalid"


class MlcRecognizer:
    kind = "mlc"

    def __init__(self, head: MlcHead, vocabulary: Vocabulary = DEFAULT_VOCABULARY):
        self.head = head
        self.vocabulary = vocabulary
        self.tag = f"mlc/{head.trained_on}"

    def recognize(self, embedding, gold_concepts=None) -> list[ConceptFinding]:
        return predict_mlc(self.head, embedding, self.vocabulary)


class ZeroShotRecognizer:
    kind = "zero_shot"

    def __init__(self, prototypes: PrototypeSet, vocabulary: Vocabulary = DEFAULT_VOCABULARY):
        self.prototypes = prototypes
        self.vocabulary = vocabulary
        self.tag = f"zero_shot/{prototypes.encoder_tag}"

    def recognize(self, embedding, gold_concepts=None) -> list[ConceptFinding]:
        return zero_shot_recognize(embedding, self.prototypes, self.vocabulary)


class OracleRecognizer:
    """Injects gold concepts; the harness's reference upper bound."""

    kind = "oracle"
    tag = "oracle"

    def __init__(self, vocabulary: Vocabulary = DEFAULT_VOCABULARY):
        self.vocabulary = vocabulary

    def recognize(self, embedding, gold_concepts=None) -> list[ConceptFinding]:
        if gold_concepts is None:
            raise ValueError("oracle recognizer needs gold concepts for the sample")
        return [
            ConceptFinding(c, 1.0, self.vocabulary.describe(c))
            for c in CONCEPT_ORDER
            if c in gold_concepts
        ]


def make_recognizer(kind: str, **kwargs):
    if kind == "mlc":
        return MlcRecognizer(**kwargs)
    if kind == "zero_shot":
        return ZeroShotRecognizer(**kwargs)
    if kind == "oracle":
        return OracleRecognizer(**kwargs)
    raise ValueError(f"unknown recognizer kind {kind!r}")


@dataclass(frozen=True)
class PipelineResult:
    sample_id: str | None
    findings: tuple[ConceptFinding, ...]
    request: GenerationRequest
    completion: CompletionResult
    trace: CoTTrace | None
    report: DiagnosticReport | None
    issues: tuple[ValidationIssue, ...]
    predicted_class: str  # disease value, or "invalid"

    @property
    def parsed(self) -> bool:
        return self.report is not None

    @property
    def clean(self) -> bool:
        return self.parsed and not self.issues


class DiagnosisPipeline:
    def __init__(
        self,
        encoder,
        recognizer,
        templates: PromptTemplates | None = None,
        ablation: AblationConfig | None = None,
        backend: BackendConfig | None = None,
        vocabulary: Vocabulary = DEFAULT_VOCABULARY,
        prototypes: PrototypeSet | None = None,
        seed: int = 0,
        d_a: int = 32,
        include_digest: bool = True,
        lenient_severity: bool | None = None,
        transport: httpx.BaseTransport | None = None,
    ):
        self.encoder = encoder
        self.recognizer = recognizer
        self.templates = templates if templates is not None else PromptTemplates.default()
        self.ablation = ablation if ablation is not None else AblationConfig()
        self.backend = backend if backend is not None else BackendConfig()
        self.vocabulary = vocabulary
        # concept embeddings for alignment come from prototypes when available
        self.prototypes = (
            prototypes if prototypes is not None else getattr(recognizer, "prototypes", None)
        )
        self.seed = seed
        self.aligner = Aligner(seed, d_v=encoder.dim, d_a=d_a)
        self.include_digest = include_digest
        if lenient_severity is None:
            lenient_severity = self.backend.kind == "remote"
        self.lenient_severity = lenient_severity
        self.transport = transport  # default transport for remote generation

    def _clone(self, **overrides) -> "DiagnosisPipeline":
        kwargs = dict(
            encoder=self.encoder,
            recognizer=self.recognizer,
            templates=self.templates,
            ablation=self.ablation,
            backend=self.backend,
            vocabulary=self.vocabulary,
            prototypes=self.prototypes,
            seed=self.seed,
            d_a=self.aligner.d_a,
            include_digest=self.include_digest,
            lenient_severity=self.lenient_severity,
            transport=self.transport,
        )
        kwargs.update(overrides)
        return DiagnosisPipeline(**kwargs)

    def with_ablation(self, ablation: AblationConfig) -> "DiagnosisPipeline":
        return self._clone(ablation=ablation)

    def with_recognizer(self, recognizer) -> "DiagnosisPipeline":
        # alignment prototypes stay shared so only the recognizer varies
        return self._clone(recognizer=recognizer)

    @property
    def fingerprint(self) -> str:
        return config_hash(
            {
                "encoder": self.encoder.tag,
                "recognizer": self.recognizer.tag,
                "ablation": {
                    "use_cot": self.ablation.use_cot,
                    "use_cvis": self.ablation.use_cvis,
                    "use_fimg": self.ablation.use_fimg,
                    "use_pmed": self.ablation.use_pmed,
                },
                "backend": self.backend.tag,
                "seed": self.seed,
                "lenient_severity": self.lenient_severity,
            }
        )

    def build_request(
        self,
        image: Image,
        gold_concepts: frozenset[ConceptId] | None = None,
        sample_id: str | None = None,
    ) -> tuple[list[ConceptFinding], GenerationRequest]:
        f_img = self.encoder.encode(image)
        findings = self.recognizer.recognize(f_img, gold_concepts)
        aligned = (
            self.aligner.run(f_img, findings, self.prototypes)
            if self.ablation.use_fimg
            else None
        )
        bundle = assemble_prompt(
            findings, aligned, self.ablation, self.templates, self.include_digest
        )
        request = render_messages(
            bundle,
            self.templates.cot,
            self.ablation,
            sample_id=sample_id,
            backend=self.backend.tag,
        )
        return findings, request

    def finish(
        self,
        findings: list[ConceptFinding],
        request: GenerationRequest,
        completion: CompletionResult,
        sample_id: str | None = None,
    ) -> PipelineResult:
        try:
            trace, report = parse_report(
                completion.text, lenient_severity=self.lenient_severity
            )
        except ReportParseError as exc:
            return PipelineResult(
                sample_id=sample_id,
                findings=tuple(findings),
                request=request,
                completion=completion,
                trace=None,
                report=None,
                issues=(exc.issue,),
                predicted_class=INVALID_CLASS,
            )
        issues = tuple(validate(report, self.vocabulary))
        predicted = report.diagnosis_label.value if report.recognized else INVALID_CLASS
        return PipelineResult(
            sample_id=sample_id,
            findings=tuple(findings),
            request=request,
            completion=completion,
            trace=trace,
            report=report,
            issues=issues,
            predicted_class=predicted,
        )

    def run_image(
        self,
        image: Image,
        gold_concepts: frozenset[ConceptId] | None = None,
        sample_id: str | None = None,
        transport: httpx.BaseTransport | None = None,
    ) -> PipelineResult:
        findings, request = self.build_request(image, gold_concepts, sample_id)
        completion = generate(
            request,
            self.backend,
            self.vocabulary,
            transport=transport if transport is not None else self.transport,
        )
        return self.finish(findings, request, completion, sample_id)

    def run_sample(
        self, sample: Sample, transport: httpx.BaseTransport | None = None
    ) -> PipelineResult:
        return self.run_image(
            sample.image,
            gold_concepts=sample.gold_concepts,
            sample_id=sample.sample_id,
            transport=transport,
        )
