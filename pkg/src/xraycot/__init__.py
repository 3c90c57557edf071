"""Concept-grounded chest-image diagnosis with structured reasoning reports.

Synthetic concept-annotated images go in; a recognizer detects visual
concepts; a prompt built from those concepts drives a text backend that
writes a five-section diagnostic report with an optional four-step
reasoning trace; an evaluation harness scores diagnoses and concept
detection, and runs ablation and recognizer-comparison sweeps.
"""

from .alignment import AlignedRepresentation, Aligner, align, embed_concepts
from .backend import (
    BackendConfig,
    BackendError,
    CompletionResult,
    ProtocolError,
    TransportError,
    generate,
    generate_many,
    mock_generate,
    remote_generate,
)
from .concepts import (
    DEFAULT_VOCABULARY,
    CalibrationWarning,
    ConceptFinding,
    MlcHead,
    MlcHyper,
    PrototypeSet,
    Vocabulary,
    build_prototypes,
    calibrate_thresholds,
    findings_from_scores,
    load_mlc_head,
    load_prototypes,
    predict_mlc,
    save_mlc_head,
    save_prototypes,
    train_mlc,
    zero_shot_recognize,
)
from .cot import (
    AblationConfig,
    GenerationRequest,
    PromptBundle,
    PromptTemplates,
    ablation_presets,
    assemble_prompt,
    preset_by_name,
    render_messages,
)
from .dataset import (
    CONCEPT_ORDER,
    RULES,
    ConceptId,
    DiseaseLabel,
    GenConfig,
    Image,
    Manifest,
    ManifestError,
    Sample,
    disease_from_concepts,
    fired_rule,
    generate_dataset,
    load_manifest,
    plant_concepts,
    read_pgm,
    write_pgm,
)
from .encoder import (
    RegionStatsEncoder,
    ToyVitEncoder,
    VisualEmbedding,
    VitConfig,
    encode_region_stats,
    encode_vit,
    make_encoder,
    vit_attention_maps,
)
from .evaluation import (
    ConfusionCounts,
    EvaluationWarning,
    MetricsReport,
    ablation_sweep,
    bacc_multiclass,
    compute_metrics,
    concept_metrics,
    confusion_from_labels,
    evaluate_run,
    f1_macro_multiclass,
    recognizer_comparison,
)
from .pipeline import (
    DiagnosisPipeline,
    MlcRecognizer,
    OracleRecognizer,
    PipelineResult,
    ZeroShotRecognizer,
    make_recognizer,
)
from .prng import SplitMix64, derive_seed
from .report import (
    CoTTrace,
    DiagnosticReport,
    ReportParseError,
    Severity,
    ValidationIssue,
    parse_report,
    serialize,
    validate,
)

__version__ = "0.1.0"
