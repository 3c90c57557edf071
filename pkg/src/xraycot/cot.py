"""Prompt assembly: the three-part input, reasoning steps, and ablations.

A prompt is at most three content segments (medical framing, concept
descriptions, task instruction) plus an optional numeric digest of the
aligned visual representation, followed by either a four-step reasoning
instruction block or a direct-answer instruction. Ablation flags switch
segments on and off; the rendered text contains a segment's sentinel
exactly when its flag is set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .alignment import AlignedRepresentation
from .concepts import ConceptFinding

STEP_KEYS = ("FINDINGS", "PATHOPHYSIOLOGY", "DIAGNOSIS", "JUSTIFICATION")
C_DESC_HEADER = "VISUAL CONCEPT FINDINGS:"
DIGEST_HEADER = "ALIGNED VISUAL DIGEST:"
NO_FINDINGS_SENTENCE = "No abnormal visual concepts detected."


@dataclass(frozen=True)
class AblationConfig:
    use_cot: bool = True
    use_cvis: bool = True
    use_fimg: bool = True
    use_pmed: bool = True


def ablation_presets() -> list[tuple[str, AblationConfig]]:
    """The five standard pipeline configurations, full first."""
    return [
        ("full", AblationConfig()),
        ("w/o CoT", AblationConfig(use_cot=False)),
        ("w/o C_vis", AblationConfig(use_cvis=False)),
        ("w/o F_img", AblationConfig(use_fimg=False)),
        ("w/o P_med", AblationConfig(use_pmed=False)),
    ]


def preset_by_name(name: str) -> AblationConfig:
    for preset_name, config in ablation_presets():
        if preset_name == name:
            return config
    known = [n for n, _ in ablation_presets()]
    raise ValueError(f"unknown ablation preset {name!r}; known presets: {known}")


@dataclass(frozen=True)
class CoTPromptTemplate:
    steps: tuple[str, str, str, str]  # instructions for the four step keys
    output_grammar_instructions: str

    def __post_init__(self):
        if len(self.steps) != 4:
            raise ValueError("exactly four reasoning steps required")
        if not all(self.steps) or not self.output_grammar_instructions:
            raise ValueError("step and grammar instructions must be non-empty")


@dataclass(frozen=True)
class PromptTemplates:
    p_med: str
    d_task: str
    cot: CoTPromptTemplate

    @classmethod
    def from_mapping(cls, raw: dict) -> "PromptTemplates":
        return cls(
            p_med=raw["p_med"],
            d_task=raw["d_task"],
            cot=CoTPromptTemplate(
                steps=tuple(raw["cot_steps"]),
                output_grammar_instructions=raw["output_grammar"],
            ),
        )

    @classmethod
    def default(cls) -> "PromptTemplates":
        text = resources.files("xraycot.data").joinpath("templates.json").read_text()
        return cls.from_mapping(json.loads(text))

    @classmethod
    def from_file(cls, path: Path) -> "PromptTemplates":
        return cls.from_mapping(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class PromptBundle:
    d_task: str
    ablation: AblationConfig
    p_med: str | None = None
    c_desc: str | None = None
    fimg_digest: str | None = None

    def __post_init__(self):
        if not self.d_task:
            raise ValueError("task instruction must always be present")
        if (self.p_med is not None) != self.ablation.use_pmed:
            raise ValueError("p_med presence must mirror use_pmed")
        if (self.c_desc is not None) != self.ablation.use_cvis:
            raise ValueError("c_desc presence must mirror use_cvis")
        if self.fimg_digest is not None and not self.ablation.use_fimg:
            raise ValueError("digest present but use_fimg is off")


@dataclass(frozen=True)
class RequestMetadata:
    ablation: AblationConfig
    sample_id: str | None = None
    backend: str | None = None


@dataclass(frozen=True)
class GenerationRequest:
    messages: tuple[tuple[str, str], ...]  # (role, content), roles system|user
    metadata: RequestMetadata = RequestMetadata(AblationConfig())

    def __post_init__(self):
        if not any(role == "user" for role, _ in self.messages):
            raise ValueError("request needs at least one user message")
        if not any(content for _, content in self.messages):
            raise ValueError("request content is empty")

    def user_content(self) -> str:
        return "\n\n".join(content for role, content in self.messages if role == "user")


def describe_findings(findings: list[ConceptFinding]) -> str:
    """The concept-description segment body: bullets or the fixed sentence."""
    if not findings:
        return NO_FINDINGS_SENTENCE
    return "\n".join(f"- {f.description}" for f in findings)


def digest_of(aligned: AlignedRepresentation) -> str:
    """Compact textual digest of the projected visual embedding."""
    return "[" + ", ".join(f"{v:.4f}" for v in aligned.visual_proj) + "]"


def assemble_prompt(
    findings: list[ConceptFinding],
    aligned: AlignedRepresentation | None,
    ablation: AblationConfig,
    templates: PromptTemplates,
    include_digest: bool = True,
) -> PromptBundle:
    """Compose the prompt segments the ablation flags call for."""
    if ablation.use_fimg and aligned is None:
        raise ValueError("use_fimg requires an aligned representation")
    c_desc = None
    if ablation.use_cvis:
        c_desc = f"{C_DESC_HEADER}\n{describe_findings(findings)}"
    fimg_digest = None
    if ablation.use_fimg and include_digest:
        fimg_digest = f"{DIGEST_HEADER}\n{digest_of(aligned)}"
    return PromptBundle(
        d_task=templates.d_task,
        ablation=ablation,
        p_med=templates.p_med if ablation.use_pmed else None,
        c_desc=c_desc,
        fimg_digest=fimg_digest,
    )


def _step_block(cot: CoTPromptTemplate) -> str:
    lines = ["Reason through four steps, emitting each header exactly as shown:"]
    for n, (key, instruction) in enumerate(zip(STEP_KEYS, cot.steps), start=1):
        lines.append(f"[STEP {n}: {key}] {instruction}")
    return "\n".join(lines)


def render_messages(
    bundle: PromptBundle,
    cot: CoTPromptTemplate,
    ablation: AblationConfig,
    sample_id: str | None = None,
    backend: str | None = None,
) -> GenerationRequest:
    """Order: system p_med; then c_desc, digest, d_task, steps, grammar."""
    segments = []
    if bundle.c_desc is not None:
        segments.append(bundle.c_desc)
    if bundle.fimg_digest is not None:
        segments.append(bundle.fimg_digest)
    segments.append(bundle.d_task)
    if ablation.use_cot:
        segments.append(_step_block(cot))
    segments.append(cot.output_grammar_instructions)

    messages: list[tuple[str, str]] = []
    if bundle.p_med is not None:
        messages.append(("system", bundle.p_med))
    messages.append(("user", "\n\n".join(segments)))
    return GenerationRequest(
        messages=tuple(messages),
        metadata=RequestMetadata(ablation=ablation, sample_id=sample_id, backend=backend),
    )
