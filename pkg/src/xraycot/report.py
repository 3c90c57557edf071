"""Report grammar: parse, validate, and serialize diagnostic reports.

Canonical layout (the reasoning block is optional):

    [STEP 1: FINDINGS] ...
    [STEP 2: PATHOPHYSIOLOGY] ...
    [STEP 3: DIAGNOSIS] ...
    [STEP 4: JUSTIFICATION] ...
    == PRIMARY DIAGNOSIS ==
    ...
    == REASONING ==
    ...
    == VISUAL CONCEPTS ==
    - one bullet per concept
    == SEVERITY ==
    single token
    == RECOMMENDATIONS ==
    ...

Parsing is strict about section presence and order, lenient about body
content. Parse failures raise ReportParseError carrying a structured issue
with an exact byte offset; the parser never crashes on arbitrary input.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum

from .concepts import Vocabulary
from .dataset import DiseaseLabel

SECTION_ORDER = (
    "PRIMARY DIAGNOSIS",
    "REASONING",
    "VISUAL CONCEPTS",
    "SEVERITY",
    "RECOMMENDATIONS",
)
STEP_KEYS = ("FINDINGS", "PATHOPHYSIOLOGY", "DIAGNOSIS", "JUSTIFICATION")


def delimiter(section: str) -> str:
    return f"== {section} =="


def step_header(n: int) -> str:
    return f"[STEP {n}: {STEP_KEYS[n - 1]}]"


class Severity(str, Enum):
    MILD = "mild"
    MODERATE = "moderate"
    SEVERE = "severe"
    UNSPECIFIED = "unspecified"


class IssueCode(str, Enum):
    MISSING_SECTION = "MissingSection"
    UNKNOWN_SEVERITY = "UnknownSeverity"
    UNRECOGNIZED_DIAGNOSIS = "UnrecognizedDiagnosis"
    CONCEPT_NOT_IN_VOCABULARY = "ConceptNotInVocabulary"
    EMPTY_SECTION = "EmptySection"
    DUPLICATE_SECTION = "DuplicateSection"


@dataclass(frozen=True)
class ValidationIssue:
    code: IssueCode
    detail: str
    location: int  # byte offset into the source text, -1 when unknown


class ReportParseError(ValueError):
    def __init__(self, issue: ValidationIssue):
        super().__init__(f"{issue.code.value}: {issue.detail} (byte {issue.location})")
        self.issue = issue


@dataclass(frozen=True)
class CoTTrace:
    findings_text: str = ""
    pathophysiology_text: str = ""
    diagnosis_text: str = ""
    justification_text: str = ""
    present: bool = False

    def __post_init__(self):
        texts = (
            self.findings_text,
            self.pathophysiology_text,
            self.diagnosis_text,
            self.justification_text,
        )
        if self.present and not all(texts):
            raise ValueError("a present reasoning trace needs all four step texts")

    @property
    def steps(self) -> tuple[str, str, str, str]:
        return (
            self.findings_text,
            self.pathophysiology_text,
            self.diagnosis_text,
            self.justification_text,
        )


@dataclass(frozen=True)
class DiagnosticReport:
    diagnosis_text: str  # raw primary-diagnosis body
    diagnosis_label: DiseaseLabel | None
    recognized: bool
    reasoning: str
    observed_concepts: tuple[str, ...]
    severity: Severity
    recommendations: str
    severity_raw: str = field(default="", compare=False)
    section_offsets: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.recognized and self.diagnosis_label is None:
            raise ValueError("recognized diagnosis needs a label")


def _byte_offset(text: str, char_index: int) -> int:
    return len(text[:char_index].encode("utf-8", errors="surrogatepass"))


def _normalize_diagnosis(token: str) -> str:
    return re.sub(r"[\s\-]+", "_", token.strip().lower())


_STEP_RE = re.compile(r"^\[STEP ([0-9]+): ([A-Z]+)\]")


def parse_report(
    text: str, lenient_severity: bool = False
) -> tuple[CoTTrace, DiagnosticReport]:
    """Parse canonical report text into its structured form.

    MissingSection locations are the byte offset where scanning stopped;
    other locations point at the offending construct.
    """
    lines = text.split("\n")
    starts: list[int] = []
    pos = 0
    for line in lines:
        starts.append(pos)
        pos += len(line) + 1

    # locate section delimiters (one each, in order)
    found: dict[str, int] = {}
    for i, line in enumerate(lines):
        stripped = line.strip()
        for section in SECTION_ORDER:
            if stripped == delimiter(section):
                if section in found:
                    raise ReportParseError(
                        ValidationIssue(
                            IssueCode.DUPLICATE_SECTION,
                            f"duplicate delimiter {delimiter(section)!r}",
                            _byte_offset(text, starts[i]),
                        )
                    )
                found[section] = i
    cursor_line = 0
    for section in SECTION_ORDER:
        if section not in found or found[section] < cursor_line:
            raise ReportParseError(
                ValidationIssue(
                    IssueCode.MISSING_SECTION,
                    f"expected delimiter {delimiter(section)!r}",
                    _byte_offset(text, starts[min(cursor_line, len(lines) - 1)]),
                )
            )
        cursor_line = found[section]

    trace = _parse_trace(text, lines, starts, end_line=found[SECTION_ORDER[0]])

    bodies: dict[str, str] = {}
    offsets: dict[str, int] = {}
    section_lines = [found[s] for s in SECTION_ORDER]
    for idx, section in enumerate(SECTION_ORDER):
        first = section_lines[idx] + 1
        last = section_lines[idx + 1] if idx + 1 < len(SECTION_ORDER) else len(lines)
        bodies[section] = "\n".join(lines[first:last]).strip()
        offsets[section] = _byte_offset(
            text, starts[first] if first < len(lines) else len(text)
        )

    diagnosis_text = bodies["PRIMARY DIAGNOSIS"]
    normalized = _normalize_diagnosis(diagnosis_text)
    label = next((d for d in DiseaseLabel if d.value == normalized), None)

    concepts = tuple(
        line[2:].strip()
        for line in bodies["VISUAL CONCEPTS"].split("\n")
        if line.startswith("- ")
    )

    severity_raw = bodies["SEVERITY"].strip()
    severity = next((s for s in Severity if s.value == severity_raw.lower()), None)
    if severity is None:
        if not lenient_severity:
            raise ReportParseError(
                ValidationIssue(
                    IssueCode.UNKNOWN_SEVERITY,
                    f"severity token {severity_raw!r} outside "
                    f"{[s.value for s in Severity]}",
                    offsets["SEVERITY"],
                )
            )
        severity = Severity.UNSPECIFIED

    report = DiagnosticReport(
        diagnosis_text=diagnosis_text,
        diagnosis_label=label,
        recognized=label is not None,
        reasoning=bodies["REASONING"],
        observed_concepts=concepts,
        severity=severity,
        recommendations=bodies["RECOMMENDATIONS"],
        severity_raw=severity_raw,
        section_offsets=offsets,
    )
    return trace, report


def _parse_trace(text: str, lines: list[str], starts: list[int], end_line: int) -> CoTTrace:
    """Parse the optional four-step block preceding the first delimiter."""
    headers: list[tuple[int, int, str, str]] = []  # line, n, key, remainder
    for i in range(end_line):
        m = _STEP_RE.match(lines[i])
        if m:
            headers.append((i, int(m.group(1)), m.group(2), lines[i][m.end() :].strip()))
    if not headers:
        return CoTTrace()

    seen: set[tuple[int, str]] = set()
    for line_i, n, key, _ in headers:
        if (n, key) in seen:
            raise ReportParseError(
                ValidationIssue(
                    IssueCode.DUPLICATE_SECTION,
                    f"duplicate step header {lines[line_i].split(']')[0]}]",
                    _byte_offset(text, starts[line_i]),
                )
            )
        seen.add((n, key))

    expected = [(n, STEP_KEYS[n - 1]) for n in range(1, 5)]
    if [(n, k) for _, n, k, _ in headers] != expected:
        missing = next(
            (f"STEP {n}: {k}" for n, k in expected if (n, k) not in seen),
            f"steps in order {[f'STEP {n}: {k}' for n, k in expected]}",
        )
        raise ReportParseError(
            ValidationIssue(
                IssueCode.MISSING_SECTION,
                f"expected {missing}",
                _byte_offset(text, starts[headers[0][0]]),
            )
        )

    texts = []
    for idx, (line_i, n, _key, remainder) in enumerate(headers):
        last = headers[idx + 1][0] if idx + 1 < len(headers) else end_line
        parts = [remainder] + lines[line_i + 1 : last]
        body = "\n".join(parts).strip()
        if not body:
            raise ReportParseError(
                ValidationIssue(
                    IssueCode.EMPTY_SECTION,
                    f"step {n} has no text",
                    _byte_offset(text, starts[line_i]),
                )
            )
        texts.append(body)
    return CoTTrace(*texts, present=True)


def validate(report: DiagnosticReport, vocabulary: Vocabulary) -> list[ValidationIssue]:
    """Structural checks beyond the grammar; empty list means valid."""
    issues: list[ValidationIssue] = []
    offsets = report.section_offsets

    def at(section: str) -> int:
        return offsets.get(section, -1)

    if not report.recognized:
        issues.append(
            ValidationIssue(
                IssueCode.UNRECOGNIZED_DIAGNOSIS,
                f"diagnosis {report.diagnosis_text!r} is not in the disease enumeration",
                at("PRIMARY DIAGNOSIS"),
            )
        )
    known = set(vocabulary.descriptions.values())
    for concept_text in report.observed_concepts:
        if concept_text not in known:
            issues.append(
                ValidationIssue(
                    IssueCode.CONCEPT_NOT_IN_VOCABULARY,
                    f"observed concept {concept_text!r} matches no vocabulary description",
                    at("VISUAL CONCEPTS"),
                )
            )
    if not report.reasoning:
        issues.append(
            ValidationIssue(IssueCode.EMPTY_SECTION, "reasoning is empty", at("REASONING"))
        )
    if not report.recommendations:
        issues.append(
            ValidationIssue(
                IssueCode.EMPTY_SECTION, "recommendations are empty", at("RECOMMENDATIONS")
            )
        )
    if report.severity_raw and report.severity_raw.lower() not in {
        s.value for s in Severity
    }:
        issues.append(
            ValidationIssue(
                IssueCode.UNKNOWN_SEVERITY,
                f"severity token {report.severity_raw!r} normalized to 'unspecified'",
                at("SEVERITY"),
            )
        )
    return issues


def serialize(report: DiagnosticReport, trace: CoTTrace, format: str = "canonical_text") -> str:
    if format == "canonical_text":
        return _serialize_canonical(report, trace)
    if format == "json":
        return _serialize_json(report, trace)
    if format == "markdown":
        return _serialize_markdown(report, trace)
    raise ValueError(f"unknown format {format!r}")


def _serialize_canonical(report: DiagnosticReport, trace: CoTTrace) -> str:
    out: list[str] = []
    if trace.present:
        for n, text in enumerate(trace.steps, start=1):
            out.append(f"{step_header(n)} {text}")
    out.append(delimiter("PRIMARY DIAGNOSIS"))
    out.append(report.diagnosis_text)
    out.append(delimiter("REASONING"))
    out.append(report.reasoning)
    out.append(delimiter("VISUAL CONCEPTS"))
    out.extend(f"- {c}" for c in report.observed_concepts)
    out.append(delimiter("SEVERITY"))
    out.append(report.severity.value)
    out.append(delimiter("RECOMMENDATIONS"))
    out.append(report.recommendations)
    return "\n".join(out) + "\n"


def _serialize_json(report: DiagnosticReport, trace: CoTTrace) -> str:
    doc = {
        "primary_diagnosis": report.diagnosis_text,
        "recognized": report.recognized,
        "reasoning": report.reasoning,
        "observed_concepts": list(report.observed_concepts),
        "severity": report.severity.value,
        "recommendations": report.recommendations,
    }
    if trace.present:
        doc["cot_trace"] = {
            "findings": trace.findings_text,
            "pathophysiology": trace.pathophysiology_text,
            "diagnosis": trace.diagnosis_text,
            "justification": trace.justification_text,
        }
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def _serialize_markdown(report: DiagnosticReport, trace: CoTTrace) -> str:
    out = ["# Diagnostic Report", ""]
    if trace.present:
        out += ["## Reasoning Trace", ""]
        for n, text in enumerate(trace.steps, start=1):
            out.append(f"{n}. **{STEP_KEYS[n - 1]}**: {text}")
        out.append("")
    out += ["## PRIMARY DIAGNOSIS", "", report.diagnosis_text, ""]
    out += ["## REASONING", "", report.reasoning, ""]
    out += ["## VISUAL CONCEPTS", ""]
    out += [f"- {c}" for c in report.observed_concepts] or ["(none)"]
    out += ["", "## SEVERITY", "", report.severity.value, ""]
    out += ["## RECOMMENDATIONS", "", report.recommendations, ""]
    return "\n".join(out)
