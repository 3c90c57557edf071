"""Text-generation backends.

Two implementations share one request shape: a deterministic mock that
follows the prompt instructions exactly (the default for experiments and
tests), and a remote OpenAI-compatible chat-completions client with retry.
"""

from __future__ import annotations

import json
import os
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import httpx

from .concepts import DEFAULT_VOCABULARY, Vocabulary
from .cot import C_DESC_HEADER, NO_FINDINGS_SENTENCE, GenerationRequest, STEP_KEYS
from .dataset import RULES, ConceptId, DiseaseLabel, fired_rule
from .report import Severity, delimiter, step_header


class BackendError(RuntimeError):
    """Base class for generation failures."""


class TransportError(BackendError):
    """Retryable failures exhausted the attempt budget."""


class ProtocolError(BackendError):
    """The server answered, but not in a way we can use."""


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock"
    base_url: str = ""
    model: str = "mock-radiologist"
    api_key_env: str = "XRAYCOT_API_KEY"
    timeout: float = 30.0
    max_attempts: int = 4
    backoff_base: float = 0.5
    backoff_factor: float = 2.0
    temperature: float = 0.0
    max_tokens: int | None = None

    def __post_init__(self):
        if self.kind not in ("mock", "remote"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "remote" and not self.base_url:
            raise ValueError("remote backend needs base_url")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")

    @property
    def tag(self) -> str:
        return "mock" if self.kind == "mock" else f"remote/{self.model}"


@dataclass(frozen=True)
class CompletionResult:
    text: str
    backend_tag: str
    attempts: int = 1
    latency: float = 0.0  # milliseconds

    def __post_init__(self):
        if not self.text:
            raise ValueError("completion text must be non-empty")
        if self.attempts < 1 or self.latency < 0:
            raise ValueError("attempts and latency must be non-negative")


# one short mechanism sentence per concept, used by the mock's step 2
_PATHOPHYSIOLOGY = {
    ConceptId.RIGHT_LOWER_LOBE_OPACITY: (
        "lung opacities suggest inflammation or fluid accumulation in the right lower lobe"
    ),
    ConceptId.LEFT_LOWER_LOBE_OPACITY: (
        "lung opacities suggest inflammation or fluid accumulation in the left lower lobe"
    ),
    ConceptId.BILATERAL_PERIHILAR_OPACITY: (
        "lung opacities suggest inflammation or fluid accumulation; a perihilar"
        " distribution favors pulmonary edema"
    ),
    ConceptId.INCREASED_LUNG_MARKINGS: (
        "increased interstitial markings reflect fluid overload or chronic airway change"
    ),
    ConceptId.ELEVATED_DIAPHRAGM: (
        "an elevated hemidiaphragm suggests volume loss or phrenic nerve dysfunction"
    ),
    ConceptId.ENLARGED_CARDIAC_SILHOUETTE: (
        "an enlarged cardiac silhouette indicates chamber dilation or pericardial fluid"
    ),
    ConceptId.BLUNTED_COSTOPHRENIC_ANGLE: (
        "blunting of the costophrenic angle indicates pleural fluid accumulation"
    ),
    ConceptId.PULMONARY_NODULE: (
        "a discrete pulmonary nodule may represent a granuloma or an early neoplasm"
    ),
}

_RECOMMENDATIONS = {
    DiseaseLabel.CONGESTIVE_HEART_FAILURE: (
        "Recommend diuresis and cardiology follow-up; repeat imaging after treatment."
    ),
    DiseaseLabel.PNEUMONIA: (
        "Recommend antibiotic therapy and a follow-up radiograph in 4-6 weeks."
    ),
    DiseaseLabel.CARDIOMEGALY: (
        "Recommend echocardiography to evaluate cardiac size and function."
    ),
    DiseaseLabel.NORMAL: (
        "No acute findings; routine follow-up as clinically indicated."
    ),
}

_NODULE_SENTENCE = (
    "Further imaging (e.g., CT scan) recommended for characterization of the"
    " detected nodule in the right upper lobe."
)


def _extract_descriptions(user_content: str) -> list[str] | None:
    """Bullet descriptions under the findings header; None when absent."""
    lines = user_content.split("\n")
    try:
        start = lines.index(C_DESC_HEADER)
    except ValueError:
        return None
    out: list[str] = []
    for line in lines[start + 1 :]:
        if line.startswith("- "):
            out.append(line[2:].strip())
        elif line.strip() == NO_FINDINGS_SENTENCE and not out:
            return []
        else:
            break
    return out


def mock_generate(
    request: GenerationRequest, vocabulary: Vocabulary = DEFAULT_VOCABULARY
) -> CompletionResult:
    """Deterministic report writer that obeys the prompt it is given.

    It reads the concept bullets out of the prompt, applies the diagnostic
    rules, and emits a report in the requested grammar, with the four-step
    block present exactly when the prompt asked for step-by-step reasoning.
    """
    content = request.user_content()
    descriptions = _extract_descriptions(content)
    want_cot = f"[STEP 1: {STEP_KEYS[0]}]" in content

    known = {desc: concept for concept, desc in vocabulary.descriptions.items()}
    if descriptions is None:
        concepts: set[ConceptId] = set()
        echoed: list[str] = []
    else:
        concepts = {known[d] for d in descriptions if d in known}
        echoed = descriptions

    rule = fired_rule(concepts)
    disease = rule.label
    matched = rule.matched_concepts(concepts)

    if descriptions is None:
        reasoning = (
            "No visual concept findings were provided, so the study is read"
            " as within normal limits by default."
        )
    elif matched:
        cited = "; ".join(vocabulary.describe(c) for c in matched)
        reasoning = f"The following findings support {disease.value}: {cited}."
    else:
        reasoning = (
            "No abnormal visual concepts were reported, so the study is read"
            " as within normal limits."
        )

    n = len(echoed)
    if n == 0:
        severity = Severity.UNSPECIFIED
    elif n == 1:
        severity = Severity.MILD
    elif n == 2:
        severity = Severity.MODERATE
    else:
        severity = Severity.SEVERE

    recommendations = _RECOMMENDATIONS[disease]
    if ConceptId.PULMONARY_NODULE in concepts:
        recommendations = f"{recommendations} {_NODULE_SENTENCE}"

    out: list[str] = []
    if want_cot:
        if echoed:
            step1 = "Observed visual concepts include: " + "; ".join(echoed) + "."
            mechanisms = [
                _PATHOPHYSIOLOGY[known[d]] for d in echoed if d in known
            ] or ["the reported findings do not map to a known mechanism"]
            step2 = "; ".join(mechanisms) + "."
        else:
            step1 = NO_FINDINGS_SENTENCE
            step2 = "A normal study shows no active pathophysiologic process."
        step3 = (
            f"Rule {rule.name} applies: the most likely primary diagnosis"
            f" is {disease.value}."
        )
        if matched:
            cited = "; ".join(vocabulary.describe(c) for c in matched)
            step4 = f"The diagnosis is supported by: {cited}."
        else:
            step4 = "No diagnostic rule fired; the study appears within normal limits."
        for i, text in enumerate((step1, step2, step3, step4), start=1):
            out.append(f"{step_header(i)} {text}")

    out.append(delimiter("PRIMARY DIAGNOSIS"))
    out.append(disease.value)
    out.append(delimiter("REASONING"))
    out.append(reasoning)
    out.append(delimiter("VISUAL CONCEPTS"))
    if descriptions is None:
        out.append("No visual concept descriptions were provided.")
    else:
        out.extend(f"- {d}" for d in echoed)
    out.append(delimiter("SEVERITY"))
    out.append(severity.value)
    out.append(delimiter("RECOMMENDATIONS"))
    out.append(recommendations)
    return CompletionResult(text="\n".join(out) + "\n", backend_tag="mock", attempts=1)


def request_body(request: GenerationRequest, config: BackendConfig) -> bytes:
    """Byte-stable JSON body for the chat-completions call."""
    doc = {
        "model": config.model,
        "messages": [{"role": r, "content": c} for r, c in request.messages],
        "temperature": config.temperature,
    }
    if config.max_tokens is not None:
        doc["max_tokens"] = config.max_tokens
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _parse_completion(payload) -> str:
    try:
        content = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ProtocolError(f"malformed completion payload: {exc!r}") from None
    if not isinstance(content, str):
        raise ProtocolError("completion content is not a string")
    return content


def remote_generate(
    request: GenerationRequest,
    config: BackendConfig,
    transport: httpx.BaseTransport | None = None,
    sleep: Callable[[float], None] | None = None,
    rng: random.Random | None = None,
) -> CompletionResult:
    """POST to {base_url}/v1/chat/completions with retry.

    Retries 429, 5xx, and timeouts with exponential backoff and full
    jitter; any other 4xx or a malformed success body fails immediately
    with ProtocolError. transport, sleep, and rng are injectable so tests
    run hermetically and without real delays.
    """
    sleep = sleep if sleep is not None else time.sleep
    rng = rng if rng is not None else random.Random()
    api_key = os.environ.get(config.api_key_env, "")
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    url = config.base_url.rstrip("/") + "/v1/chat/completions"
    body = request_body(request, config)

    last_detail = ""
    started = time.monotonic()
    with httpx.Client(transport=transport, timeout=config.timeout) as client:
        for attempt in range(1, config.max_attempts + 1):
            try:
                response = client.post(url, content=body, headers=headers)
            except httpx.TimeoutException as exc:
                last_detail = f"timeout: {exc!r}"
            else:
                if response.status_code == 200:
                    try:
                        payload = response.json()
                    except ValueError:
                        raise ProtocolError("response body is not JSON") from None
                    text = _parse_completion(payload)
                    return CompletionResult(
                        text=text,
                        backend_tag=config.tag,
                        attempts=attempt,
                        latency=(time.monotonic() - started) * 1000.0,
                    )
                if response.status_code == 429 or response.status_code >= 500:
                    last_detail = f"status {response.status_code}"
                else:
                    raise ProtocolError(
                        f"status {response.status_code}: {response.text[:200]}"
                    )
            if attempt == config.max_attempts:
                break
            cap = config.backoff_base * config.backoff_factor ** (attempt - 1)
            sleep(cap * rng.uniform(0.0, 1.0))
    raise TransportError(
        f"gave up after {config.max_attempts} attempts (last failure: {last_detail})"
    )


def generate(
    request: GenerationRequest,
    config: BackendConfig,
    vocabulary: Vocabulary = DEFAULT_VOCABULARY,
    transport: httpx.BaseTransport | None = None,
    sleep: Callable[[float], None] | None = None,
    rng: random.Random | None = None,
) -> CompletionResult:
    if config.kind == "mock":
        return mock_generate(request, vocabulary)
    return remote_generate(request, config, transport=transport, sleep=sleep, rng=rng)


def generate_many(
    requests: Sequence[GenerationRequest],
    config: BackendConfig,
    vocabulary: Vocabulary = DEFAULT_VOCABULARY,
    max_workers: int = 4,
    transport: httpx.BaseTransport | None = None,
) -> list[CompletionResult]:
    """Generate for each request, preserving input order."""
    if not requests:
        return []
    worker = lambda req: generate(req, config, vocabulary, transport=transport)
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(worker, requests))
