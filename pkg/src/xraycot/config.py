"""Run configuration: schema validation, defaults, overrides, fingerprint.

One JSON file drives every subcommand. Validation happens against the
shipped schema before any work; unknown keys are rejected. Relative paths
inside the config resolve against the config file's directory.
"""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path

import jsonschema

from .backend import BackendConfig
from .concepts import MlcHyper, Vocabulary
from .cot import AblationConfig, PromptTemplates, preset_by_name
from .dataset import ConceptId, GenConfig


class ConfigError(ValueError):
    """Configuration is malformed; maps to CLI exit code 2."""


DEFAULTS: dict = {
    "seed": 0,
    "out_dir": "runs/out",
    "dataset": {
        "dir": "data/synth",
        "n_train": 500,
        "n_calib": 100,
        "n_test": 200,
        "noise_sigma": 8.0,
        "concept_prior": 0.25,
        "width": 64,
        "height": 64,
    },
    "encoder": {"kind": "region_stats"},
    "recognizer": {
        "kind": "mlc",
        "lr": 0.1,
        "epochs": 500,
        "l2": 1e-4,
        "threshold": 0.5,
        "exemplars_per_concept": 16,
        "artifacts_dir": "artifacts",
    },
    "align": {"d_a": 32, "include_digest": True},
    "prompts": {"templates_path": None, "vocabulary_path": None},
    "ablation": {"preset": "full"},
    "backend": {
        "kind": "mock",
        "base_url": "",
        "model": "mock-radiologist",
        "api_key_env": "XRAYCOT_API_KEY",
        "timeout": 30.0,
        "max_attempts": 4,
        "backoff_base": 0.5,
        "backoff_factor": 2.0,
        "temperature": 0.0,
        "max_tokens": None,
    },
    "report": {"lenient_severity": None},
    "eval": {"split": "test", "max_workers": 1},
}


def load_schema() -> dict:
    text = resources.files("xraycot.data").joinpath("config_schema.json").read_text()
    return json.loads(text)


def _validate(config: dict) -> None:
    try:
        jsonschema.validate(config, load_schema())
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "(top level)"
        raise ConfigError(f"config invalid at {path}: {exc.message}") from None


def _deep_merge(base: dict, override: dict) -> dict:
    # ablation is a oneOf section: merging defaults into an explicit-flags
    # object would mix the two alternatives, so it is replaced wholesale
    out = copy.deepcopy(base)
    for key, value in override.items():
        if (
            key != "ablation"
            and isinstance(value, dict)
            and isinstance(out.get(key), dict)
        ):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(expr: str) -> tuple[list[str], object]:
    """Split a --set expression 'a.b.c=value'; value parses as JSON else string."""
    if "=" not in expr:
        raise ConfigError(f"--set needs key=value, got {expr!r}")
    key, raw = expr.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"--set has an empty key: {expr!r}")
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return key.split("."), value


def apply_override(config: dict, path: list[str], value: object) -> None:
    """Assign into an existing leaf; unknown paths are config errors."""
    node = config
    for part in path[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config path {'.'.join(path)!r}")
        node = node[part]
    if not isinstance(node, dict) or path[-1] not in node:
        raise ConfigError(f"unknown config path {'.'.join(path)!r}")
    node[path[-1]] = value


def load_config(
    path: Path, overrides: list[str] = (), out_dir: str | None = None
) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    _validate(raw)  # reject unknown keys before merging defaults in
    config = _deep_merge(DEFAULTS, raw)
    for expr in overrides:
        key_path, value = parse_override(expr)
        apply_override(config, key_path, value)
    if out_dir is not None:
        config["out_dir"] = out_dir
    _validate(config)
    config["_config_dir"] = str(path.resolve().parent)
    return config


def config_fingerprint(config: dict) -> str:
    """Hash of everything that affects results; out_dir excluded."""
    doc = {
        k: v for k, v in config.items() if k not in ("out_dir", "_config_dir")
    }
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def resolve_path(config: dict, value: str) -> Path:
    base = Path(config.get("_config_dir", "."))
    p = Path(value)
    return p if p.is_absolute() else base / p


def gen_config_from(config: dict) -> GenConfig:
    d = config["dataset"]
    prior = d["concept_prior"]
    if isinstance(prior, dict):
        try:
            prior = {ConceptId(k): v for k, v in prior.items()}
        except ValueError as exc:
            raise ConfigError(f"concept_prior: {exc}") from None
    return GenConfig(
        n_per_split={"train": d["n_train"], "calib": d["n_calib"], "test": d["n_test"]},
        seed=config["seed"],
        noise_sigma=d["noise_sigma"],
        concept_prior=prior,
        width=d["width"],
        height=d["height"],
    )


def ablation_from(config: dict) -> AblationConfig:
    section = config["ablation"]
    if "preset" in section:
        return preset_by_name(section["preset"])
    return AblationConfig(
        use_cot=section.get("use_cot", True),
        use_cvis=section.get("use_cvis", True),
        use_fimg=section.get("use_fimg", True),
        use_pmed=section.get("use_pmed", True),
    )


def backend_from(config: dict) -> BackendConfig:
    b = config["backend"]
    return BackendConfig(
        kind=b["kind"],
        base_url=b["base_url"],
        model=b["model"],
        api_key_env=b["api_key_env"],
        timeout=b["timeout"],
        max_attempts=b["max_attempts"],
        backoff_base=b["backoff_base"],
        backoff_factor=b["backoff_factor"],
        temperature=b["temperature"],
        max_tokens=b["max_tokens"],
    )


def hyper_from(config: dict) -> MlcHyper:
    r = config["recognizer"]
    return MlcHyper(lr=r["lr"], epochs=r["epochs"], l2=r["l2"], seed=config["seed"])


def templates_from(config: dict) -> PromptTemplates:
    p = config["prompts"]["templates_path"]
    if p is None:
        return PromptTemplates.default()
    return PromptTemplates.from_file(resolve_path(config, p))


def vocabulary_from(config: dict) -> Vocabulary:
    p = config["prompts"]["vocabulary_path"]
    if p is None:
        return Vocabulary.default()
    return Vocabulary.from_file(resolve_path(config, p))
