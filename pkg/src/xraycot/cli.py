"""Command line interface.

    xraycot gen-data|train|diagnose|evaluate|ablate|compare \
        --config <path> [--set key=value]* [--out <dir>]

Exit codes: 0 success, 1 runtime failure, 2 config error, 3 report
validation issues (diagnose only).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .backend import BackendError
from .concepts import (
    ArtifactError,
    build_prototypes,
    calibrate_thresholds,
    load_mlc_head,
    load_prototypes,
    save_mlc_head,
    save_prototypes,
    train_mlc,
)
from .config import (
    ConfigError,
    ablation_from,
    backend_from,
    config_fingerprint,
    gen_config_from,
    hyper_from,
    load_config,
    resolve_path,
    templates_from,
    vocabulary_from,
)
from .dataset import CONCEPT_ORDER, ManifestError, generate_dataset, load_manifest, read_pgm
from .encoder import make_encoder
from .evaluation import (
    ablation_sweep,
    evaluate_run,
    format_table,
    recognizer_comparison,
)
from .pipeline import (
    DiagnosisPipeline,
    MlcRecognizer,
    OracleRecognizer,
    ZeroShotRecognizer,
)
from .report import serialize

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_VALIDATION = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xraycot",
        description="Concept-grounded chest-image diagnosis pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str, image: bool = False) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        if image:
            p.add_argument("image", help="path to a binary PGM image")
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config leaf by dotted path (value parsed as JSON)",
        )
        p.add_argument("--out", default=None, help="output directory override")
        return p

    add("gen-data", "generate a synthetic concept-annotated dataset")
    add("train", "fit the MLC head and build+calibrate zero-shot prototypes")
    add("diagnose", "run the full pipeline on one image", image=True)
    add("evaluate", "score the pipeline on a dataset split")
    add("ablate", "run the five-preset ablation sweep")
    add("compare", "compare zero-shot and MLC concept recognizers")
    return parser


def _out_dir(config: dict, args) -> Path:
    if args.out is not None:
        return Path(args.out)
    return resolve_path(config, config["out_dir"])


def _manifest_samples(config: dict) -> list:
    manifest = resolve_path(config, config["dataset"]["dir"]) / "manifest.jsonl"
    if not manifest.is_file():
        raise ManifestError(f"no manifest at {manifest}; run gen-data first")
    return load_manifest(manifest)


def _split(samples: list, name: str) -> list:
    picked = [s for s in samples if s.split == name]
    if not picked:
        raise ManifestError(f"split {name!r} is empty")
    return picked


def _artifact_dir(config: dict) -> Path:
    return resolve_path(config, config["recognizer"]["artifacts_dir"])


def _load_head(config: dict, encoder):
    path = _artifact_dir(config) / "mlc_head.json"
    if not path.is_file():
        raise ArtifactError(f"missing artifact {path}; run train first")
    return load_mlc_head(path, expect_tag=encoder.tag)


def _load_protos(config: dict, encoder, required: bool):
    path = _artifact_dir(config) / "prototypes.json"
    if not path.is_file():
        if required:
            raise ArtifactError(f"missing artifact {path}; run train first")
        return None
    return load_prototypes(path, expect_tag=encoder.tag)


def build_pipeline(config: dict) -> DiagnosisPipeline:
    encoder = make_encoder(config["encoder"]["kind"], config["seed"])
    vocabulary = vocabulary_from(config)
    kind = config["recognizer"]["kind"]
    prototypes = _load_protos(config, encoder, required=kind == "zero_shot")
    if kind == "mlc":
        recognizer = MlcRecognizer(_load_head(config, encoder), vocabulary)
    elif kind == "zero_shot":
        recognizer = ZeroShotRecognizer(prototypes, vocabulary)
    else:
        recognizer = OracleRecognizer(vocabulary)
    return DiagnosisPipeline(
        encoder=encoder,
        recognizer=recognizer,
        templates=templates_from(config),
        ablation=ablation_from(config),
        backend=backend_from(config),
        vocabulary=vocabulary,
        prototypes=prototypes,
        seed=config["seed"],
        d_a=config["align"]["d_a"],
        include_digest=config["align"]["include_digest"],
        lenient_severity=config["report"]["lenient_severity"],
    )


def cmd_gen_data(config: dict, args) -> int:
    gen = gen_config_from(config)
    out = resolve_path(config, config["dataset"]["dir"])
    manifest = generate_dataset(gen, out)
    print(f"wrote {len(manifest.samples)} samples")
    print(f"manifest: {manifest.path}")
    return EXIT_OK


def cmd_train(config: dict, args) -> int:
    samples = _manifest_samples(config)
    train = _split(samples, "train")
    calib = [s for s in samples if s.split == "calib"]
    encoder = make_encoder(config["encoder"]["kind"], config["seed"])
    vocabulary = vocabulary_from(config)

    features = [encoder.encode(s.image) for s in train]
    labels = np.array(
        [[c in s.gold_concepts for c in CONCEPT_ORDER] for s in train], dtype=np.float64
    )
    losses: list[float] = []
    head = train_mlc(features, labels, hyper_from(config), loss_sink=losses)
    threshold = config["recognizer"]["threshold"]
    if threshold != head.threshold:
        head = replace(head, threshold=threshold)

    prototypes = build_prototypes(
        vocabulary,
        encoder,
        exemplars_per_concept=config["recognizer"]["exemplars_per_concept"],
        seed=config["seed"],
        width=config["dataset"]["width"],
        height=config["dataset"]["height"],
    )
    if calib:
        prototypes = calibrate_thresholds(prototypes, calib, encoder)
    else:
        print("no calib split; zero-shot thresholds left at the 0.5 default")

    art = _artifact_dir(config)
    art.mkdir(parents=True, exist_ok=True)
    save_mlc_head(head, art / "mlc_head.json")
    save_prototypes(prototypes, art / "prototypes.json")
    meta = {
        "fingerprint": config_fingerprint(config),
        "encoder_tag": encoder.tag,
        "n_train": len(train),
        "n_calib": len(calib),
        "initial_loss": losses[0],
        "final_loss": losses[-1],
        "zero_shot_thresholds": {
            c.value: float(prototypes.thresholds[k]) for k, c in enumerate(CONCEPT_ORDER)
        },
        "calibration_warnings": list(prototypes.calibration_warnings),
    }
    (art / "train_meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")

    print(f"final training loss: {losses[-1]:.6f} (initial {losses[0]:.6f})")
    print(
        "calibrated thresholds: "
        + ", ".join(
            f"{c.value}={prototypes.thresholds[k]:.4f}"
            for k, c in enumerate(CONCEPT_ORDER)
        )
    )
    print(f"artifacts: {art}")
    return EXIT_OK


def cmd_diagnose(config: dict, args) -> int:
    image_path = Path(args.image)
    if not image_path.is_file():
        raise FileNotFoundError(f"image not found: {image_path}")
    pipeline = build_pipeline(config)
    image = read_pgm(image_path)
    result = pipeline.run_image(image, sample_id=image_path.stem)

    out = _out_dir(config, args)
    out.mkdir(parents=True, exist_ok=True)
    if result.parsed:
        (out / "report.txt").write_text(
            serialize(result.report, result.trace, "canonical_text")
        )
        (out / "report.json").write_text(serialize(result.report, result.trace, "json"))
        print(serialize(result.report, result.trace, "markdown"))
    else:
        (out / "report.txt").write_text(result.completion.text)
        print(result.completion.text)
    for issue in result.issues:
        print(
            f"issue: {issue.code.value}: {issue.detail} (byte {issue.location})",
            file=sys.stderr,
        )
    return EXIT_OK if result.clean else EXIT_VALIDATION


def cmd_evaluate(config: dict, args) -> int:
    samples = _split(_manifest_samples(config), config["eval"]["split"])
    pipeline = build_pipeline(config)
    out = _out_dir(config, args)
    report = evaluate_run(
        samples,
        pipeline,
        out_dir=out,
        max_workers=config["eval"]["max_workers"],
        fingerprint=config_fingerprint(config),
    )
    print(format_table([("run", report)]), end="")
    print(f"outputs: {out}")
    return EXIT_OK


def cmd_ablate(config: dict, args) -> int:
    samples = _split(_manifest_samples(config), config["eval"]["split"])
    pipeline = build_pipeline(config)
    out = _out_dir(config, args)
    rows = ablation_sweep(
        samples, pipeline, out_dir=out, max_workers=config["eval"]["max_workers"]
    )
    print(format_table(rows), end="")
    print(f"outputs: {out}")
    return EXIT_OK


def cmd_compare(config: dict, args) -> int:
    samples = _split(_manifest_samples(config), config["eval"]["split"])
    encoder = make_encoder(config["encoder"]["kind"], config["seed"])
    vocabulary = vocabulary_from(config)
    prototypes = _load_protos(config, encoder, required=True)
    head = _load_head(config, encoder)
    pipeline = build_pipeline(config)
    out = _out_dir(config, args)
    rows = recognizer_comparison(
        samples,
        pipeline,
        ZeroShotRecognizer(prototypes, vocabulary),
        MlcRecognizer(head, vocabulary),
        out_dir=out,
        max_workers=config["eval"]["max_workers"],
    )
    print(format_table(rows), end="")
    print(f"outputs: {out}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "diagnose": cmd_diagnose,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "compare": cmd_compare,
}


def entrypoint(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(Path(args.config), args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return _COMMANDS[args.command](config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ManifestError, ArtifactError, BackendError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(entrypoint())


if __name__ == "__main__":
    main()
