"""Train both concept recognizers and save their artifacts.

The supervised route fits a per-concept sigmoid head on region-stats
embeddings by full-batch gradient descent. The zero-shot route never
sees the training labels: it embeds clean single-concept exemplar
images into unit-norm prototypes and only borrows the calibration split
to place a cosine threshold per concept.
"""

from pathlib import Path

import numpy as np

from xraycot import (
    CONCEPT_ORDER,
    DEFAULT_VOCABULARY,
    GenConfig,
    MlcHyper,
    RegionStatsEncoder,
    build_prototypes,
    calibrate_thresholds,
    generate_dataset,
    save_mlc_head,
    save_prototypes,
    train_mlc,
)

root = Path(__file__).parent / "demo_runs" / "recognizers"
config = GenConfig(n_per_split={"train": 400, "calib": 100}, seed=11, noise_sigma=8.0)
manifest = generate_dataset(config, root / "data")
train = [s for s in manifest.samples if s.split == "train"]
calib = [s for s in manifest.samples if s.split == "calib"]
encoder = RegionStatsEncoder()

features = [encoder.encode(s.image) for s in train]
labels = np.array(
    [[c in s.gold_concepts for c in CONCEPT_ORDER] for s in train], dtype=np.float64
)
losses: list[float] = []
head = train_mlc(features, labels, MlcHyper(epochs=500), loss_sink=losses)
print(f"trained sigmoid head on {len(train)} samples ({encoder.tag})")
print(f"loss {losses[0]:.4f} -> {losses[-1]:.4f} over {len(losses) - 1} epochs")

protos = build_prototypes(DEFAULT_VOCABULARY, encoder, exemplars_per_concept=16)
protos = calibrate_thresholds(protos, calib, encoder)
print(f"\nprototypes from 16 clean exemplars per concept, thresholds from {len(calib)} calib samples:")
for concept, threshold in zip(CONCEPT_ORDER, protos.thresholds):
    print(f"  {concept.value:30s} cosine > {threshold:.4f}")
for note in protos.calibration_warnings:
    print("  note:", note)

artifacts = root / "artifacts"
artifacts.mkdir(parents=True, exist_ok=True)
save_mlc_head(head, artifacts / "mlc_head.json")
save_prototypes(protos, artifacts / "prototypes.json")
print(f"\nsaved {artifacts / 'mlc_head.json'}")
print(f"saved {artifacts / 'prototypes.json'}")
