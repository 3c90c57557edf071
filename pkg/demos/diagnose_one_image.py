"""Walk one image through the whole pipeline, showing every artifact.

An image is encoded, concepts are detected, a prompt is assembled from
the concept descriptions plus the aligned-feature digest, the mock
backend writes a structured report, and the parser turns that text back
into a typed report that validates against the concept vocabulary.
"""

import numpy as np

from xraycot import (
    CONCEPT_ORDER,
    BackendConfig,
    DiagnosisPipeline,
    GenConfig,
    MlcHyper,
    MlcRecognizer,
    RegionStatsEncoder,
    serialize,
    train_mlc,
)
from xraycot.dataset import make_sample

config = GenConfig(n_per_split={"train": 200, "test": 10}, seed=23, noise_sigma=8.0)
encoder = RegionStatsEncoder()

train = [make_sample(config, "train", i) for i in range(200)]
labels = np.array(
    [[c in s.gold_concepts for c in CONCEPT_ORDER] for s in train], dtype=np.float64
)
head = train_mlc([encoder.encode(s.image) for s in train], labels, MlcHyper(epochs=500))

pipeline = DiagnosisPipeline(
    encoder=encoder,
    recognizer=MlcRecognizer(head),
    backend=BackendConfig(kind="mock"),
)
sample = make_sample(config, "test", 2)
print(f"sample {sample.sample_id}")
print("gold concepts: ", sorted(c.value for c in sample.gold_concepts) or "(none)")
print("gold diagnosis:", sample.gold_disease.value)

result = pipeline.run_sample(sample)
print("\ndetected findings:")
for finding in result.findings:
    print(f"  {finding.concept.value:30s} score {finding.score:.3f}")

print("\n--- prompt (user message) " + "-" * 34)
print(result.request.user_content())
print("\n--- raw model output " + "-" * 39)
print(result.completion.text, end="")
print("--- parsed " + "-" * 49)
print("predicted class:", result.predicted_class)
print("validation issues:", list(result.issues) or "none")
print("\n--- markdown rendering " + "-" * 37)
print(serialize(result.report, result.trace, "markdown"))
