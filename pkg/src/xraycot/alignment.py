"""Shared-space projection of visual and concept embeddings.

The fusion mechanism is a frozen seeded-random linear projection. Nothing
downstream trains against it; the mock backend ignores the result, and the
remote backend can receive a digest of it in the prompt.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .concepts import ConceptFinding, PrototypeSet
from .dataset import CONCEPT_ORDER, ConceptId
from .encoder import VisualEmbedding, config_hash
from .prng import SplitMix64, derive_seed

D_A_DEFAULT = 32


@dataclass(frozen=True)
class AlignedRepresentation:
    visual_proj: np.ndarray  # (d_a,)
    concept_embs: tuple[tuple[ConceptId, np.ndarray], ...]  # findings order
    d_a: int
    provenance: str  # mechanism and seed, e.g. "linear-projection/abc123"

    def __post_init__(self):
        if self.visual_proj.shape != (self.d_a,):
            raise ValueError("visual projection has wrong dimensionality")
        if not np.all(np.isfinite(self.visual_proj)):
            raise ValueError("visual projection contains non-finite values")
        for concept, vec in self.concept_embs:
            if vec.shape != (self.d_a,):
                raise ValueError(f"concept embedding for {concept.value} has wrong shape")
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"non-finite concept embedding for {concept.value}")


def make_projection(seed: int, d_a: int, d_v: int, purpose: str) -> np.ndarray:
    """Frozen uniform[-0.05, 0.05] projection matrix (d_a, d_v)."""
    rng = SplitMix64(derive_seed(seed, "align-projection", purpose))
    return rng.uniform_array((d_a, d_v), -0.05, 0.05)


def embed_concepts(
    findings: list[ConceptFinding],
    prototypes: PrototypeSet,
    projection: np.ndarray,
) -> list[tuple[ConceptId, np.ndarray]]:
    """Project each finding's prototype into the shared space, order kept."""
    d_a, d_v = projection.shape
    if prototypes.dim != d_v:
        raise ValueError(f"projection expects D_v={d_v}, prototypes have {prototypes.dim}")
    concept_index = {c: k for k, c in enumerate(CONCEPT_ORDER)}
    out = []
    for finding in findings:
        if finding.concept not in concept_index:
            raise ValueError(f"no prototype for concept {finding.concept.value!r}")
        vec = projection @ prototypes.prototypes[concept_index[finding.concept]]
        out.append((finding.concept, vec))
    return out


def align(
    f_img: VisualEmbedding,
    concept_embs: list[tuple[ConceptId, np.ndarray]],
    projection_v: np.ndarray,
    seed: int = 0,
) -> AlignedRepresentation:
    d_a, d_v = projection_v.shape
    if f_img.dim != d_v:
        raise ValueError(f"projection expects D_v={d_v}, embedding has {f_img.dim}")
    tag = config_hash({"mechanism": "linear-projection", "seed": seed, "d_a": d_a})
    return AlignedRepresentation(
        visual_proj=projection_v @ f_img.values,
        concept_embs=tuple((c, np.asarray(v)) for c, v in concept_embs),
        d_a=d_a,
        provenance=f"linear-projection/{tag}",
    )


class Aligner:
    """Holds the frozen projections for one (seed, d_a, d_v) configuration."""

    def __init__(self, seed: int, d_v: int, d_a: int = D_A_DEFAULT):
        self.seed = seed
        self.d_a = d_a
        self.projection_v = make_projection(seed, d_a, d_v, "visual")
        self.projection_c = make_projection(seed, d_a, d_v, "concept")

    def run(
        self,
        f_img: VisualEmbedding,
        findings: list[ConceptFinding],
        prototypes: PrototypeSet | None,
    ) -> AlignedRepresentation:
        concept_embs = (
            embed_concepts(findings, prototypes, self.projection_c) if prototypes else []
        )
        return align(f_img, concept_embs, self.projection_v, seed=self.seed)
