"""Synthetic concept-annotated chest-image dataset.

Each sample is a small grayscale image with geometric primitives planted
for a known set of visual concepts, plus a disease label derived from the
concepts by a fixed priority rule table. Because the label is a pure
function of the planted concepts, end-to-end pipeline correctness is
decidable against this ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .prng import SplitMix64, derive_seed

MIN_SIDE = 16
BACKGROUND = 40


class ConceptId(str, Enum):
    """Closed vocabulary of visual concepts, in canonical order."""

    RIGHT_LOWER_LOBE_OPACITY = "right_lower_lobe_opacity"
    LEFT_LOWER_LOBE_OPACITY = "left_lower_lobe_opacity"
    BILATERAL_PERIHILAR_OPACITY = "bilateral_perihilar_opacity"
    INCREASED_LUNG_MARKINGS = "increased_lung_markings"
    ELEVATED_DIAPHRAGM = "elevated_diaphragm"
    ENLARGED_CARDIAC_SILHOUETTE = "enlarged_cardiac_silhouette"
    BLUNTED_COSTOPHRENIC_ANGLE = "blunted_costophrenic_angle"
    PULMONARY_NODULE = "pulmonary_nodule"


CONCEPT_ORDER: tuple[ConceptId, ...] = tuple(ConceptId)


class DiseaseLabel(str, Enum):
    CONGESTIVE_HEART_FAILURE = "congestive_heart_failure"
    PNEUMONIA = "pneumonia"
    CARDIOMEGALY = "cardiomegaly"
    NORMAL = "normal"


@dataclass(frozen=True)
class Image:
    """Row-major 8-bit grayscale image."""

    pixels: np.ndarray  # (height, width) uint8

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise ValueError("image pixels must be a 2-D array")
        if self.pixels.dtype != np.uint8:
            raise ValueError("image pixels must be uint8")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class Sample:
    image: Image
    gold_concepts: frozenset[ConceptId]
    gold_disease: DiseaseLabel
    sample_id: str
    split: str  # train | calib | test


@dataclass(frozen=True)
class GenConfig:
    n_per_split: dict[str, int]
    seed: int
    noise_sigma: float = 8.0
    concept_prior: float | dict[str, float] = 0.25
    width: int = 64
    height: int = 64

    def __post_init__(self):
        for split, n in self.n_per_split.items():
            if split not in ("train", "calib", "test"):
                raise ValueError(f"unknown split {split!r}")
            if n < 0:
                raise ValueError(f"negative count for split {split!r}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.width < MIN_SIDE or self.height < MIN_SIDE:
            raise ValueError(f"image sides must be >= {MIN_SIDE}")
        for p in self.priors():
            if not 0.0 <= p <= 1.0:
                raise ValueError("concept priors must lie in [0, 1]")

    def priors(self) -> np.ndarray:
        """Per-concept inclusion probability in canonical order."""
        if isinstance(self.concept_prior, dict):
            return np.array([self.concept_prior.get(c.value, 0.0) for c in CONCEPT_ORDER])
        return np.full(len(CONCEPT_ORDER), float(self.concept_prior))


@dataclass(frozen=True)
class Manifest:
    path: Path
    samples: tuple[Sample, ...]


class ManifestError(ValueError):
    """Manifest file is malformed or inconsistent with the rule table."""


# ---------------------------------------------------------------------------
# concept geometry
# ---------------------------------------------------------------------------

# Primitive interiors are bright (>= 160) against the 40 background, and the
# designated regions below are pairwise disjoint across supported sizes, so
# a per-region mean detector recovers planted concepts exactly at sigma=0.
# Sizes are also tuned so each primitive moves the region-stats embedding by
# an amount comparable to the background's contribution, which keeps the
# prototype-cosine recognizer separable on noise-free data.
_INTENSITY = {
    ConceptId.RIGHT_LOWER_LOBE_OPACITY: 230,
    ConceptId.LEFT_LOWER_LOBE_OPACITY: 230,
    ConceptId.BILATERAL_PERIHILAR_OPACITY: 230,
    ConceptId.INCREASED_LUNG_MARKINGS: 220,
    ConceptId.ELEVATED_DIAPHRAGM: 235,
    ConceptId.ENLARGED_CARDIAC_SILHOUETTE: 230,
    ConceptId.BLUNTED_COSTOPHRENIC_ANGLE: 240,
    ConceptId.PULMONARY_NODULE: 255,
}


def _disk_mask(w: int, h: int, cx: int, cy: int, r: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r


def _ellipse_mask(w: int, h: int, cx: int, cy: int, a: int, b: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return (xx - cx) ** 2 * b * b + (yy - cy) ** 2 * a * a <= a * a * b * b


def nodule_radius(width: int, height: int) -> int:
    return max(1, round(0.047 * min(width, height)))


def _nodule_nominal_center(w: int, h: int) -> tuple[int, int]:
    return round(0.85 * w), round(0.14 * h)


def concept_region_masks(width: int = 64, height: int = 64) -> dict[ConceptId, np.ndarray]:
    """Designated boolean region per concept (the self-test detector zones).

    For the nodule the region is the fixed box that contains every seeded
    placement; for all other concepts it equals the primitive itself.
    """
    w, h = width, height
    if w < MIN_SIDE or h < MIN_SIDE:
        raise ValueError(f"image sides must be >= {MIN_SIDE}")
    s = min(w, h)
    masks: dict[ConceptId, np.ndarray] = {}

    r_lobe = round(0.11 * s)
    masks[ConceptId.RIGHT_LOWER_LOBE_OPACITY] = _disk_mask(
        w, h, round(0.78 * w), round(0.60 * h), r_lobe
    )
    masks[ConceptId.LEFT_LOWER_LOBE_OPACITY] = _disk_mask(
        w, h, round(0.22 * w), round(0.60 * h), r_lobe
    )

    r_hilar = round(0.095 * s)
    hilar = _disk_mask(w, h, round(0.33 * w), round(0.38 * h), r_hilar)
    hilar |= _disk_mask(w, h, round(0.67 * w), round(0.38 * h), r_hilar)
    masks[ConceptId.BILATERAL_PERIHILAR_OPACITY] = hilar

    stripes = np.zeros((h, w), dtype=bool)
    thick = max(1, round(h / 21))
    x0, x1 = round(0.06 * w), round(0.55 * w)
    for fy in (0.08, 0.145, 0.21):
        y = round(fy * h)
        stripes[y : y + thick, x0 : x1 + 1] = True
    masks[ConceptId.INCREASED_LUNG_MARKINGS] = stripes

    band = np.zeros((h, w), dtype=bool)
    y0 = round(0.67 * h)
    band[y0 : y0 + max(1, round(h / 13)), round(0.36 * w) : round(0.64 * w) + 1] = True
    masks[ConceptId.ELEVATED_DIAPHRAGM] = band

    masks[ConceptId.ENLARGED_CARDIAC_SILHOUETTE] = _ellipse_mask(
        w, h, round(0.5 * w), round(0.86 * h), round(0.19 * w), round(0.11 * h)
    )

    yy, xx = np.mgrid[0:h, 0:w]
    legs = round(0.22 * s)
    wedges = (xx + (h - 1 - yy)) <= legs
    wedges |= ((w - 1 - xx) + (h - 1 - yy)) <= legs
    masks[ConceptId.BLUNTED_COSTOPHRENIC_ANGLE] = wedges

    # Box half-width equals the disk radius: a jittered disk may poke a pixel
    # or two outside, but the box mean stays far above the detector threshold
    # and the overspill is covered by the disjointness margin to other regions.
    nx, ny = _nodule_nominal_center(w, h)
    half = nodule_radius(w, h)
    box = np.zeros((h, w), dtype=bool)
    box[max(0, ny - half) : ny + half + 1, max(0, nx - half) : nx + half + 1] = True
    masks[ConceptId.PULMONARY_NODULE] = box

    return masks


def nodule_extent_mask(width: int, height: int) -> np.ndarray:
    """Every pixel any seeded nodule placement can brighten (jitter + radius)."""
    nx, ny = _nodule_nominal_center(width, height)
    half = nodule_radius(width, height) + 1
    box = np.zeros((height, width), dtype=bool)
    box[max(0, ny - half) : ny + half + 1, max(0, nx - half) : nx + half + 1] = True
    return box


def plant_concepts(
    width: int,
    height: int,
    concepts: set[ConceptId] | frozenset[ConceptId],
    seed: int,
    noise_sigma: float,
) -> Image:
    """Render one geometric primitive per concept over a flat background.

    Background intensity is 40; primitive interiors are their fixed bright
    intensities before additive zero-mean gaussian noise (clipped to
    [0, 255]). The nodule center is jittered by the seed; everything is a
    pure function of the arguments.
    """
    if width < MIN_SIDE or height < MIN_SIDE:
        raise ValueError(f"image sides must be >= {MIN_SIDE}, got {width}x{height}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")

    canvas = np.full((height, width), float(BACKGROUND))
    regions = concept_region_masks(width, height)
    for concept in CONCEPT_ORDER:
        if concept not in concepts:
            continue
        if concept is ConceptId.PULMONARY_NODULE:
            jitter = SplitMix64(derive_seed(seed, "nodule"))
            nx, ny = _nodule_nominal_center(width, height)
            cx = nx + jitter.next_below(3) - 1
            cy = ny + jitter.next_below(3) - 1
            mask = _disk_mask(width, height, cx, cy, nodule_radius(width, height))
        else:
            mask = regions[concept]
        canvas[mask] = np.maximum(canvas[mask], _INTENSITY[concept])

    if noise_sigma > 0:
        noise = SplitMix64(derive_seed(seed, "noise")).normal_array(
            (height, width), sigma=noise_sigma
        )
        canvas = canvas + noise
    pixels = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    return Image(pixels)


# ---------------------------------------------------------------------------
# concept -> disease rule table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DiagnosisRule:
    name: str
    label: DiseaseLabel
    trigger: frozenset[ConceptId]
    any_of: bool = False  # trigger matches on any member instead of all

    def matches(self, concepts: frozenset[ConceptId]) -> bool:
        if not self.trigger:
            return True
        if self.any_of:
            return bool(self.trigger & concepts)
        return self.trigger <= concepts

    def matched_concepts(self, concepts: frozenset[ConceptId]) -> tuple[ConceptId, ...]:
        hit = self.trigger & concepts if self.any_of else self.trigger
        return tuple(c for c in CONCEPT_ORDER if c in hit)


RULES: tuple[DiagnosisRule, ...] = (
    DiagnosisRule(
        "R1",
        DiseaseLabel.CONGESTIVE_HEART_FAILURE,
        frozenset(
            {ConceptId.BILATERAL_PERIHILAR_OPACITY, ConceptId.BLUNTED_COSTOPHRENIC_ANGLE}
        ),
    ),
    DiagnosisRule(
        "R2",
        DiseaseLabel.PNEUMONIA,
        frozenset({ConceptId.RIGHT_LOWER_LOBE_OPACITY, ConceptId.LEFT_LOWER_LOBE_OPACITY}),
        any_of=True,
    ),
    DiagnosisRule(
        "R3",
        DiseaseLabel.CARDIOMEGALY,
        frozenset({ConceptId.ENLARGED_CARDIAC_SILHOUETTE}),
    ),
    DiagnosisRule("R4", DiseaseLabel.NORMAL, frozenset()),
)


def fired_rule(concepts: set[ConceptId] | frozenset[ConceptId]) -> DiagnosisRule:
    """First matching rule in priority order (total: R4 always matches)."""
    concepts = frozenset(concepts)
    for rule in RULES:
        if rule.matches(concepts):
            return rule
    raise AssertionError("rule table is total; unreachable")


def disease_from_concepts(concepts: set[ConceptId] | frozenset[ConceptId]) -> DiseaseLabel:
    return fired_rule(concepts).label


# ---------------------------------------------------------------------------
# PGM io
# ---------------------------------------------------------------------------


def write_pgm(image: Image, path: Path) -> None:
    header = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    path.write_bytes(header + image.pixels.tobytes())


def read_pgm(path: Path) -> Image:
    data = path.read_bytes()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (missing P5 magic)")
    # header = magic, width, height, maxval as whitespace-separated tokens,
    # with optional '#' comment lines
    tokens: list[bytes] = []
    i = 2
    while len(tokens) < 3 and i < len(data):
        c = data[i : i + 1]
        if c == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
    if len(tokens) < 3:
        raise ValueError(f"{path}: truncated PGM header")
    width, height, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: expected maxval 255, got {maxval}")
    i += 1  # single whitespace byte after maxval
    raster = data[i : i + width * height]
    if len(raster) != width * height:
        raise ValueError(f"{path}: raster has {len(raster)} bytes, expected {width * height}")
    return Image(np.frombuffer(raster, dtype=np.uint8).reshape(height, width))


# ---------------------------------------------------------------------------
# generation and loading
# ---------------------------------------------------------------------------

_SPLITS = ("train", "calib", "test")


def _draw_concepts(config: GenConfig, sample_id: str) -> frozenset[ConceptId]:
    rng = SplitMix64(derive_seed(config.seed, "sample-concepts", sample_id))
    priors = config.priors()
    chosen = []
    for k, concept in enumerate(CONCEPT_ORDER):
        u = rng.uniform()
        if u < priors[k]:
            chosen.append(concept)
    return frozenset(chosen)


def make_sample(config: GenConfig, split: str, index: int) -> Sample:
    """Build one sample; all randomness derives from (config.seed, sample_id)."""
    sample_id = f"{split}-{index:04d}"
    concepts = _draw_concepts(config, sample_id)
    image = plant_concepts(
        config.width,
        config.height,
        concepts,
        derive_seed(config.seed, "sample-plant", sample_id),
        config.noise_sigma,
    )
    return Sample(
        image=image,
        gold_concepts=concepts,
        gold_disease=disease_from_concepts(concepts),
        sample_id=sample_id,
        split=split,
    )


def generate_dataset(config: GenConfig, out_dir: Path) -> Manifest:
    """Write PGM images plus a JSONL manifest; pure function of the config."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)

    samples: list[Sample] = []
    lines: list[str] = []
    for split in _SPLITS:
        for i in range(config.n_per_split.get(split, 0)):
            sample = make_sample(config, split, i)
            rel = f"images/{sample.sample_id}.pgm"
            write_pgm(sample.image, out_dir / rel)
            record = {
                "sample_id": sample.sample_id,
                "image_path": rel,
                "split": split,
                "gold_concepts": [c.value for c in CONCEPT_ORDER if c in sample.gold_concepts],
                "gold_disease": sample.gold_disease.value,
            }
            lines.append(json.dumps(record))
            samples.append(sample)

    manifest_path = out_dir / "manifest.jsonl"
    manifest_path.write_text("".join(line + "\n" for line in lines))
    return Manifest(path=manifest_path, samples=tuple(samples))


def load_manifest(path: Path) -> list[Sample]:
    """Load samples in file order, re-checking the rule-table invariant."""
    path = Path(path)
    base = path.parent
    samples: list[Sample] = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            sample_id = record["sample_id"]
            split = record["split"]
            concepts = frozenset(ConceptId(c) for c in record["gold_concepts"])
            disease = DiseaseLabel(record["gold_disease"])
            image_rel = record["image_path"]
        except (ValueError, KeyError, TypeError) as exc:
            raise ManifestError(f"{path}:{lineno}: malformed manifest line: {exc}") from exc
        if sample_id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate sample_id {sample_id!r}")
        seen.add(sample_id)
        if disease_from_concepts(concepts) != disease:
            raise ManifestError(
                f"{path}:{lineno}: sample {sample_id!r} violates the rule table: "
                f"gold_disease={disease.value!r} but concepts imply "
                f"{disease_from_concepts(concepts).value!r}"
            )
        image_path = base / image_rel
        if not image_path.is_file():
            raise ManifestError(f"{path}:{lineno}: missing image file {image_path}")
        samples.append(
            Sample(
                image=read_pgm(image_path),
                gold_concepts=concepts,
                gold_disease=disease,
                sample_id=sample_id,
                split=split,
            )
        )
    return samples
