"""Paired training-data synthesis: paint a mask-shaped occluder over a clean
face, anchored to its landmarks, and keep the exact binary map of the painted
region. Also owns the dataset manifest format and the gender split.

Generation is deterministic: every entry derives its own RNG from
(dataset seed, entry index), so parallel generation cannot reorder results.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError, ShapeMismatchError, TemplateError
from .imaging import BinaryMask, ImageTensor, load_image, save_image
from .landmarks import LandmarkSet, load_landmarks, save_landmarks
from .segmentation import PolygonAnnotation, polygon_to_mask

GENDERS = ("male", "female")

# Lower-face outline over the 98-point layout: jaw arc (0..32, chin at 16)
# plus a nose-bridge point to close the polygon over the nose.
DEFAULT_ANCHORS = (5, 8, 11, 14, 16, 18, 21, 24, 27, 53)

TEXTURES = ("two_tone", "stripes")


@dataclass(frozen=True)
class MaskTemplate:
    """One synthetic occluder style: outline anchors, fill, vertex jitter."""

    name: str
    anchor_indices: tuple = DEFAULT_ANCHORS
    fill: tuple | str = (0.65, 0.8, 0.9)
    jitter: float = 3.0  # max per-vertex offset in px at 256 resolution

    def __post_init__(self):
        if len(self.anchor_indices) < 4:
            raise TemplateError("a template needs at least 4 anchor indices")
        if isinstance(self.fill, str):
            if self.fill not in TEXTURES:
                raise TemplateError(f"unknown texture id {self.fill!r}")
        else:
            vals = tuple(self.fill)
            if len(vals) != 3 or min(vals) < 0.0 or max(vals) > 1.0:
                raise TemplateError("fill color must be 3 values in [0, 1]")
        if self.jitter < 0:
            raise TemplateError("jitter must be >= 0")


DEFAULT_TEMPLATES = (
    MaskTemplate("surgical_blue", fill=(0.65, 0.8, 0.9)),
    MaskTemplate("cloth_dark", fill=(0.2, 0.2, 0.25)),
    MaskTemplate("n95_white", fill="two_tone"),
    MaskTemplate("striped", fill="stripes"),
    MaskTemplate("plain_black", fill=(0.05, 0.05, 0.05)),
)


@dataclass(frozen=True)
class SyntheticPair:
    """A clean face, its masked twin, and the exact map of painted pixels."""

    clean: ImageTensor
    masked: ImageTensor
    segmap: BinaryMask
    landmarks: LandmarkSet
    gender: str | None = None

    def __post_init__(self):
        if self.clean.data.shape != self.masked.data.shape:
            raise ShapeMismatchError("clean and masked images differ in shape")
        if self.clean.data.shape[:2] != self.segmap.data.shape:
            raise ShapeMismatchError("segmap does not match the image size")
        if self.gender is not None and self.gender not in GENDERS:
            raise DatasetError(f"gender must be one of {GENDERS}, got {self.gender!r}")
        outside = self.segmap.data == 0
        if not np.array_equal(self.masked.data[outside], self.clean.data[outside]):
            raise DatasetError("masked image differs from clean outside the segmap")


@dataclass(frozen=True)
class ManifestEntry:
    clean: str
    masked: str
    segmap: str
    landmarks: str
    gender: str | None = None


@dataclass
class Manifest:
    entries: list
    seed: int
    warnings: list = field(default_factory=list)

    def filter_gender(self, gender: str) -> "Manifest":
        return Manifest([e for e in self.entries if e.gender == gender],
                        self.seed, list(self.warnings))


def save_manifest(manifest: Manifest, path) -> None:
    """Line-delimited JSON: a meta record followed by one record per entry."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"kind": "meta", "seed": manifest.seed,
                             "warnings": manifest.warnings}) + "\n")
        for e in manifest.entries:
            fh.write(json.dumps({"kind": "entry", "clean": e.clean, "masked": e.masked,
                                 "segmap": e.segmap, "landmarks": e.landmarks,
                                 "gender": e.gender}) + "\n")


def load_manifest(path) -> Manifest:
    entries = []
    seed = 0
    warnings = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("kind") == "meta":
                seed = rec.get("seed", 0)
                warnings = rec.get("warnings", [])
            else:
                entries.append(ManifestEntry(rec["clean"], rec["masked"], rec["segmap"],
                                             rec["landmarks"], rec.get("gender")))
    return Manifest(entries, seed, warnings)


def _texture_fill(texture: str, size: int) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size]
    img = np.zeros((size, size, 3), dtype=np.float32)
    if texture == "two_tone":
        band = ((y * 8) // size) % 2 == 0
        img[band] = (0.95, 0.95, 0.93)
        img[~band] = (0.82, 0.82, 0.8)
    elif texture == "stripes":
        stripe = ((x + y) * 10 // size) % 2 == 0
        img[stripe] = (0.75, 0.2, 0.25)
        img[~stripe] = (0.9, 0.85, 0.75)
    else:
        raise TemplateError(f"unknown texture id {texture!r}")
    return img


def _polygon_area(verts: np.ndarray) -> float:
    x, y = verts[:, 0], verts[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def apply_mask_template(clean: ImageTensor, landmarks: LandmarkSet,
                        template: MaskTemplate, seed: int,
                        gender: str | None = None) -> SyntheticPair:
    """Paint one synthetic occluder over a clean face.

    The outline is the template's anchor landmarks, each vertex perturbed by
    a seed-deterministic jitter; the painted region is returned as the exact
    segmentation map.
    """
    if clean.height != clean.width:
        raise ShapeMismatchError("mask synthesis expects square images")
    size = clean.height
    rng = np.random.default_rng(seed)
    verts = landmarks.points[list(template.anchor_indices)] * size
    if template.jitter > 0:
        verts = verts + rng.uniform(-template.jitter, template.jitter,
                                    size=verts.shape) * (size / 256.0)
    verts = np.clip(verts, 0.0, size)
    if _polygon_area(verts) == 0.0:
        raise TemplateError(f"template {template.name!r}: anchors are degenerate")
    segmap = polygon_to_mask(PolygonAnnotation(verts, size), size)
    if segmap.mask_pixel_count == 0:
        raise TemplateError(f"template {template.name!r}: empty mask region")
    if segmap.mask_pixel_count >= 0.6 * size * size:
        raise TemplateError(f"template {template.name!r}: mask covers >= 60% of the frame")
    if isinstance(template.fill, str):
        fill = _texture_fill(template.fill, size)
    else:
        fill = np.broadcast_to(np.asarray(template.fill, dtype=np.float32),
                               (size, size, 3)).copy()
    clean_data = clean.data.astype(np.float32)
    masked = np.where(segmap.data.astype(bool)[:, :, None], fill, clean_data)
    return SyntheticPair(ImageTensor(clean_data), ImageTensor(masked),
                         segmap, landmarks, gender)


def template_draws(seed: int, count: int, num_templates: int) -> np.ndarray:
    """The template index assigned to each entry, one uniform draw per entry."""
    return np.array([_entry_rng(seed, i).integers(num_templates)
                     for i in range(count)])


def _entry_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng((seed, index))


def generate_dataset(image_dir, landmark_dir, templates, seed: int, out_dir,
                     image_size: int = 256, labels: dict | None = None) -> Manifest:
    """Build one synthetic pair per clean image and persist the dataset.

    Layout: out_dir/{clean,masked,segmap,landmarks}/NNNN.{png,txt} plus
    out_dir/manifest.jsonl. Images missing their landmark file are skipped
    with a warning recorded in the manifest.
    """
    image_dir = Path(image_dir)
    landmark_dir = Path(landmark_dir)
    out_dir = Path(out_dir)
    if not templates:
        raise DatasetError("no templates given")
    paths = sorted(p for p in image_dir.iterdir()
                   if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    for sub in ("clean", "masked", "segmap", "landmarks"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    entries = []
    warnings = []
    for index, img_path in enumerate(paths):
        lm_path = landmark_dir / (img_path.stem + ".txt")
        if not lm_path.exists():
            warnings.append(f"{img_path.name}: no landmark file, skipped")
            continue
        rng = _entry_rng(seed, index)
        tpl = templates[int(rng.integers(len(templates)))]
        jitter_seed = int(rng.integers(2 ** 63))
        clean = load_image(img_path, image_size)
        lms = load_landmarks(lm_path)
        gender = labels.get(img_path.stem) if labels else None
        pair = apply_mask_template(clean, lms, tpl, jitter_seed, gender)

        stem = f"{len(entries):04d}"
        files = {
            "clean": out_dir / "clean" / f"{stem}.png",
            "masked": out_dir / "masked" / f"{stem}.png",
            "segmap": out_dir / "segmap" / f"{stem}.png",
            "landmarks": out_dir / "landmarks" / f"{stem}.txt",
        }
        save_image(pair.clean, files["clean"])
        save_image(pair.masked, files["masked"])
        Image.fromarray((pair.segmap.data * 255).astype(np.uint8)).save(files["segmap"])
        save_landmarks(lms, files["landmarks"])
        entries.append(ManifestEntry(str(files["clean"]), str(files["masked"]),
                                     str(files["segmap"]), str(files["landmarks"]),
                                     gender))
    if not entries:
        raise DatasetError(f"no usable images under {image_dir}")
    manifest = Manifest(entries, seed, warnings)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def load_segmap(path) -> BinaryMask:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32)
    return BinaryMask((arr >= 128).astype(np.float32))


def load_entry(entry: ManifestEntry, image_size: int) -> SyntheticPair:
    """Materialize a manifest entry; the segmap must match image_size."""
    clean = load_image(entry.clean, image_size)
    masked = load_image(entry.masked, image_size)
    segmap = load_segmap(entry.segmap)
    if segmap.data.shape != (image_size, image_size):
        raise ShapeMismatchError(
            f"segmap {entry.segmap} is {segmap.data.shape}, expected {image_size}")
    return SyntheticPair(clean, masked, segmap, load_landmarks(entry.landmarks),
                         entry.gender)


def split_by_gender(manifest: Manifest, classifier=None):
    """Partition entries into (male, female) manifests.

    A pre-existing gender label wins; unlabeled entries are routed by the
    classifier callable (masked-image path -> probability of male) with the
    p >= 0.5 -> male convention.
    """
    male, female = [], []
    for e in manifest.entries:
        gender = e.gender
        if gender is None:
            if classifier is None:
                raise DatasetError(f"entry {e.masked} has no label and no "
                                   "classifier was given")
            gender = "male" if classifier(e.masked) >= 0.5 else "female"
        (male if gender == "male" else female).append(
            ManifestEntry(e.clean, e.masked, e.segmap, e.landmarks, gender))
    return (Manifest(male, manifest.seed, list(manifest.warnings)),
            Manifest(female, manifest.seed, list(manifest.warnings)))
