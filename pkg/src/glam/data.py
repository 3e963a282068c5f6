"""Patch ingestion, split manifests, species profiles and a synthetic lesion generator.

On-disk layout::

    <root>/<species>/<class_name>/<id>_img.png   8-bit RGB
    <root>/<species>/<class_name>/<id>_mask.png  8-bit, foreground = 255

Every record annotates exactly one lesion class. A physical patch showing two
lesion types is stored twice, once per class.
"""

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import DataError, ValidationError
from .validation import check_class_id, check_image, check_mask, check_spacing

CLASS_NAMES = ("GS", "HN", "ML", "MA", "NS", "SS")
SPECIES = ("mouse", "human")
SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.7, 0.1, 0.2)


@dataclass(frozen=True)
class SpeciesProfile:
    """Scanner geometry for one species.

    ``spacing_um`` is the pixel size after resizing from ``capture_size`` to
    ``working_size``.
    """

    name: str
    magnification: float
    capture_spacing_um: float
    capture_size: int = 1024
    working_size: int = 512

    def __post_init__(self):
        if self.name not in SPECIES:
            raise ValidationError(f"unknown species {self.name!r}; expected one of {SPECIES}")
        if self.magnification <= 0 or self.capture_size < 1 or self.working_size < 1:
            raise ValidationError("magnification and sizes must be positive")
        check_spacing(self.capture_spacing_um)

    @property
    def spacing_um(self):
        return self.capture_spacing_um * self.capture_size / self.working_size


DEFAULT_PROFILES = {
    "human": SpeciesProfile("human", magnification=40, capture_spacing_um=0.25),
    "mouse": SpeciesProfile("mouse", magnification=80, capture_spacing_um=0.125),
}


@dataclass
class LabeledPatch:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    class_id: int
    species: str
    spacing_um: float
    path: str = ""

    def __post_init__(self):
        self.image = check_image(self.image)
        self.mask = check_mask(self.mask, allow_empty=False)
        if self.image.shape[:2] != self.mask.shape:
            raise ValidationError(f"image {self.image.shape[:2]} and mask {self.mask.shape} differ in size")
        if self.species not in SPECIES:
            raise ValidationError(f"unknown species {self.species!r}")
        self.spacing_um = check_spacing(self.spacing_um)
        self.class_id = int(self.class_id)

    @property
    def size(self):
        return self.mask.shape


# -- PNG io -----------------------------------------------------------------


def read_png(path):
    try:
        with Image.open(path) as im:
            im.load()
            return np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def write_png(path, array):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    # Written through a buffer so identical arrays give identical bytes.
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG", optimize=False)
    path.write_bytes(buf.getvalue())


def image_to_uint8(image):
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def mask_to_uint8(mask):
    return (np.asarray(mask) > 0).astype(np.uint8) * 255


# -- resizing ---------------------------------------------------------------


def resize_image(image, size):
    """Bilinear resize of an (H, W, 3) uint8 image to ``size`` x ``size``."""
    if image.shape[:2] == (size, size):
        return image
    return np.asarray(Image.fromarray(image).resize((size, size), Image.BILINEAR))


def resize_mask(mask, size):
    """Nearest-neighbour resize; never introduces values absent from the input."""
    mask = np.asarray(mask)
    h, w = mask.shape
    if (h, w) == (size, size):
        return mask.copy()
    rows = np.minimum((np.arange(size) + 0.5) * h / size, h - 1).astype(np.intp)
    cols = np.minimum((np.arange(size) + 0.5) * w / size, w - 1).astype(np.intp)
    return mask[np.ix_(rows, cols)]


def _decode_mask(raw, path):
    if raw.ndim == 3:
        if not (raw == raw[..., :1]).all():
            raise ValidationError(f"mask {path} has differing colour channels")
        raw = raw[..., 0]
    values = np.unique(raw)
    if values.size > 2 or (values.size == 2 and values[0] != 0):
        raise ValidationError(f"mask {path} is not two-valued with background 0 (values {values[:8].tolist()})")
    return (raw > 0).astype(np.uint8)


def ingest_patch(image_file, mask_file, class_id, species_profile, num_classes=len(CLASS_NAMES)):
    """Load one image/mask pair and bring it to the profile's working size."""
    profile = species_profile
    check_class_id(class_id, num_classes)
    raw_img = read_png(image_file)
    if raw_img.ndim == 2:
        raw_img = np.stack([raw_img] * 3, axis=-1)
    raw_img = raw_img[..., :3]
    if raw_img.dtype != np.uint8:
        raise ValidationError(f"image {image_file} must be 8-bit")
    mask = _decode_mask(read_png(mask_file), mask_file)
    if raw_img.shape[:2] != mask.shape:
        raise ValidationError(
            f"image {image_file} and mask {mask_file} differ in size: {raw_img.shape[:2]} vs {mask.shape}"
        )
    size = profile.working_size
    img = resize_image(raw_img, size)
    mask = resize_mask(mask, size)
    if not np.isin(mask, (0, 1)).all():
        raise ValidationError(f"mask {mask_file} is not binary after resizing")
    if not mask.any():
        raise ValidationError(f"mask {mask_file} has no foreground pixels")
    return LabeledPatch(
        image=img.astype(np.float32) / 255.0,
        mask=mask,
        class_id=class_id,
        species=profile.name,
        spacing_um=profile.spacing_um,
        path=str(image_file),
    )


def save_patch(patch, image_file, mask_file):
    write_png(image_file, image_to_uint8(patch.image))
    write_png(mask_file, mask_to_uint8(patch.mask))


# -- manifests --------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # image path relative to the dataset root
    class_id: int
    species: str
    split: str

    @property
    def mask_path(self):
        return self.path[: -len("_img.png")] + "_mask.png"


@dataclass
class SplitManifest:
    entries: list
    seed: int = 0
    ratios: tuple = DEFAULT_RATIOS
    class_order: tuple = CLASS_NAMES

    def subset(self, split=None, species=None, class_id=None):
        species = (species,) if isinstance(species, str) else species
        return [
            e
            for e in self.entries
            if (split is None or e.split == split)
            and (species is None or e.species in species)
            and (class_id is None or e.class_id == class_id)
        ]

    def counts(self):
        out = {}
        for e in self.entries:
            key = (e.species, e.class_id)
            out.setdefault(key, dict.fromkeys(SPLITS, 0))[e.split] += 1
        return out

    def to_text(self):
        buf = io.StringIO()
        buf.write(f"# class_order\t{','.join(self.class_order)}\n")
        buf.write(f"# seed\t{self.seed}\n")
        buf.write(f"# ratios\t{','.join(repr(float(r)) for r in self.ratios)}\n")
        writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
        writer.writerow(["path", "class_id", "species", "split"])
        for e in self.entries:
            writer.writerow([e.path, e.class_id, e.species, e.split])
        return buf.getvalue()

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_text().encode("utf-8"))
        return path

    @classmethod
    def read(cls, path):
        meta = {}
        rows = []
        with open(path, encoding="utf-8", newline="") as fh:
            lines = fh.read().splitlines()
        body = []
        for line in lines:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("\t")
                meta[key] = value
            elif line:
                body.append(line)
        reader = csv.DictReader(body, delimiter="\t")
        if reader.fieldnames != ["path", "class_id", "species", "split"]:
            raise DataError(f"manifest {path} has unexpected header {reader.fieldnames}")
        for row in reader:
            if row["split"] not in SPLITS or row["species"] not in SPECIES:
                raise DataError(f"manifest {path}: bad row {row}")
            rows.append(ManifestEntry(row["path"], int(row["class_id"]), row["species"], row["split"]))
        class_order = tuple(meta["class_order"].split(",")) if "class_order" in meta else CLASS_NAMES
        ratios = tuple(float(r) for r in meta["ratios"].split(",")) if "ratios" in meta else DEFAULT_RATIOS
        return cls(rows, seed=int(meta.get("seed", 0)), ratios=ratios, class_order=class_order)


def split_counts(n, ratios):
    """Largest-remainder apportionment of ``n`` items; each count is within one of ``n * ratio``."""
    ratios = np.asarray(ratios, dtype=float)
    if ratios.shape != (3,) or (ratios < 0).any() or not math.isclose(ratios.sum(), 1.0, abs_tol=1e-9):
        raise ValidationError(f"ratios must be three non-negative fractions summing to 1, got {tuple(ratios)}")
    exact = np.round(n * ratios, 9)
    counts = np.floor(exact).astype(int)
    remainder = exact - counts
    for idx in np.argsort(-remainder, kind="stable")[: n - counts.sum()]:
        counts[idx] += 1
    return tuple(int(c) for c in counts)


def scan_dataset(dataset_root, class_order=CLASS_NAMES):
    """Map (species, class_id) to the sorted relative image paths found under ``dataset_root``."""
    root = Path(dataset_root)
    found = {}
    for species in SPECIES:
        sdir = root / species
        if not sdir.is_dir():
            continue
        for class_id, name in enumerate(class_order, start=1):
            cdir = sdir / name
            if not cdir.is_dir():
                continue
            pairs = []
            for img in sorted(cdir.glob("*_img.png")):
                if img.with_name(img.name[: -len("_img.png")] + "_mask.png").exists():
                    pairs.append(img.relative_to(root).as_posix())
            if not pairs:
                raise DataError(f"class directory {species}/{name} has no image/mask pairs")
            found[(species, class_id)] = pairs
    if not found:
        raise DataError(f"no <species>/<class> directories under {root}")
    return found


def build_manifest(dataset_root, ratios=DEFAULT_RATIOS, seed=0, out_path=None, class_order=CLASS_NAMES):
    """Stratified (species, class) split of every pair under ``dataset_root``.

    Writes the manifest to ``out_path`` when given. Identical inputs give a
    byte-identical file.
    """
    found = scan_dataset(dataset_root, class_order)
    entries = []
    for (species, class_id), paths in sorted(found.items(), key=lambda kv: (SPECIES.index(kv[0][0]), kv[0][1])):
        rng = np.random.default_rng([seed, SPECIES.index(species), class_id])
        order = rng.permutation(len(paths))
        n_train, n_val, _ = split_counts(len(paths), ratios)
        labels = ["train"] * n_train + ["val"] * n_val
        labels += ["test"] * (len(paths) - len(labels))
        assigned = {paths[i]: labels[rank] for rank, i in enumerate(order)}
        entries.extend(ManifestEntry(p, class_id, species, assigned[p]) for p in paths)
    manifest = SplitManifest(entries, seed=seed, ratios=tuple(float(r) for r in ratios), class_order=tuple(class_order))
    if out_path is not None:
        manifest.write(out_path)
    return manifest


def load_patches(entries, dataset_root, profiles=None, num_classes=len(CLASS_NAMES), audit=None):
    """Ingest manifest entries. Every mask path read is appended to ``audit`` when given."""
    profiles = profiles or DEFAULT_PROFILES
    root = Path(dataset_root)
    patches = []
    for e in entries:
        if audit is not None:
            audit.append(e.mask_path)
        patches.append(ingest_patch(root / e.path, root / e.mask_path, e.class_id, profiles[e.species], num_classes))
        patches[-1].path = e.path
    return patches


# -- synthetic data ---------------------------------------------------------

# Shape family per class, in class order. Loosely evocative of the lesion types.
DEFAULT_SHAPES = ("disc", "ring", "crescent", "small_disc", "blobs", "ellipse")

# Base RGB colours: background, glomerular tuft, lesion.
_PALETTES = {
    "mouse": np.array([[0.93, 0.80, 0.88], [0.80, 0.55, 0.72], [0.55, 0.20, 0.45]]),
    "human": np.array([[0.86, 0.84, 0.93], [0.45, 0.30, 0.65], [0.80, 0.70, 0.95]]),
}


@dataclass
class SyntheticSpec:
    num_classes: int = 6
    patches_per_class: tuple = (5, 5, 5)  # train, val, test
    image_size: int = 64
    shapes: tuple = DEFAULT_SHAPES
    noise: float = 0.04
    seed: int = 0
    species: tuple = ("mouse",)
    # 0 renders human patches in the mouse palette, 1 in the full human palette.
    appearance_shift: float = 1.0
    # Probability of also drawing a lesion of another class (left unannotated).
    distractor_prob: float = 0.0

    def validate(self):
        if not 1 <= self.num_classes <= len(self.shapes):
            raise ValidationError(f"num_classes={self.num_classes} needs that many shape families, have {len(self.shapes)}")
        if len(self.patches_per_class) != 3 or min(self.patches_per_class) < 0:
            raise ValidationError("patches_per_class must be three non-negative counts (train, val, test)")
        if self.image_size < 16:
            raise ValidationError("image_size must be at least 16")
        unknown = set(self.shapes[: self.num_classes]) - set(_SHAPE_FUNCS)
        if unknown:
            raise ValidationError(f"unknown shape families {sorted(unknown)}")
        if any(s not in SPECIES for s in self.species):
            raise ValidationError(f"unknown species in {self.species}")
        if self.num_classes > len(CLASS_NAMES):
            raise ValidationError(f"at most {len(CLASS_NAMES)} classes are named")
        if not 0.0 <= self.distractor_prob <= 1.0 or self.noise < 0:
            raise ValidationError("distractor_prob must be in [0, 1] and noise non-negative")


def _disc(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _shape_disc(yy, xx, size, rng):
    r = rng.uniform(0.12, 0.2) * size
    cy, cx = rng.uniform(0.35, 0.65, 2) * size
    return _disc(yy, xx, cy, cx, r), {"radius": r, "center": (cy, cx)}


def _shape_small_disc(yy, xx, size, rng):
    r = rng.uniform(0.07, 0.1) * size
    cy, cx = rng.uniform(0.3, 0.7, 2) * size
    return _disc(yy, xx, cy, cx, r), {"radius": r, "center": (cy, cx)}


def _shape_ring(yy, xx, size, rng):
    r = rng.uniform(0.15, 0.22) * size
    t = max(2.0, 0.25 * r)
    cy, cx = rng.uniform(0.38, 0.62, 2) * size
    return _disc(yy, xx, cy, cx, r) & ~_disc(yy, xx, cy, cx, r - t), {"radius": r, "thickness": t}


def _shape_crescent(yy, xx, size, rng):
    r = rng.uniform(0.15, 0.22) * size
    cy, cx = rng.uniform(0.38, 0.62, 2) * size
    angle = rng.uniform(0, 2 * np.pi)
    off = 0.5 * r
    inner = _disc(yy, xx, cy + off * np.sin(angle), cx + off * np.cos(angle), 0.9 * r)
    return _disc(yy, xx, cy, cx, r) & ~inner, {"radius": r}


def _shape_blobs(yy, xx, size, rng):
    k = int(rng.integers(3, 6))
    cy, cx = rng.uniform(0.4, 0.6, 2) * size
    mask = np.zeros(yy.shape, bool)
    for _ in range(k):
        r = rng.uniform(0.05, 0.08) * size
        dy, dx = rng.normal(0.0, 0.1 * size, 2)
        mask |= _disc(yy, xx, cy + dy, cx + dx, r)
    return mask, {"count": k}


def _shape_ellipse(yy, xx, size, rng):
    a, b = rng.uniform(0.18, 0.26) * size, rng.uniform(0.07, 0.1) * size
    cy, cx = rng.uniform(0.38, 0.62, 2) * size
    theta = rng.uniform(0, np.pi)
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0, {"axes": (a, b), "angle": theta}


_SHAPE_FUNCS = {
    "disc": _shape_disc,
    "small_disc": _shape_small_disc,
    "ring": _shape_ring,
    "crescent": _shape_crescent,
    "blobs": _shape_blobs,
    "ellipse": _shape_ellipse,
}


def render_lesion(shape, size, rng):
    """Draw one lesion mask of the given shape family. Returns (mask, geometry)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(float) + 0.5
    for _ in range(100):
        mask, geom = _SHAPE_FUNCS[shape](yy, xx, size, rng)
        if mask.any():
            return mask.astype(np.uint8), geom
    raise DataError(f"could not draw a non-empty {shape!r} lesion at size {size}")


def synthesize_patch(spec, class_id, species, rng):
    """Render one (image uint8, mask uint8 {0,1}, geometry) triple."""
    size = spec.image_size
    palette = _PALETTES["mouse"]
    if species == "human":
        palette = palette + spec.appearance_shift * (_PALETTES["human"] - palette)
    yy, xx = np.mgrid[0:size, 0:size].astype(float) + 0.5
    image = np.empty((size, size, 3))
    image[:] = palette[0]
    tuft = _disc(yy, xx, size / 2 + rng.normal(0, 0.03 * size), size / 2 + rng.normal(0, 0.03 * size), 0.42 * size)
    image[tuft] = palette[1]
    mask, geom = render_lesion(spec.shapes[class_id - 1], size, rng)
    if spec.num_classes > 1 and rng.random() < spec.distractor_prob:
        other = int(rng.choice([c for c in range(1, spec.num_classes + 1) if c != class_id]))
        extra, _ = render_lesion(spec.shapes[other - 1], size, rng)
        image[(extra > 0) & (mask == 0)] = palette[2]
    image[mask > 0] = palette[2]
    image += rng.normal(0.0, spec.noise, image.shape)
    return image_to_uint8(np.clip(image, 0.0, 1.0)), mask, geom


def generate_synthetic_dataset(spec, root, profiles=None):
    """Write a synthetic dataset in the canonical layout plus ``manifest.tsv``.

    Returns the manifest. Per-split counts come from ``spec.patches_per_class``.
    """
    spec.validate()
    profiles = profiles or DEFAULT_PROFILES
    for species in spec.species:
        if profiles[species].working_size != spec.image_size:
            raise ValidationError(
                f"{species} profile working size {profiles[species].working_size} != synthetic image size {spec.image_size}"
            )
    root = Path(root)
    entries = []
    class_order = CLASS_NAMES[: spec.num_classes]
    for species in spec.species:
        for class_id in range(1, spec.num_classes + 1):
            rng = np.random.default_rng([spec.seed, SPECIES.index(species), class_id])
            idx = 0
            for split, count in zip(SPLITS, spec.patches_per_class):
                for _ in range(count):
                    img, mask, _ = synthesize_patch(spec, class_id, species, rng)
                    rel = f"{species}/{class_order[class_id - 1]}/{idx:04d}_img.png"
                    write_png(root / rel, img)
                    write_png(root / (rel[: -len("_img.png")] + "_mask.png"), mask_to_uint8(mask))
                    entries.append(ManifestEntry(rel, class_id, species, split))
                    idx += 1
    total = sum(spec.patches_per_class)
    ratios = tuple(c / total for c in spec.patches_per_class) if total else DEFAULT_RATIOS
    manifest = SplitManifest(entries, seed=spec.seed, ratios=ratios, class_order=class_order)
    manifest.write(root / "manifest.tsv")
    return manifest


def synthetic_profiles(image_size, base=DEFAULT_PROFILES):
    """Profiles whose working size matches synthetic patches, keeping each species' spacing."""
    out = {}
    for name, p in base.items():
        out[name] = SpeciesProfile(
            name, p.magnification, p.spacing_um, capture_size=image_size, working_size=image_size
        )
    return out
