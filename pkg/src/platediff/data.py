"""Manifest I/O, train/test splitting and the synthetic before/after generator."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .domain import FoodItem, Sample, Structure
from .errors import EmptyInput, ParseError, SpecError, ValidationError

SCHEMA_VERSION = 1


def load_image(ref):
    """Return an H x W x 3 uint8 array for a path or an in-memory array."""
    if isinstance(ref, np.ndarray):
        arr = ref
    else:
        with Image.open(ref) as im:
            arr = np.asarray(im.convert("RGB"))
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"expected an H x W x 3 image, got shape {arr.shape}", field="image")
    if arr.dtype != np.uint8:
        arr = np.clip(arr, 0, 255).astype(np.uint8)
    return arr


# --------------------------------------------------------------------- manifest

def _item_to_json(item):
    return {
        "name": item.name,
        "weight_before_g": item.weight_before,
        "weight_after_g": item.weight_after,
        "structure": item.structure.value,
    }


def _path_str(ref, base):
    if isinstance(ref, np.ndarray):
        raise ValidationError("in-memory images cannot be written to a manifest; save them first", field="image")
    p = Path(ref)
    try:
        return p.resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return str(p)


def save_manifest(samples, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent
    lines = []
    for s in samples:
        rec = {
            "schema_version": SCHEMA_VERSION,
            "sample_id": s.sample_id,
            "before_image": _path_str(s.before_image, base),
            "after_image": None if s.after_image is None else _path_str(s.after_image, base),
            "items": [_item_to_json(it) for it in s.items],
            "dataset_tag": s.dataset_tag,
        }
        lines.append(json.dumps(rec, ensure_ascii=False))
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return path


def _resolve(ref, base):
    if ref is None:
        return None
    if not isinstance(ref, str) or not ref:
        raise ValidationError("image reference must be a non-empty string", field="image")
    p = Path(ref)
    return (p if p.is_absolute() else base / p).resolve()


def _record_to_sample(rec, base):
    if not isinstance(rec, dict):
        raise ValidationError("record must be a JSON object", field="record")
    version = rec.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValidationError(f"unsupported schema_version {version}", field="schema_version")
    for key in ("sample_id", "before_image", "items"):
        if key not in rec:
            raise ValidationError(f"missing field {key!r}", field=key)
    items = []
    raw_items = rec["items"]
    if not isinstance(raw_items, list):
        raise ValidationError("items must be a list", field="items")
    for i, raw in enumerate(raw_items):
        if not isinstance(raw, dict):
            raise ValidationError(f"items[{i}] must be an object", field=f"items[{i}]")
        try:
            # bounding boxes and other annotations are accepted and ignored
            items.append(
                FoodItem(
                    name=raw.get("name", ""),
                    weight_before=raw.get("weight_before_g"),
                    weight_after=raw.get("weight_after_g"),
                    structure=raw.get("structure", "unknown"),
                )
            )
        except ValidationError as exc:
            raise ValidationError(f"items[{i}].{exc.field}: {exc}", field=f"items[{i}].{exc.field}") from None
    return Sample(
        sample_id=rec["sample_id"],
        before_image=_resolve(rec["before_image"], base),
        after_image=_resolve(rec.get("after_image"), base),
        items=tuple(items),
        dataset_tag=rec.get("dataset_tag", ""),
    )


def load_manifest(path):
    """Read a line-delimited JSON manifest; samples come back in file order.

    Relative image paths are resolved against the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    samples, seen = [], {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line=lineno) from None
            try:
                sample = _record_to_sample(rec, base)
            except ValidationError as exc:
                raise ValidationError(f"line {lineno}: {exc}", field=exc.field) from None
            if sample.sample_id in seen:
                raise ParseError(
                    f"duplicate sample_id {sample.sample_id!r} (first seen on line {seen[sample.sample_id]})",
                    line=lineno,
                )
            seen[sample.sample_id] = lineno
            samples.append(sample)
    return samples


# ------------------------------------------------------------------------ split

def split(samples, train_fraction=0.8, seed=0):
    """Seeded sample-level partition. The train side gets ``floor(n * fraction)``.

    Both halves keep the input order.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    samples = list(samples)
    n = len(samples)
    if n == 0:
        raise EmptyInput("cannot split an empty sample list")
    n_train = math.floor(n * train_fraction + 1e-9)
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return [samples[i] for i in train_idx], [samples[i] for i in test_idx]


# -------------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SyntheticClass:
    name: str
    color: tuple
    density: float  # grams per pixel


DEFAULT_CLASSES = (
    SyntheticClass("red_blob", (220, 40, 40), 0.030),
    SyntheticClass("green_blob", (40, 190, 60), 0.050),
    SyntheticClass("blue_blob", (40, 70, 220), 0.020),
    SyntheticClass("yellow_blob", (235, 215, 40), 0.040),
)

# A dark tabletop lies outside the convex hull of the class colours, so a
# single linear score can separate "any food" from background. A mid-grey
# background sits inside that hull and forces one class below it.
DEFAULT_BACKGROUND = (20, 20, 20)


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: int = 336
    classes: tuple = DEFAULT_CLASSES
    items_per_image: tuple = (1, 3)
    consumed_fraction_range: tuple = (0.0, 1.0)
    seed: int = 0
    semi_axis_range: tuple = (22.0, 62.0)  # pixels, major semi-axis
    aspect_range: tuple = (0.5, 1.0)  # minor / major
    background: tuple = DEFAULT_BACKGROUND
    gap: int = 6  # minimum pixel gap between item bounding boxes
    max_retries: int = 100

    def validate(self):
        if self.image_size < 1:
            raise SpecError("image_size must be positive")
        if not self.classes:
            raise SpecError("at least one class is required")
        colors = [tuple(c.color) for c in self.classes]
        if len(set(colors)) != len(colors):
            raise SpecError("class colors must be pairwise distinct")
        if tuple(self.background) in colors:
            raise SpecError("background color collides with a class color")
        if len({c.name for c in self.classes}) != len(self.classes):
            raise SpecError("class names must be distinct")
        for c in self.classes:
            if not c.density > 0:
                raise SpecError(f"class {c.name}: density must be > 0")
        lo, hi = self.consumed_fraction_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise SpecError("consumed_fraction_range must lie within [0, 1]")
        kmin, kmax = self.items_per_image
        if not 1 <= kmin <= kmax <= len(self.classes):
            raise SpecError("items_per_image must satisfy 1 <= min <= max <= number of classes")
        amin, amax = self.semi_axis_range
        if not 0 < amin <= amax:
            raise SpecError("semi_axis_range must be positive and ordered")
        rmin, rmax = self.aspect_range
        if not 0 < rmin <= rmax <= 1:
            raise SpecError("aspect_range must lie within (0, 1]")
        return self


@dataclass(frozen=True)
class Ellipse:
    class_index: int
    cx: float
    cy: float
    ax: float  # semi-axis along x
    ay: float  # semi-axis along y
    consumed: float

    @property
    def eccentricity(self):
        major, minor = max(self.ax, self.ay), min(self.ax, self.ay)
        return math.sqrt(1.0 - (minor / major) ** 2)

    def bbox(self):
        return (self.cx - self.ax, self.cy - self.ay, self.cx + self.ax, self.cy + self.ay)


@dataclass
class SyntheticScene:
    sample: Sample
    ellipses: list
    before_masks: list = field(repr=False)
    after_masks: list = field(repr=False)

    def bbox(self, item_index):
        """Inclusive-exclusive pixel bbox (x0, y0, x1, y1) of the before mask."""
        ys, xs = np.nonzero(self.before_masks[item_index])
        return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def ellipse_mask(size, cx, cy, ax, ay):
    """Boolean mask of pixels whose centres fall inside the axis-aligned ellipse."""
    if ax <= 0 or ay <= 0:
        return np.zeros((size, size), dtype=bool)
    c = np.arange(size) + 0.5
    dx = ((c - cx) / ax) ** 2
    dy = ((c - cy) / ay) ** 2
    return dy[:, None] + dx[None, :] <= 1.0


def render_scene(spec, ellipses, sample_id="scene", dataset_tag="synthetic"):
    """Draw ``ellipses`` into before/after images and derive pixel-exact weights."""
    size = spec.image_size
    before = np.empty((size, size, 3), dtype=np.uint8)
    before[:] = spec.background
    after = before.copy()
    items, bmasks, amasks = [], [], []
    for e in ellipses:
        cls = spec.classes[e.class_index]
        bmask = ellipse_mask(size, e.cx, e.cy, e.ax, e.ay)
        shrink = math.sqrt(max(0.0, 1.0 - e.consumed))
        amask = ellipse_mask(size, e.cx, e.cy, e.ax * shrink, e.ay * shrink)
        before[bmask] = cls.color
        after[amask] = cls.color
        structure = Structure.SOLID if e.eccentricity < 0.5 else Structure.AMORPHOUS_MIXED
        items.append(
            FoodItem(
                name=cls.name,
                weight_before=cls.density * int(bmask.sum()),
                weight_after=cls.density * int(amask.sum()),
                structure=structure,
            )
        )
        bmasks.append(bmask)
        amasks.append(amask)
    sample = Sample(
        sample_id=sample_id,
        before_image=before,
        after_image=after,
        items=tuple(items),
        dataset_tag=dataset_tag,
    )
    return SyntheticScene(sample, list(ellipses), bmasks, amasks)


def _overlaps(box, others, gap):
    x0, y0, x1, y1 = box
    for ox0, oy0, ox1, oy1 in others:
        if x0 < ox1 + gap and ox0 < x1 + gap and y0 < oy1 + gap and oy0 < y1 + gap:
            return True
    return False


def _draw_ellipses(spec, rng):
    kmin, kmax = spec.items_per_image
    k = int(rng.integers(kmin, kmax + 1))
    class_ids = rng.choice(len(spec.classes), size=k, replace=False)
    size = spec.image_size
    placed, boxes = [], []
    for cid in class_ids:
        for _ in range(spec.max_retries):
            major = rng.uniform(*spec.semi_axis_range)
            minor = major * rng.uniform(*spec.aspect_range)
            ax, ay = (major, minor) if rng.random() < 0.5 else (minor, major)
            if 2 * ax + 2 > size or 2 * ay + 2 > size:
                continue
            cx = rng.uniform(ax + 1, size - ax - 1)
            cy = rng.uniform(ay + 1, size - ay - 1)
            box = (cx - ax, cy - ay, cx + ax, cy + ay)
            if _overlaps(box, boxes, spec.gap):
                continue
            f = rng.uniform(*spec.consumed_fraction_range)
            placed.append(Ellipse(int(cid), cx, cy, ax, ay, f))
            boxes.append(box)
            break
        else:
            raise SpecError(f"could not place item {len(placed) + 1} without overlap after {spec.max_retries} tries")
    return placed


def generate_scene(spec, index):
    """Scene ``index`` of the stream defined by ``spec.seed``.

    Each scene draws from its own RNG stream keyed on (seed, index), so any
    subset can be regenerated independently and in any order.
    """
    rng = np.random.default_rng([spec.seed, index])
    ellipses = _draw_ellipses(spec, rng)
    return render_scene(spec, ellipses, sample_id=f"synth-{spec.seed}-{index:06d}")


def generate_synthetic(spec, count, start=0):
    spec.validate()
    return [generate_scene(spec, i).sample for i in range(start, start + count)]


def write_synthetic(samples, out_dir, manifest_name="manifest.jsonl"):
    """Save in-memory sample images as PNG and write a manifest next to them."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    saved = []
    for s in samples:
        before = img_dir / f"{s.sample_id}_before.png"
        Image.fromarray(load_image(s.before_image)).save(before)
        after = None
        if s.after_image is not None:
            after = img_dir / f"{s.sample_id}_after.png"
            Image.fromarray(load_image(s.after_image)).save(after)
        saved.append(
            Sample(s.sample_id, before.resolve(), s.items, None if after is None else after.resolve(), s.dataset_tag)
        )
    save_manifest(saved, out_dir / manifest_name)
    return saved


def scene_from_sample(spec, sample):
    """Recover the scene for a generated sample id (``synth-<seed>-<index>``)."""
    try:
        _, seed, index = sample.sample_id.split("-")
        seed, index = int(seed), int(index)
    except ValueError:
        raise SpecError(f"{sample.sample_id!r} is not a synthetic sample id") from None
    if seed != spec.seed:
        raise SpecError(f"sample seed {seed} does not match spec seed {spec.seed}")
    return generate_scene(spec, index)
