"""Procedural attribute-controlled images with known per-axis ground truth.

Every class is a fixed tuple of options over four axes (color, shape,
texture, size), so the per-axis label of a sample is a deterministic
function of its class. The matching knowledge base is derived from the same
table, which makes concept alignment directly measurable: the generator can
never emit a sample whose axis labels disagree with kb_from_spec.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from explicd import netpbm, rng
from explicd.errors import ValidationError
from explicd.knowledge import CriteriaAxis, KnowledgeBase, validate_knowledge_base

AXIS_NAMES = ("color", "shape", "texture", "size")

DEFAULT_AXIS_OPTIONS = {
    "color": ["red", "green", "blue"],
    "shape": ["circle", "square", "triangle"],
    "texture": ["solid", "striped"],
    "size": ["small", "large"],
}

# every option used by >= 2 classes; several classes share options on some
# axis, so derived option counts stay below the class count where possible
DEFAULT_CLASS_TABLE = [
    ("red", "circle", "solid", "small"),
    ("red", "circle", "striped", "large"),
    ("red", "square", "solid", "large"),
    ("green", "square", "striped", "small"),
    ("green", "triangle", "solid", "small"),
    ("green", "circle", "striped", "large"),
    ("blue", "triangle", "striped", "small"),
    ("blue", "square", "solid", "large"),
]

OPTION_PHRASES = {
    "color": {
        "red": "uniform red region",
        "green": "uniform green region",
        "blue": "uniform blue region",
    },
    "shape": {
        "circle": "circular boundary",
        "square": "square boundary with straight edges",
        "triangle": "triangular boundary with three corners",
    },
    "texture": {
        "solid": "solid even fill",
        "striped": "striped fill with alternating rows",
    },
    "size": {
        "small": "small area",
        "large": "large area",
    },
}

COLOR_CHANNEL = {"red": 0, "green": 1, "blue": 2}
SIZE_RADIUS = {"small": 6, "large": 12}
STRIPE_LEVEL = 0.6
CENTER_JITTER = 3
RADIUS_JITTER = 1
MAX_JITTER_TRIES = 8


@dataclass
class SynthSpec:
    """Generator configuration: image geometry, class table, noise, seed."""

    height: int = 32
    width: int = 32
    axes: list[tuple[str, list[str]]] = field(
        default_factory=lambda: [(n, list(DEFAULT_AXIS_OPTIONS[n])) for n in AXIS_NAMES]
    )
    class_table: list[tuple[str, ...]] = field(
        default_factory=lambda: [tuple(row) for row in DEFAULT_CLASS_TABLE]
    )
    noise_std: float = 0.05
    seed: int = 0

    @property
    def class_names(self) -> list[str]:
        return ["-".join(row) for row in self.class_table]

    def option_indices(self, class_index: int) -> list[int]:
        row = self.class_table[class_index]
        return [options.index(row[i]) for i, (_, options) in enumerate(self.axes)]


@dataclass
class SyntheticSample:
    image: np.ndarray  # (3, H, W) float64 in [0, 1]
    class_index: int
    option_indices: list[int]
    sample_id: str


def validate_spec(spec: SynthSpec) -> SynthSpec:
    if len(spec.class_table) < 2:
        raise ValidationError("spec needs at least 2 classes")
    if len(set(spec.class_table)) != len(spec.class_table):
        raise ValidationError("class bindings must be distinct tuples")
    if spec.noise_std < 0:
        raise ValidationError("noise_std must be non-negative")
    if [name for name, _ in spec.axes] != list(AXIS_NAMES):
        raise ValidationError(f"axes must be {', '.join(AXIS_NAMES)}, in that order")
    for i, (name, options) in enumerate(spec.axes):
        known = DEFAULT_AXIS_OPTIONS[name]
        for opt in options:
            if opt not in known:
                raise ValidationError(f"axis '{name}': unknown option '{opt}'")
        used = {row[i] for row in spec.class_table}
        if used != set(options):
            raise ValidationError(
                f"axis '{name}': class table uses {sorted(used)}, options are {options}"
            )
    sizes = {row[AXIS_NAMES.index("size")] for row in spec.class_table}
    max_radius = max(SIZE_RADIUS[s] for s in sizes) + RADIUS_JITTER
    if 2 * max_radius + 1 > min(spec.height, spec.width):
        raise ValidationError(
            f"image {spec.height}x{spec.width} cannot fit a shape of radius {max_radius}"
        )
    return spec


def _shape_mask(kind: str, h: int, w: int, cy: int, cx: int, r: int) -> np.ndarray:
    yy, xx = np.ogrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == "triangle":
        t = yy - (cy - r)  # row depth from the apex
        return (t >= 0) & (t <= 2 * r) & (np.abs(dx) * 2 <= t)
    raise ValidationError(f"unknown shape '{kind}'")


def render_sample(spec: SynthSpec, class_index: int, sample_seed: int,
                  sample_id: str | None = None) -> SyntheticSample:
    """Render one sample; bitwise-deterministic in (spec, class, seed)."""
    if not 0 <= class_index < len(spec.class_table):
        raise ValidationError(f"class index {class_index} out of range")
    row = dict(zip([name for name, _ in spec.axes], spec.class_table[class_index]))
    h, w = spec.height, spec.width
    stream = rng.stream("render", spec.seed, class_index, sample_seed)

    radius = SIZE_RADIUS[row["size"]] + (stream.next_below(2 * RADIUS_JITTER + 1) - RADIUS_JITTER)
    cy, cx = h // 2, w // 2
    for _ in range(MAX_JITTER_TRIES):
        dy = stream.next_below(2 * CENTER_JITTER + 1) - CENTER_JITTER
        dx = stream.next_below(2 * CENTER_JITTER + 1) - CENTER_JITTER
        ty, tx = h // 2 + dy, w // 2 + dx
        if ty - radius >= 0 and ty + radius <= h - 1 and tx - radius >= 0 and tx + radius <= w - 1:
            cy, cx = ty, tx
            break
    # fall through keeps the exact center, which always fits (validate_spec)

    image = np.zeros((3, h, w), dtype=np.float64)
    mask = _shape_mask(row["shape"], h, w, cy, cx, radius)
    fill = np.where(mask, 1.0, 0.0)
    if row["texture"] == "striped":
        stripe_rows = (np.arange(h) % 2 == 1)[:, None]
        fill = np.where(mask & stripe_rows, STRIPE_LEVEL, fill)
    image[COLOR_CHANNEL[row["color"]]] = fill

    if spec.noise_std > 0:
        noise = stream.normals(3 * h * w, spec.noise_std).reshape(3, h, w)
        image = np.clip(image + noise, 0.0, 1.0)

    if sample_id is None:
        sample_id = f"c{class_index}-s{sample_seed}"
    return SyntheticSample(image=image, class_index=class_index,
                           option_indices=spec.option_indices(class_index),
                           sample_id=sample_id)


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------

def _test_count(n_per_class: int) -> int:
    return max(1, n_per_class // 5)


def gen_dataset(spec: SynthSpec, n_per_class: int, split_seed: int, out_dir):
    """Render a class-balanced dataset with a deterministic 80/20 split.

    Writes images/<id>.ppm plus manifest.jsonl under out_dir and returns
    (train, test) sample lists. Returned images are the 8-bit quantized
    pixels, identical to what a later load_dataset will see.
    """
    validate_spec(spec)
    if n_per_class < 2:
        raise ValidationError(f"n_per_class must be >= 2, got {n_per_class}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)

    n_test = _test_count(n_per_class)
    train: list[SyntheticSample] = []
    test: list[SyntheticSample] = []
    lines = []
    for c, name in enumerate(spec.class_names):
        for k in range(n_per_class):
            sample_seed = rng.fnv1a64(f"sample/{split_seed}/{c}/{k}")
            sample_id = f"{name}-{k:04d}"
            sample = render_sample(spec, c, sample_seed, sample_id=sample_id)
            rel = f"images/{sample_id}.ppm"
            pixels = netpbm.image_to_bytes(sample.image)
            netpbm.write_ppm(out_dir / rel, pixels)
            sample.image = netpbm.bytes_to_image(pixels)
            split = "test" if k >= n_per_class - n_test else "train"
            (test if split == "test" else train).append(sample)
            lines.append(json.dumps({
                "id": sample_id,
                "split": split,
                "class": name,
                "axis_labels": sample.option_indices,
                "path": rel,
            }))
    (out_dir / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    return train, test


def manifest_digest(dataset_dir) -> str:
    return hashlib.sha256((Path(dataset_dir) / "manifest.jsonl").read_bytes()).hexdigest()


def load_dataset(dataset_dir, class_names: list[str]):
    """Read manifest + images back into (train, test) sample lists."""
    dataset_dir = Path(dataset_dir)
    manifest = dataset_dir / "manifest.jsonl"
    if not manifest.exists():
        raise ValidationError(f"{manifest}: no manifest found")
    index = {name: i for i, name in enumerate(class_names)}
    train: list[SyntheticSample] = []
    test: list[SyntheticSample] = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec["class"] not in index:
            raise ValidationError(f"manifest class '{rec['class']}' not in knowledge base")
        image = netpbm.bytes_to_image(netpbm.read_ppm(dataset_dir / rec["path"]))
        sample = SyntheticSample(image=image, class_index=index[rec["class"]],
                                 option_indices=list(rec["axis_labels"]),
                                 sample_id=rec["id"])
        (test if rec["split"] == "test" else train).append(sample)
    return train, test


def kb_from_spec(spec: SynthSpec) -> KnowledgeBase:
    """Knowledge base whose axes mirror the generator's class table."""
    validate_spec(spec)
    names = spec.class_names
    axes = []
    for i, (axis_name, options) in enumerate(spec.axes):
        texts = [OPTION_PHRASES[axis_name][opt] for opt in options]
        mapping = {names[c]: options.index(spec.class_table[c][i])
                   for c in range(len(names))}
        axes.append(CriteriaAxis(name=axis_name, options=texts, class_to_option=mapping))
    return validate_knowledge_base(KnowledgeBase(classes=names, axes=axes))
