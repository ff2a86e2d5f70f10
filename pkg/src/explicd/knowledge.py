"""Diagnostic-criteria knowledge bases and their frozen anchor embeddings.

A knowledge base lists the classes, the criteria axes, the characteristic
options on each axis, and which option each class exhibits. Option texts are
embedded once into unit vectors (knowledge anchors) that stay frozen for the
lifetime of a model; training only ever moves the visual side toward them.

The built-in embedder is a deterministic hash-based stand-in for a real
text encoder: per token, an FNV-1a seed drives a splitmix64 stream of d
uniforms in [-1, 1), token vectors are summed and the sum L2-normalized.
Externally computed embeddings can be swapped in via import_anchors.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from explicd.errors import ValidationError
from explicd.rng import SplitMix64, fnv1a64

ANCHOR_MAGIC = "EXPLICD-ANCHORS 1"
BUILTIN_EMBEDDER = "builtin:hash-v1"

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


@dataclass
class CriteriaAxis:
    """One criteria axis: its option texts and the class -> option mapping."""

    name: str
    options: list[str]
    class_to_option: dict[str, int]


@dataclass
class KnowledgeBase:
    classes: list[str]
    axes: list[CriteriaAxis]

    @property
    def option_counts(self) -> list[int]:
        return [len(axis.options) for axis in self.axes]

    @property
    def total_options(self) -> int:
        return sum(self.option_counts)

    def positive_matrix(self) -> np.ndarray:
        """(K, N) int array: positive option index per axis and class."""
        return np.array(
            [[axis.class_to_option[c] for c in self.classes] for axis in self.axes],
            dtype=np.int64,
        )


def validate_knowledge_base(kb: KnowledgeBase) -> KnowledgeBase:
    n = len(kb.classes)
    if n < 2:
        raise ValidationError(f"knowledge base needs at least 2 classes, got {n}")
    if len(set(kb.classes)) != n:
        raise ValidationError("class names must be unique")
    if not kb.axes:
        raise ValidationError("knowledge base needs at least 1 criteria axis")
    names = [axis.name for axis in kb.axes]
    if len(set(names)) != len(names):
        raise ValidationError("axis names must be unique")
    for axis in kb.axes:
        n_i = len(axis.options)
        if n_i < 2 or n_i > n:
            raise ValidationError(
                f"axis '{axis.name}': option count {n_i} outside [2, {n}]"
            )
        if len(set(axis.options)) != n_i:
            raise ValidationError(f"axis '{axis.name}': duplicate option text")
        for cls in kb.classes:
            if cls not in axis.class_to_option:
                raise ValidationError(f"axis '{axis.name}': class '{cls}' has no option")
        for cls, idx in axis.class_to_option.items():
            if cls not in kb.classes:
                raise ValidationError(f"axis '{axis.name}': unknown class '{cls}'")
            if not 0 <= idx < n_i:
                raise ValidationError(
                    f"axis '{axis.name}': class '{cls}' maps to option {idx}, out of range"
                )
        used = set(axis.class_to_option.values())
        if used != set(range(n_i)):
            missing = sorted(set(range(n_i)) - used)
            raise ValidationError(
                f"axis '{axis.name}': options {missing} are mapped by no class"
            )
    return kb


def kb_to_json(kb: KnowledgeBase) -> dict:
    axes = []
    for axis in kb.axes:
        options = []
        for j, text in enumerate(axis.options):
            members = [c for c in kb.classes if axis.class_to_option[c] == j]
            options.append({"text": text, "classes": members})
        axes.append({"name": axis.name, "options": options})
    return {"classes": list(kb.classes), "axes": axes}


def kb_from_json(obj: dict) -> KnowledgeBase:
    try:
        classes = list(obj["classes"])
        axes = []
        for raw in obj["axes"]:
            options = [opt["text"] for opt in raw["options"]]
            mapping: dict[str, int] = {}
            for j, opt in enumerate(raw["options"]):
                for cls in opt["classes"]:
                    if cls in mapping:
                        raise ValidationError(
                            f"axis '{raw['name']}': class '{cls}' listed under two options"
                        )
                    mapping[cls] = j
            axes.append(CriteriaAxis(name=raw["name"], options=options, class_to_option=mapping))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed knowledge base structure: {exc}") from exc
    return validate_knowledge_base(KnowledgeBase(classes=classes, axes=axes))


def load_knowledge_base(path) -> KnowledgeBase:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON: {exc}") from exc
    return kb_from_json(obj)


def save_knowledge_base(kb: KnowledgeBase, path) -> None:
    Path(path).write_text(json.dumps(kb_to_json(kb), indent=2) + "\n")


def kb_digest(kb: KnowledgeBase) -> str:
    canon = json.dumps(kb_to_json(kb), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def class_option_text(kb: KnowledgeBase, class_name: str) -> str:
    """Concatenation of the class's option texts across all axes."""
    parts = [axis.options[axis.class_to_option[class_name]] for axis in kb.axes]
    return " ".join(parts)


# ---------------------------------------------------------------------------
# anchor embeddings
# ---------------------------------------------------------------------------

def hash_embed_text(text: str, dim: int) -> np.ndarray:
    """Deterministic unit vector for a text: summed per-token hash streams."""
    if dim < 1:
        raise ValidationError(f"embedding dim must be positive, got {dim}")
    tokens = [t for t in _TOKEN_SPLIT.split(text.lower()) if t]
    if not tokens:
        raise ValidationError(f"no tokens after normalization in text {text!r}")
    total = np.zeros(dim, dtype=np.float64)
    for token in tokens:
        stream = SplitMix64(fnv1a64(token))
        total += stream.symmetric(dim)
    norm = float(np.linalg.norm(total))
    if norm == 0.0:
        raise ValidationError(f"token vectors cancelled exactly for text {text!r}")
    return total / norm


@dataclass
class AnchorSet:
    """Frozen per-axis matrices of unit-norm option embeddings."""

    dim: int
    matrices: list[np.ndarray] = field(repr=False)
    provenance: str = BUILTIN_EMBEDDER

    def row_counts(self) -> list[int]:
        return [m.shape[0] for m in self.matrices]

    def check_unit_rows(self, tol: float = 1e-9) -> None:
        for i, m in enumerate(self.matrices):
            norms = np.linalg.norm(m, axis=-1)
            if np.any(np.abs(norms - 1.0) > tol):
                raise ValidationError(f"anchor matrix {i}: rows are not unit norm")

    def check_against(self, kb: KnowledgeBase) -> None:
        counts = self.row_counts()
        expected = kb.option_counts
        if counts != expected:
            raise ValidationError(
                f"anchor rows per axis {counts} do not match knowledge base {expected}"
            )


def embed_anchors(kb: KnowledgeBase, dim: int) -> AnchorSet:
    """Embed every option once as 'axis-name: option-text'.

    The axis-name prefix keeps identical option phrasings on different axes
    from sharing an anchor.
    """
    matrices = []
    for axis in kb.axes:
        rows = [hash_embed_text(f"{axis.name}: {text}", dim) for text in axis.options]
        matrices.append(np.stack(rows))
    return AnchorSet(dim=dim, matrices=matrices, provenance=BUILTIN_EMBEDDER)


def anchors_to_text(anchors: AnchorSet) -> str:
    lines = [f"{ANCHOR_MAGIC} {anchors.dim}"]
    for i, m in enumerate(anchors.matrices):
        for j in range(m.shape[0]):
            floats = " ".join(f"{v:.17g}" for v in m[j])
            lines.append(f"{i} {j} {floats}")
    return "\n".join(lines) + "\n"


def save_anchors(anchors: AnchorSet, path) -> None:
    Path(path).write_text(anchors_to_text(anchors))


def anchors_digest(anchors: AnchorSet) -> str:
    return hashlib.sha256(anchors_to_text(anchors).encode("utf-8")).hexdigest()


def _parse_anchor_file(path) -> tuple[int, dict[tuple[int, int], np.ndarray]]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(ANCHOR_MAGIC):
        raise ValidationError(f"{path}: missing anchor header '{ANCHOR_MAGIC} <dim>'")
    try:
        dim = int(lines[0].split()[2])
    except (IndexError, ValueError) as exc:
        raise ValidationError(f"{path}: malformed anchor header {lines[0]!r}") from exc
    rows: dict[tuple[int, int], np.ndarray] = {}
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 + dim:
            raise ValidationError(
                f"{path}:{ln}: expected 2 indices + {dim} floats, found {len(parts)} fields"
            )
        key = (int(parts[0]), int(parts[1]))
        if key in rows:
            raise ValidationError(f"{path}:{ln}: duplicate row for axis/option {key}")
        rows[key] = np.array([float(v) for v in parts[2:]], dtype=np.float64)
    return dim, rows


def _assemble(path, kb: KnowledgeBase, dim: int,
              rows: dict[tuple[int, int], np.ndarray]) -> list[np.ndarray]:
    matrices = []
    for i, axis in enumerate(kb.axes):
        m = np.zeros((len(axis.options), dim), dtype=np.float64)
        for j in range(len(axis.options)):
            if (i, j) not in rows:
                raise ValidationError(
                    f"{path}: expected row for axis {i} option {j} ('{axis.name}'), found none"
                )
            m[j] = rows.pop((i, j))
        matrices.append(m)
    if rows:
        extra = sorted(rows)[0]
        raise ValidationError(
            f"{path}: row for axis {extra[0]} option {extra[1]} has no knowledge base entry"
        )
    return matrices


def load_anchors(path, kb: KnowledgeBase) -> AnchorSet:
    """Reload a saved AnchorSet bit-exactly; rows must already be unit norm."""
    dim, rows = _parse_anchor_file(path)
    anchors = AnchorSet(dim=dim, matrices=_assemble(path, kb, dim, rows),
                        provenance=f"file:{Path(path).name}")
    anchors.check_unit_rows()
    anchors.check_against(kb)
    return anchors


def import_anchors(path, kb: KnowledgeBase, expect_dim: int | None = None) -> AnchorSet:
    """Adopt externally computed embeddings, re-normalizing every row."""
    dim, rows = _parse_anchor_file(path)
    if expect_dim is not None and dim != expect_dim:
        raise ValidationError(f"{path}: expected dim {expect_dim}, found {dim}")
    matrices = _assemble(path, kb, dim, rows)
    for i, m in enumerate(matrices):
        norms = np.linalg.norm(m, axis=-1, keepdims=True)
        if np.any(norms == 0.0):
            raise ValidationError(f"{path}: zero row in axis {i} cannot be normalized")
        matrices[i] = m / norms
    anchors = AnchorSet(dim=dim, matrices=matrices, provenance=f"import:{path}")
    anchors.check_against(kb)
    return anchors
