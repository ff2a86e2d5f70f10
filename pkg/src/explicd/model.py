"""The concept-alignment classifier.

Pipeline: a small from-scratch vision transformer turns the image into an
S x d feature map; K learnable concept tokens query it through single-head
cross-attention; each encoded token is scored against its axis's frozen
anchors (cosine by default); an anchor contrastive loss pulls tokens toward
the positive anchors; a linear head classifies from the concatenated score
profile. Explanations fall out of the same quantities: per-axis scores, the
head row as per-criterion contributions, and attention heatmaps.

All forward functions accept a single sample ((C,H,W) image, (S,d) map,
(K,d) tokens) or a leading batch axis, and preserve whichever they got.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from explicd import autodiff as ad
from explicd import rng
from explicd.autodiff import ShapeError, Tensor
from explicd.errors import ValidationError
from explicd.knowledge import AnchorSet, KnowledgeBase

CHECKPOINT_MAGIC = "EXPLICD-CKPT 1"
INIT_STD = 0.02


@dataclass
class ModelConfig:
    dim: int = 64
    patch: int = 4
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    image_shape: tuple[int, int, int] = (3, 32, 32)
    tau: float = 0.07
    lambda_anchor: float = 1.0
    normalize_similarity: bool = True  # False scores with the raw dot product

    def __post_init__(self):
        c, h, w = self.image_shape
        if self.tau <= 0:
            raise ValidationError(f"tau must be positive, got {self.tau}")
        if self.lambda_anchor < 0:
            raise ValidationError(f"lambda_anchor must be >= 0, got {self.lambda_anchor}")
        if self.dim % self.heads != 0:
            raise ValidationError(f"dim {self.dim} not divisible by heads {self.heads}")
        if h % self.patch != 0 or w % self.patch != 0:
            raise ValidationError(f"image {h}x{w} not divisible by patch {self.patch}")
        if self.depth < 1 or self.dim < 1 or self.mlp_ratio < 1:
            raise ValidationError("depth, dim and mlp_ratio must be positive")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_shape[1] // self.patch, self.image_shape[2] // self.patch

    @property
    def seq_len(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_pixels(self) -> int:
        return self.image_shape[0] * self.patch * self.patch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["image_shape"] = tuple(d["image_shape"])
        return cls(**d)


@dataclass
class Model:
    """Parameter store plus the layout facts needed to rebuild the head."""

    mode: str  # "explicd" or "blackbox"
    cfg: ModelConfig
    params: dict[str, np.ndarray]
    n_classes: int
    option_counts: list[int] = field(default_factory=list)

    def copy(self) -> "Model":
        return Model(self.mode, self.cfg, {k: v.copy() for k, v in self.params.items()},
                     self.n_classes, list(self.option_counts))


def _normal(seed: int, name: str, shape: tuple[int, ...]) -> np.ndarray:
    stream = rng.stream("init", seed, name)
    return stream.normals(int(np.prod(shape)), INIT_STD).reshape(shape)


def _encoder_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    d = cfg.dim
    p: dict[str, np.ndarray] = {}
    p["patch_embed.w"] = _normal(seed, "patch_embed.w", (cfg.patch_pixels, d))
    p["patch_embed.b"] = np.zeros(d)
    p["pos_embed"] = _normal(seed, "pos_embed", (cfg.seq_len, d))
    hidden = d * cfg.mlp_ratio
    for i in range(cfg.depth):
        pre = f"block{i}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        for proj in ("wq", "wk", "wv", "wo"):
            p[pre + "attn." + proj] = _normal(seed, pre + "attn." + proj, (d, d))
        for bias in ("bq", "bk", "bv", "bo"):
            p[pre + "attn." + bias] = np.zeros(d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "mlp.w1"] = _normal(seed, pre + "mlp.w1", (d, hidden))
        p[pre + "mlp.b1"] = np.zeros(hidden)
        p[pre + "mlp.w2"] = _normal(seed, pre + "mlp.w2", (hidden, d))
        p[pre + "mlp.b2"] = np.zeros(d)
    return p


def init_explicd_model(cfg: ModelConfig, kb: KnowledgeBase, seed: int) -> Model:
    params = _encoder_params(cfg, seed)
    k = len(kb.axes)
    d = cfg.dim
    params["concept.tokens"] = _normal(seed, "concept.tokens", (k, d))
    for proj in ("wq", "wk", "wv", "wo"):
        params["concept." + proj] = _normal(seed, "concept." + proj, (d, d))
    total = kb.total_options
    params["head.w"] = _normal(seed, "head.w", (len(kb.classes), total))
    params["head.b"] = np.zeros(len(kb.classes))
    return Model("explicd", cfg, params, len(kb.classes), kb.option_counts)


def init_blackbox_model(cfg: ModelConfig, n_classes: int, seed: int) -> Model:
    params = _encoder_params(cfg, seed)
    params["head.w"] = _normal(seed, "head.w", (n_classes, cfg.dim))
    params["head.b"] = np.zeros(n_classes)
    return Model("blackbox", cfg, params, n_classes)


def bind(model: Model, tape: ad.Tape | None) -> dict[str, Tensor]:
    """Wrap parameters as tape leaves (training) or constants (inference)."""
    if tape is None:
        return {k: ad.constant(v) for k, v in model.params.items()}
    return {k: tape.leaf(v) for k, v in model.params.items()}


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, C, H, W) -> (B, S, C*patch*patch), patches in row-major grid order."""
    b, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, c, gh, patch, gw, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * patch * patch)


def _promote(x, ndim: int):
    """Add a batch axis to a single-sample array/Tensor; report if added."""
    if isinstance(x, Tensor):
        if x.ndim == ndim:
            return ad.reshape(x, (1,) + x.shape), True
        return x, False
    x = np.asarray(x)
    if x.ndim == ndim:
        return x[None], True
    return x, False


def encode_patches(p: dict[str, Tensor], patches: np.ndarray, cfg: ModelConfig) -> Tensor:
    """Encoder core over pre-extracted patches: (B, S, pp) -> (B, S, d)."""
    if patches.shape[1:] != (cfg.seq_len, cfg.patch_pixels):
        raise ShapeError(
            f"encode_patches: got {patches.shape[1:]}, expected "
            f"({cfg.seq_len}, {cfg.patch_pixels})"
        )
    x = ad.constant(patches)
    h = ad.matmul(x, p["patch_embed.w"]) + p["patch_embed.b"] + p["pos_embed"]
    b, s, d = h.shape
    hd = d // cfg.heads

    def split_heads(t: Tensor) -> Tensor:
        # (B, S, d) -> (B, heads, S, hd) so attention batches over heads
        return ad.permute(ad.reshape(t, (b, s, cfg.heads, hd)), (0, 2, 1, 3))

    for i in range(cfg.depth):
        pre = f"block{i}."
        a = ad.layer_norm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
        q = split_heads(ad.matmul(a, p[pre + "attn.wq"]) + p[pre + "attn.bq"])
        k = split_heads(ad.matmul(a, p[pre + "attn.wk"]) + p[pre + "attn.bk"])
        v = split_heads(ad.matmul(a, p[pre + "attn.wv"]) + p[pre + "attn.bv"])
        # scale on q (S x hd) is cheaper than on the S x S score matrix
        attn = ad.softmax(ad.matmul(q * (hd ** -0.5), ad.transpose(k)))
        ctx = ad.reshape(ad.permute(ad.matmul(attn, v), (0, 2, 1, 3)), (b, s, d))
        o = ad.matmul(ctx, p[pre + "attn.wo"]) + p[pre + "attn.bo"]
        h = h + o
        m = ad.layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
        m = ad.matmul(ad.tanh(ad.matmul(m, p[pre + "mlp.w1"]) + p[pre + "mlp.b1"]),
                      p[pre + "mlp.w2"]) + p[pre + "mlp.b2"]
        h = h + m
    return h


def encode_image(p: dict[str, Tensor], images: np.ndarray, cfg: ModelConfig) -> Tensor:
    """Run the visual encoder; (C,H,W) -> (S,d) or (B,C,H,W) -> (B,S,d)."""
    images, single = _promote(images, 3)
    if images.shape[1:] != cfg.image_shape:
        raise ShapeError(
            f"encode_image: image shape {images.shape[1:]} does not match configured {cfg.image_shape}"
        )
    h = encode_patches(p, patchify(images, cfg.patch), cfg)
    if single:
        return ad.reshape(h, (cfg.seq_len, cfg.dim))
    return h


def encode_concepts(p: dict[str, Tensor], fmap: Tensor, cfg: ModelConfig):
    """Cross-attend concept tokens over the feature map.

    Tokens are the queries; the feature map provides keys and values.
    Returns (encoded tokens, attention): (K,d) and (K,S) row-stochastic,
    batched forms when fmap is batched.
    """
    fmap, single = _promote(fmap, 2)
    tokens = p["concept.tokens"]
    q = ad.matmul(tokens, p["concept.wq"])
    k = ad.matmul(fmap, p["concept.wk"])
    v = ad.matmul(fmap, p["concept.wv"])
    attn = ad.softmax(ad.matmul(q * (cfg.dim ** -0.5), ad.transpose(k)))
    phat = ad.matmul(ad.matmul(attn, v), p["concept.wo"])
    if single:
        n_tokens = tokens.shape[0]
        return ad.reshape(phat, (n_tokens, cfg.dim)), ad.reshape(attn, (n_tokens, fmap.shape[-2]))
    return phat, attn


def similarity_profile(phat: Tensor, anchors: AnchorSet, normalize: bool = True) -> list[Tensor]:
    """Score each encoded token against its axis's anchor rows.

    With normalize=True (default) the token is L2-normalized first; anchors
    are unit norm, so the dot product is the cosine and scores stay in
    [-1, 1]. Returns one (n_i,) tensor per axis, (B, n_i) when batched.
    """
    phat, single = _promote(phat, 2)
    k = len(anchors.matrices)
    if phat.shape[-2] != k:
        raise ShapeError(f"similarity_profile: {phat.shape[-2]} tokens vs {k} anchor axes")
    if phat.shape[-1] != anchors.dim:
        raise ShapeError(f"similarity_profile: token dim {phat.shape[-1]} vs anchor dim {anchors.dim}")
    pn = ad.l2_normalize(phat) if normalize else phat
    scores = []
    for i, mat in enumerate(anchors.matrices):
        s = ad.matmul(pn[:, i:i + 1, :], ad.constant(mat.T))
        s = ad.reshape(s, (phat.shape[0], mat.shape[0]))
        if single:
            s = ad.reshape(s, (mat.shape[0],))
        scores.append(s)
    return scores


def anchor_loss(scores: Tensor, positive_index, tau: float) -> Tensor:
    """Contrastive pull toward the positive anchor within one axis.

    -log softmax(scores / tau)[positive]; batched inputs return the mean.
    """
    if tau <= 0:
        raise ValidationError(f"tau must be positive, got {tau}")
    return ad.cross_entropy_with_logits(scores * (1.0 / tau), positive_index)


def classify(w: Tensor, b: Tensor, profiles: list[Tensor]) -> Tensor:
    """Affine map from the concatenated similarity profile to class logits."""
    profile = ad.concat(profiles, axis=-1) if len(profiles) > 1 else profiles[0]
    total = w.shape[-1]
    if profile.shape[-1] != total:
        raise ShapeError(
            f"classify: profile length {profile.shape[-1]} vs head expecting {total}"
        )
    single = profile.ndim == 1
    if single:
        profile = ad.reshape(profile, (1, total))
    logits = ad.matmul(profile, ad.transpose(w)) + b
    if single:
        return ad.reshape(logits, (w.shape[0],))
    return logits


def loss_parts(logits: Tensor, labels, per_axis_scores: list[Tensor], positives,
               tau: float, lambda_anchor: float):
    """(total, ce, weighted anchor term); anchor term is a 0 constant at lambda 0."""
    ce = ad.cross_entropy_with_logits(logits, labels)
    if lambda_anchor == 0.0:
        return ce, ce, ad.constant(0.0)
    k = len(per_axis_scores)
    acc = None
    for scores, pos in zip(per_axis_scores, positives):
        term = anchor_loss(scores, pos, tau)
        acc = term if acc is None else acc + term
    anchor = acc * (lambda_anchor / k)
    return ce + anchor, ce, anchor


def total_loss(logits: Tensor, labels, per_axis_scores: list[Tensor], positives,
               tau: float, lambda_anchor: float = 1.0) -> Tensor:
    """Joint objective: classification CE plus the mean anchor loss over axes."""
    if len(per_axis_scores) != len(positives):
        raise ValidationError(
            f"{len(per_axis_scores)} score vectors vs {len(positives)} positive indices"
        )
    total, _, _ = loss_parts(logits, labels, per_axis_scores, positives, tau, lambda_anchor)
    return total


@dataclass
class ExplicdOutputs:
    fmap: Tensor
    phat: Tensor
    attention: Tensor
    scores: list[Tensor]
    logits: Tensor


def explicd_forward(p: dict[str, Tensor], cfg: ModelConfig, anchors: AnchorSet,
                    images: np.ndarray | None, patches: np.ndarray | None = None) -> ExplicdOutputs:
    if patches is not None:
        fmap = encode_patches(p, patches, cfg)
    else:
        fmap = encode_image(p, images, cfg)
    phat, attn = encode_concepts(p, fmap, cfg)
    scores = similarity_profile(phat, anchors, normalize=cfg.normalize_similarity)
    logits = classify(p["head.w"], p["head.b"], scores)
    return ExplicdOutputs(fmap, phat, attn, scores, logits)


def blackbox_forward(p: dict[str, Tensor], cfg: ModelConfig,
                     images: np.ndarray | None, patches: np.ndarray | None = None) -> Tensor:
    if patches is not None:
        fmap = encode_patches(p, patches, cfg)
    else:
        fmap = encode_image(p, images, cfg)
    pooled = fmap.mean(axis=-2)
    single = pooled.ndim == 1
    if single:
        pooled = ad.reshape(pooled, (1, cfg.dim))
    logits = ad.matmul(pooled, ad.transpose(p["head.w"])) + p["head.b"]
    if single:
        return ad.reshape(logits, (p["head.w"].shape[0],))
    return logits


# ---------------------------------------------------------------------------
# explanation
# ---------------------------------------------------------------------------

@dataclass
class AxisExplanation:
    axis: str
    options: list[str]
    scores: list[float]  # cosine per option, clamped to [-1, 1]
    top_option: int      # argmax, ties to the lowest index


@dataclass
class ExplanationReport:
    class_names: list[str]
    logits: list[float]
    predicted_index: int
    predicted_class: str
    axes: list[AxisExplanation]
    contributions: list[float]  # head row for the predicted class * profile
    bias: float
    mean_heatmap: np.ndarray
    axis_heatmaps: list[np.ndarray]
    attention: np.ndarray
    profile: np.ndarray

    def to_json_dict(self) -> dict:
        return {
            "predicted_class": self.predicted_class,
            "predicted_index": self.predicted_index,
            "class_names": self.class_names,
            "logits": self.logits,
            "bias": self.bias,
            "contributions": self.contributions,
            "axes": [
                {
                    "axis": a.axis,
                    "options": a.options,
                    "scores": a.scores,
                    "top_option": a.top_option,
                    "top_text": a.options[a.top_option],
                }
                for a in self.axes
            ],
        }


def heatmap_to_bytes(weights: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(S,) attention -> (H, W) uint8: patch grid, nearest upsample, min-max."""
    gh, gw = cfg.grid
    grid = weights.reshape(gh, gw)
    up = np.repeat(np.repeat(grid, cfg.patch, axis=0), cfg.patch, axis=1)
    lo, hi = float(up.min()), float(up.max())
    if hi - lo < 1e-300:
        return np.zeros(up.shape, dtype=np.uint8)
    return np.rint((up - lo) / (hi - lo) * 255.0).astype(np.uint8)


def explain(model: Model, anchors: AnchorSet, kb: KnowledgeBase,
            image: np.ndarray) -> ExplanationReport:
    """Full interpretation of one image with the current parameters."""
    if model.mode != "explicd":
        raise ValidationError("explain: only concept models can be explained")
    p = bind(model, tape=None)
    out = explicd_forward(p, model.cfg, anchors, image)
    logits = out.logits.data
    pred = int(np.argmax(logits))

    # reported per-axis scores are always cosine, whatever the training
    # similarity; clamp guards the [-1, 1] contract against fp rounding
    cosine = similarity_profile(out.phat, anchors, normalize=True)
    axes = []
    for axis, s in zip(kb.axes, cosine):
        vals = np.clip(s.data, -1.0, 1.0)
        axes.append(AxisExplanation(axis=axis.name, options=list(axis.options),
                                    scores=[float(v) for v in vals],
                                    top_option=int(np.argmax(vals))))

    profile = np.concatenate([s.data for s in out.scores])
    contributions = model.params["head.w"][pred] * profile
    attn = out.attention.data
    mean_heat = heatmap_to_bytes(attn.mean(axis=0), model.cfg)
    axis_heat = [heatmap_to_bytes(attn[i], model.cfg) for i in range(attn.shape[0])]
    return ExplanationReport(
        class_names=list(kb.classes),
        logits=[float(v) for v in logits],
        predicted_index=pred,
        predicted_class=kb.classes[pred],
        axes=axes,
        contributions=[float(v) for v in contributions],
        bias=float(model.params["head.b"][pred]),
        mean_heatmap=mean_heat,
        axis_heatmaps=axis_heat,
        attention=attn,
        profile=profile,
    )


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def micro_gradcheck(seed: int = 0, tol: float = 1e-4, step: float = 1e-5,
                    corrupt: float = 0.0) -> ad.GradCheckReport:
    """Finite-difference check of the full objective on a tiny model.

    Two classes, two 2-option axes, d=8, S=4, one block. Parameters get a
    random jitter on top of the standard init: at the raw init the concept
    attention is still near-uniform and some true gradients sit below the
    finite-difference noise floor, where a relative-error test measures
    noise rather than correctness. `corrupt` feeds the negative-control
    backward hook and must make the check fail when nonzero.
    """
    from explicd.knowledge import CriteriaAxis, KnowledgeBase, embed_anchors

    cfg = ModelConfig(dim=8, patch=4, depth=1, heads=2, mlp_ratio=2,
                      image_shape=(3, 8, 8))
    kb = KnowledgeBase(
        classes=["alpha", "beta"],
        axes=[
            CriteriaAxis("first", ["one", "two"], {"alpha": 0, "beta": 1}),
            CriteriaAxis("second", ["low", "high"], {"alpha": 1, "beta": 0}),
        ],
    )
    anchors = embed_anchors(kb, cfg.dim)
    model = init_explicd_model(cfg, kb, seed)
    for name, arr in model.params.items():
        jitter = rng.stream("gradcheck-jitter", seed, name).normals(arr.size, 0.3)
        arr += jitter.reshape(arr.shape)
    pix = rng.stream("gradcheck-image", seed)
    image = np.array([pix.next_unit() for _ in range(3 * 8 * 8)]).reshape(3, 8, 8)
    label = 1
    positives = [int(axis.class_to_option[kb.classes[label]]) for axis in kb.axes]

    def f(leaves):
        fmap = encode_image(leaves, image, cfg)
        phat, _ = encode_concepts(leaves, fmap, cfg)
        if corrupt:
            phat = ad.corrupt_gradient(phat, corrupt)
        scores = similarity_profile(phat, anchors, normalize=cfg.normalize_similarity)
        logits = classify(leaves["head.w"], leaves["head.b"], scores)
        return total_loss(logits, label, scores, positives, cfg.tau, cfg.lambda_anchor)

    return ad.finite_diff_check(f, model.params, step=step, tol=tol)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: Model, path, kb_digest: str, anchors_digest: str) -> None:
    header = {
        "mode": model.mode,
        "config": model.cfg.to_dict(),
        "n_classes": model.n_classes,
        "option_counts": list(model.option_counts),
        "kb_digest": kb_digest,
        "anchors_digest": anchors_digest,
    }
    lines = [CHECKPOINT_MAGIC, json.dumps(header, sort_keys=True)]
    for name, arr in model.params.items():
        lines.append(f"param {name}")
        lines.append("shape " + " ".join(str(s) for s in arr.shape))
        lines.append(" ".join(f"{v:.17g}" for v in arr.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[Model, str, str]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not a checkpoint (missing '{CHECKPOINT_MAGIC}')")
    try:
        header = json.loads(lines[1])
        cfg = ModelConfig.from_dict(header["config"])
    except (IndexError, KeyError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: malformed checkpoint header: {exc}") from exc
    params: dict[str, np.ndarray] = {}
    i = 2
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        if not lines[i].startswith("param "):
            raise ValidationError(f"{path}:{i + 1}: expected 'param <name>'")
        name = lines[i][len("param "):]
        shape = tuple(int(s) for s in lines[i + 1].split()[1:])
        values = np.array([float(v) for v in lines[i + 2].split()], dtype=np.float64)
        if values.size != int(np.prod(shape, dtype=np.int64)):
            raise ValidationError(f"{path}: param {name}: {values.size} values for shape {shape}")
        params[name] = values.reshape(shape)
        i += 3
    model = Model(header["mode"], cfg, params, header["n_classes"],
                  list(header["option_counts"]))
    return model, header["kb_digest"], header["anchors_digest"]
