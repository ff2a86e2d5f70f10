"""Training and evaluation loops: concept model, black-box baseline, zero-shot.

All three settings share the same visual encoder and AdamW configuration so
their accuracies are comparable. Anchors never enter the optimizer: the
parameter store contains no anchor tensors, so excluding them is structural
rather than a masking convention.

Runs are bit-reproducible for a fixed (seed, dataset, config): batch order
comes from a dedicated shuffle stream, initialization from per-tensor
streams, and evaluation reduces per-chunk results in a fixed order even
when EXPLICD_THREADS parallelizes the chunks.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from explicd import autodiff as ad
from explicd import model as md
from explicd import rng
from explicd.errors import ValidationError
from explicd.knowledge import AnchorSet, KnowledgeBase, class_option_text, hash_embed_text
from explicd.model import Model, ModelConfig
from explicd.synthdata import SyntheticSample

EVAL_BATCH = 64


class TrainingError(RuntimeError):
    """Optimization aborted (non-finite loss or gradient)."""


@dataclass
class TrainConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 32
    max_steps: int = 2000
    eval_interval: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValidationError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps < 0 or self.eval_interval < 1:
            raise ValidationError("max_steps must be >= 0 and eval_interval >= 1")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "weight_decay": self.weight_decay, "batch_size": self.batch_size,
            "max_steps": self.max_steps, "eval_interval": self.eval_interval,
            "seed": self.seed,
        }


@dataclass
class AdamWState:
    """First/second moment buffers mirroring the parameter store."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamWState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: AdamWState, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Decay scales the parameter directly (not the gradient); moments are
    bias-corrected by the shared step count.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValidationError(f"adamw: gradient shape {g.shape} vs param {p.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"adamw: non-finite gradient for {name} at step {t}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        if cfg.weight_decay != 0.0:
            p *= 1.0 - cfg.lr * cfg.weight_decay
        p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class Metrics:
    step: int
    loss_total: float
    loss_ce: float
    loss_anchor: float
    test_accuracy: float
    axis_alignment: list[float] | None
    macro_alignment: float | None
    wall_time: float

    def to_record(self) -> dict:
        # wall time stays out of the serialized record so rerunning a
        # training command reproduces metrics files byte for byte
        return {
            "step": self.step,
            "loss_total": self.loss_total,
            "loss_ce": self.loss_ce,
            "loss_anchor": self.loss_anchor,
            "test_accuracy": self.test_accuracy,
            "axis_alignment": self.axis_alignment,
            "macro_alignment": self.macro_alignment,
        }


def _eval_threads() -> int:
    raw = os.environ.get("EXPLICD_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _batched(samples: list[SyntheticSample], patch: int):
    for lo in range(0, len(samples), EVAL_BATCH):
        chunk = samples[lo:lo + EVAL_BATCH]
        yield md.patchify(np.stack([s.image for s in chunk]), patch)


def alignment_accuracy(per_axis_scores: list[np.ndarray], truths: np.ndarray):
    """Per-axis and macro fraction of samples whose top-scoring option is true.

    per_axis_scores: K arrays of (B, n_i); truths: (B, K) option indices.
    """
    per_axis = [float(np.mean(np.argmax(s, axis=-1) == truths[:, i]))
                for i, s in enumerate(per_axis_scores)]
    return per_axis, float(np.mean(per_axis))


def evaluate(model: Model, anchors: AnchorSet | None, kb: KnowledgeBase | None,
             samples: list[SyntheticSample]):
    """Classification accuracy, plus per-axis concept alignment for concept models.

    Returns (accuracy, axis_alignment, macro_alignment); the alignment pair
    is (None, None) for black-box models, which expose no concept scores.
    """
    if not samples:
        raise ValidationError("evaluate: empty sample list")
    p = md.bind(model, tape=None)
    chunks = list(_batched(samples, model.cfg.patch))

    if model.mode == "explicd":
        if anchors is None or kb is None:
            raise ValidationError("evaluate: concept model needs anchors and a knowledge base")

        def run(patches):
            out = md.explicd_forward(p, model.cfg, anchors, None, patches=patches)
            return np.argmax(out.logits.data, axis=-1), [s.data for s in out.scores]
    else:
        def run(patches):
            logits = md.blackbox_forward(p, model.cfg, None, patches=patches)
            return np.argmax(logits.data, axis=-1), None

    threads = _eval_threads()
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, chunks))  # submission order preserved
    else:
        results = [run(c) for c in chunks]

    labels = np.array([s.class_index for s in samples])
    preds = np.concatenate([r[0] for r in results])
    accuracy = float(np.mean(preds == labels))
    if model.mode != "explicd":
        return accuracy, None, None
    k = len(anchors.matrices)
    scores = [np.concatenate([r[1][i] for r in results]) for i in range(k)]
    truths = np.array([s.option_indices for s in samples])
    per_axis, macro = alignment_accuracy(scores, truths)
    return accuracy, per_axis, macro


def zero_shot_eval(model: Model, kb: KnowledgeBase, samples: list[SyntheticSample]) -> float:
    """Nearest class-anchor classification with an untrained encoder.

    Class anchors are hash embeddings of each class's concatenated option
    texts; image features are the mean-pooled encoder output, L2-normalized,
    so the score is a cosine.
    """
    if not samples:
        raise ValidationError("zero_shot_eval: empty sample list")
    class_anchors = np.stack([
        hash_embed_text(class_option_text(kb, name), model.cfg.dim) for name in kb.classes
    ])
    p = md.bind(model, tape=None)
    preds = []
    for patches in _batched(samples, model.cfg.patch):
        fmap = md.encode_patches(p, patches, model.cfg)
        pooled = ad.l2_normalize(fmap.mean(axis=-2))
        scores = pooled.data @ class_anchors.T
        preds.append(np.argmax(scores, axis=-1))
    labels = np.array([s.class_index for s in samples])
    return float(np.mean(np.concatenate(preds) == labels))


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    metrics: list[Metrics]
    loss_history: list[tuple[float, float, float]] = field(repr=False, default_factory=list)


def _write_metrics(metrics: list[Metrics], path) -> None:
    lines = [json.dumps(m.to_record()) for m in metrics]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def _train_loop(model: Model, cfg: TrainConfig, train_samples, step_fn, eval_fn,
                metrics_path=None, on_metrics=None) -> TrainResult:
    if not train_samples:
        raise ValidationError("training requires a non-empty train split")
    shuffle = rng.stream("shuffle", cfg.seed)
    order = shuffle.permutation(len(train_samples))
    cursor = len(order)  # force a fresh permutation on first use
    state = AdamWState.for_params(model.params)
    metrics: list[Metrics] = []
    history: list[tuple[float, float, float]] = []
    started = time.time()

    for step in range(1, cfg.max_steps + 1):
        if cursor + cfg.batch_size > len(order):
            order = shuffle.permutation(len(train_samples))
            cursor = 0
        idx = np.array(order[cursor:cursor + cfg.batch_size])
        cursor += cfg.batch_size

        total, ce, anchor, grads = step_fn(idx)
        if not np.isfinite(total):
            raise TrainingError(
                f"non-finite loss at step {step}: total={total} ce={ce} anchor={anchor}"
            )
        adamw_step(model.params, grads, state, cfg)
        history.append((total, ce, anchor))

        if step % cfg.eval_interval == 0 or step == cfg.max_steps:
            accuracy, per_axis, macro = eval_fn()
            record = Metrics(step=step, loss_total=total, loss_ce=ce, loss_anchor=anchor,
                             test_accuracy=accuracy, axis_alignment=per_axis,
                             macro_alignment=macro, wall_time=time.time() - started)
            metrics.append(record)
            if on_metrics:
                on_metrics(record)

    if metrics_path is not None:
        _write_metrics(metrics, metrics_path)
    return TrainResult(model=model, metrics=metrics, loss_history=history)


def train_explicd(model: Model, anchors: AnchorSet, kb: KnowledgeBase,
                  train_samples: list[SyntheticSample], test_samples: list[SyntheticSample],
                  cfg: TrainConfig, metrics_path=None, on_metrics=None) -> TrainResult:
    """Optimize encoder, concept module and head on the joint objective.

    Anchors are plain constants in the graph: they receive no gradient and
    have no optimizer buffers.
    """
    if model.mode != "explicd":
        raise ValidationError("train_explicd needs a concept model")
    anchors.check_against(kb)
    if model.option_counts != kb.option_counts or model.n_classes != len(kb.classes):
        raise ValidationError(
            f"model head layout {model.n_classes}x{model.option_counts} does not match "
            f"knowledge base {len(kb.classes)}x{kb.option_counts}"
        )
    if anchors.dim != model.cfg.dim:
        raise ValidationError(f"anchor dim {anchors.dim} vs model dim {model.cfg.dim}")

    patches = md.patchify(np.stack([s.image for s in train_samples]), model.cfg.patch)
    labels = np.array([s.class_index for s in train_samples])
    positives = kb.positive_matrix()  # (K, N)
    mcfg = model.cfg

    def step_fn(idx):
        tape = ad.Tape()
        p = md.bind(model, tape)
        out = md.explicd_forward(p, mcfg, anchors, None, patches=patches[idx])
        batch_labels = labels[idx]
        batch_pos = [positives[i][batch_labels] for i in range(positives.shape[0])]
        total, ce, anchor = md.loss_parts(out.logits, batch_labels, out.scores,
                                          batch_pos, mcfg.tau, mcfg.lambda_anchor)
        grads = tape.backward(total)
        named = {name: grads[leaf] for name, leaf in p.items()}
        return total.item(), ce.item(), anchor.item(), named

    def eval_fn():
        return evaluate(model, anchors, kb, test_samples)

    return _train_loop(model, cfg, train_samples, step_fn, eval_fn, metrics_path, on_metrics)


def train_blackbox(model: Model, train_samples: list[SyntheticSample],
                   test_samples: list[SyntheticSample], cfg: TrainConfig,
                   metrics_path=None, on_metrics=None) -> TrainResult:
    """Cross-entropy baseline: same encoder, mean-pooled features, linear head."""
    if model.mode != "blackbox":
        raise ValidationError("train_blackbox needs a black-box model")
    patches = md.patchify(np.stack([s.image for s in train_samples]), model.cfg.patch)
    labels = np.array([s.class_index for s in train_samples])
    mcfg = model.cfg

    def step_fn(idx):
        tape = ad.Tape()
        p = md.bind(model, tape)
        logits = md.blackbox_forward(p, mcfg, None, patches=patches[idx])
        ce = ad.cross_entropy_with_logits(logits, labels[idx])
        grads = tape.backward(ce)
        named = {name: grads[leaf] for name, leaf in p.items()}
        return ce.item(), ce.item(), 0.0, named

    def eval_fn():
        accuracy, _, _ = evaluate(model, None, None, test_samples)
        return accuracy, None, None

    return _train_loop(model, cfg, train_samples, step_fn, eval_fn, metrics_path, on_metrics)


def summary_dict(mode: str, result: TrainResult, model_cfg: ModelConfig,
                 train_cfg: TrainConfig) -> dict:
    final = result.metrics[-1].to_record() if result.metrics else None
    return {
        "mode": mode,
        "steps": train_cfg.max_steps,
        "final": final,
        "model_config": model_cfg.to_dict(),
        "train_config": train_cfg.to_dict(),
    }
