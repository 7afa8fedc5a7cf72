"""End-to-end training: ViT encoder, optional proximal unrolls at configured
blocks, linear classifier, cross-entropy, Adam-style updates.

Because the self-expression coefficients are batch-wise (m x m), predictions
with an active placement depend on batch composition; evaluation therefore
uses a seeded, fixed batch order.  The learnable variant's preconditioners
are sized to the training batch; undersized evaluation batches use the
leading principal submatrix and oversized ones embed the preconditioner in
an identity.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .data import DatasetSplit, batch_indices
from .errors import ConfigError, UsageError
from .prox import ProxSchedule, SelfRepresentation, default_step, unroll
from .rng import Rng
from .tensor import (
    GradientMap,
    Tape,
    Tensor,
    add_broadcast,
    backward,
    concat_rows,
    cross_entropy,
    matmul,
    take_rows,
    transpose,
)
from .vit import VitConfig, VitParams, class_column, embed_patches, init_vit, transformer_block

VARIANTS = ("baseline", "fixed-prox", "learnable-prox")

GAMMA_INIT = 0.1
GAMMA_MIN = 1e-6
GAMMA_MAX = 10.0


@dataclass(frozen=True)
class PlacementConfig:
    """Block indices (1-based) after which the proximal unroll is applied."""

    blocks: tuple[int, ...] = ()

    def validate(self, num_layers: int) -> None:
        for b in self.blocks:
            if b < 1 or b > num_layers:
                raise ConfigError(f"placement block {b} outside [1, {num_layers}]")

    @property
    def active(self) -> bool:
        return len(self.blocks) > 0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    learning_rate: float
    seed: int
    variant: str = "baseline"
    placement: tuple[int, ...] = ()
    lam: float = 0.1
    k_max: int = 5
    zero_diagonal: bool = False
    prox_lr_multiplier: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "baseline" and self.placement:
            raise ConfigError("baseline variant must have an empty placement")
        if self.variant != "baseline" and not self.placement:
            raise ConfigError(f"variant {self.variant!r} needs at least one placement block")
        if self.placement and self.batch_size < 2:
            raise ConfigError("batch size must be >= 2 when a placement is active")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be >= 1")


@dataclass
class RunReport:
    seed: int
    variant: str
    placement: tuple[int, ...]
    train_accuracy: list[float] = field(default_factory=list)
    test_accuracy: list[float] = field(default_factory=list)
    final_accuracy: float = 0.0
    objective_traces: list[list[float]] = field(default_factory=list)
    data_order_digest: str = ""
    wall_clock_seconds: float = 0.0
    steps: list[dict] = field(default_factory=list)

    def summary_dict(self) -> dict:
        """Deterministic content only: wall clock and step log are excluded
        so a re-run with the same seed serializes byte-identically."""
        d = asdict(self)
        d.pop("wall_clock_seconds")
        d.pop("steps")
        d["placement"] = list(self.placement)
        return d

    def to_json(self) -> str:
        return json.dumps(self.summary_dict(), indent=2, sort_keys=True)


@dataclass
class ProxParams:
    """Trainable unroll parameters for one placement block (learnable variant)."""

    gammas: list[Tensor]
    rs: list[Tensor]


@dataclass
class Model:
    vit_cfg: VitConfig
    cfg: TrainConfig
    num_classes: int
    vit: VitParams
    clf_w: Tensor
    clf_b: Tensor
    prox: dict[int, ProxParams] = field(default_factory=dict)

    def parameters(self) -> dict[str, Tensor]:
        from .vit import vit_param_dict

        params = vit_param_dict(self.vit)
        params["clf.weight"] = self.clf_w
        params["clf.bias"] = self.clf_b
        for block, pp in sorted(self.prox.items()):
            for k, g in enumerate(pp.gammas):
                params[f"prox.block{block}.gamma{k}"] = g
            for k, r in enumerate(pp.rs):
                params[f"prox.block{block}.r{k}"] = r
        return params


def build_model(vit_cfg: VitConfig, cfg: TrainConfig, num_classes: int, rng: Rng) -> Model:
    PlacementConfig(cfg.placement).validate(vit_cfg.num_layers)
    vit = init_vit(vit_cfg, rng.child("vit"))
    d = vit_cfg.embed_dim
    clf_w = Tensor(rng.child("clf").truncated_normal(d, num_classes, std=0.02))
    clf_b = Tensor(np.zeros((1, num_classes)))
    prox: dict[int, ProxParams] = {}
    if cfg.variant == "learnable-prox":
        m = cfg.batch_size
        for block in cfg.placement:
            # R_k starts at identity so the learnable unroll initially matches
            # the fixed one; gamma_k starts at a safe constant.
            prox[block] = ProxParams(
                gammas=[Tensor(np.full((1, 1), GAMMA_INIT)) for _ in range(cfg.k_max)],
                rs=[Tensor(np.eye(m)) for _ in range(cfg.k_max)],
            )
    return Model(vit_cfg, cfg, num_classes, vit, clf_w, clf_b, prox)


def _fit_preconditioner(r: Tensor, m: int) -> Tensor | np.ndarray:
    """Adapt a trained m0 x m0 preconditioner to a batch of m samples."""
    m0 = r.rows
    if m == m0:
        return r
    if m < m0:
        return Tensor(r.data[:m, :m])
    out = np.eye(m)
    out[:m0, :m0] = r.data
    return Tensor(out)


def _schedule_for_block(model: Model, block: int, z: Tensor, m: int) -> ProxSchedule:
    cfg = model.cfg
    if cfg.variant == "fixed-prox":
        # gamma recomputed per batch from the detached feature values
        gamma = default_step(z.data)
        return ProxSchedule.fixed(cfg.lam, gamma, cfg.k_max, cfg.zero_diagonal)
    pp = model.prox[block]
    rs = [_fit_preconditioner(r, m) for r in pp.rs]
    return ProxSchedule(
        lam=cfg.lam, gammas=list(pp.gammas), preconditioners=rs, zero_diagonal=cfg.zero_diagonal
    )


@dataclass
class ForwardResult:
    logits: Tensor
    class_tokens: Tensor  # final-layer class tokens before any final-block prox
    features: Tensor  # what the classifier consumed (post-prox when placed at L)
    per_block: dict[int, SelfRepresentation] = field(default_factory=dict)


def forward_classify(images, model: Model, placement: PlacementConfig | None = None) -> ForwardResult:
    """Run a batch through the encoder with unrolls at the placement blocks.

    Intermediate placements replace only the class-token row of each token
    sequence; a placement at the final block replaces the feature matrix fed
    to the classifier.
    """
    cfg, vit_cfg = model.cfg, model.vit_cfg
    placement = PlacementConfig(tuple(sorted(cfg.placement))) if placement is None else placement
    placement.validate(vit_cfg.num_layers)
    imgs = _image_list(images)
    m = len(imgs)
    if placement.active and m < 2:
        raise ConfigError("self-expression placement needs batches of at least 2 samples")

    seqs = [
        embed_patches(img, vit_cfg.patch, model.vit.embed, model.vit.class_token, model.vit.pos)
        for img in imgs
    ]
    per_block: dict[int, SelfRepresentation] = {}
    class_tokens = None
    features = None
    last = vit_cfg.num_layers
    for layer in range(1, last + 1):
        block = model.vit.blocks[layer - 1]
        seqs = [transformer_block(s, block, vit_cfg.dk) for s in seqs]
        if layer == last:
            class_tokens = _gather_class_tokens(seqs)
        if layer in placement.blocks:
            z = class_tokens if layer == last else _gather_class_tokens(seqs)
            # identity start: the unroll initially passes features through and
            # phases in cross-sample structure as the backbone matures, which
            # keeps from-scratch joint training from stalling at W == 0
            w0 = Tensor(np.eye(m))
            rep = unroll(z, _schedule_for_block(model, layer, z, m), w0)
            per_block[layer] = rep
            if layer == last:
                features = rep.z_hat
            else:
                seqs = [_replace_class_row(s, rep.z_hat, j) for j, s in enumerate(seqs)]
    if features is None:
        features = class_tokens
    logits = add_broadcast(matmul(transpose(features), model.clf_w), model.clf_b)
    return ForwardResult(logits=logits, class_tokens=class_tokens, features=features,
                         per_block=per_block)


def _image_list(images) -> list[np.ndarray]:
    if isinstance(images, np.ndarray) and images.ndim >= 3:
        return [images[i] for i in range(images.shape[0])]
    return list(images)


def _gather_class_tokens(seqs) -> Tensor:
    from .tensor import concat_cols

    return concat_cols([class_column(s) for s in seqs])


def _replace_class_row(seq: Tensor, z_hat: Tensor, col: int) -> Tensor:
    new_row = transpose(_take_col(z_hat, col))
    rest = take_rows(seq, 1, seq.rows)
    return concat_rows([new_row, rest])


def _take_col(a: Tensor, j: int) -> Tensor:
    from .tensor import take_cols

    return take_cols(a, j, j + 1)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


class Adam:
    """First/second-moment update rule (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 lr_multipliers: dict[str, float] | None = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}
        self.lr_multipliers = lr_multipliers or {}

    def _lr_for(self, name: str) -> float:
        for prefix, mult in self.lr_multipliers.items():
            if name.startswith(prefix):
                return self.lr * mult
        return self.lr

    def step(self, grads: GradientMap) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[p]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[name] / b1c
            vhat = self.v[name] / b2c
            p.data = p.data - self._lr_for(name) * mhat / (np.sqrt(vhat) + self.eps)


def _clamp_gammas(model: Model) -> None:
    for pp in model.prox.values():
        for g in pp.gammas:
            g.data = np.clip(g.data, GAMMA_MIN, GAMMA_MAX)


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate_accuracy(model: Model, samples: np.ndarray, labels: np.ndarray,
                      batch_size: int, seed: int) -> float:
    """Accuracy over a split batched at the training batch size (seeded order)."""
    rng = Rng(seed).child("eval-order")
    min_batch = 2 if model.cfg.placement else 1
    total = 0
    hits = 0.0
    for idx in batch_indices(len(labels), batch_size, rng, min_batch=min_batch):
        res = forward_classify(samples[idx], model)
        hits += _accuracy(res.logits.data, labels[idx]) * len(idx)
        total += len(idx)
    return hits / total


@dataclass
class EvalResult:
    accuracy: float
    features_pre: np.ndarray  # d x M, final-layer class tokens
    features_post: np.ndarray  # d x M, after final-block prox (== pre when none)
    labels: np.ndarray
    coefficients: list[np.ndarray]  # per evaluation batch, m x m
    batch_sizes: list[int]


def evaluate(model: Model, split: DatasetSplit, part: str = "test",
             seed: int | None = None) -> EvalResult:
    """Accuracy plus exported pre/post-prox features for geometry analysis."""
    samples, labels = split.part(part)
    rng = Rng(model.cfg.seed if seed is None else seed).child("eval-order")
    min_batch = 2 if model.cfg.placement else 1
    pre_cols, post_cols, lab_cols, coeffs, sizes = [], [], [], [], []
    hits, total = 0.0, 0
    final_block = model.vit_cfg.num_layers
    for idx in batch_indices(len(labels), model.cfg.batch_size, rng, min_batch=min_batch):
        res = forward_classify(samples[idx], model)
        hits += _accuracy(res.logits.data, labels[idx]) * len(idx)
        total += len(idx)
        pre_cols.append(res.class_tokens.data)
        post_cols.append(res.features.data)
        lab_cols.append(labels[idx])
        sizes.append(len(idx))
        if final_block in res.per_block:
            coeffs.append(res.per_block[final_block].w_final.data)
    return EvalResult(
        accuracy=hits / total,
        features_pre=np.concatenate(pre_cols, axis=1),
        features_post=np.concatenate(post_cols, axis=1),
        labels=np.concatenate(lab_cols),
        coefficients=coeffs,
        batch_sizes=sizes,
    )


def train(cfg: TrainConfig, vit_cfg: VitConfig, split: DatasetSplit) -> tuple[RunReport, Model]:
    """Deterministic mini-batch training of all parameters jointly."""
    xtr, ytr = split.part("train")
    xte, yte = split.part("test")
    if len(ytr) == 0 or len(yte) == 0:
        raise UsageError("training needs nonempty train and test parts")
    num_classes = int(max(ytr.max(), yte.max())) + 1
    rng = Rng(cfg.seed)
    model = build_model(vit_cfg, cfg, num_classes, rng.child("init"))
    opt = Adam(
        model.parameters(),
        lr=cfg.learning_rate,
        lr_multipliers={"prox.": cfg.prox_lr_multiplier},
    )
    report = RunReport(seed=cfg.seed, variant=cfg.variant, placement=tuple(cfg.placement))
    digest = hashlib.sha256()
    min_batch = 2 if cfg.placement else 1
    t0 = time.perf_counter()
    step = 0
    final_block = vit_cfg.num_layers
    for epoch in range(cfg.epochs):
        epoch_trace: list[float] | None = None
        for idx in batch_indices(len(ytr), cfg.batch_size, rng.child(("shuffle", epoch)),
                                 min_batch=min_batch):
            digest.update(idx.astype(np.int64).tobytes())
            with Tape() as tape:
                res = forward_classify(xtr[idx], model)
                loss = cross_entropy(res.logits, ytr[idx])
            grads = backward(tape, loss)
            opt.step(grads)
            _clamp_gammas(model)
            step += 1
            report.steps.append(
                {"step": step, "epoch": epoch, "loss": loss.item(),
                 "accuracy": _accuracy(res.logits.data, ytr[idx])}
            )
            if final_block in res.per_block:
                epoch_trace = res.per_block[final_block].objective_trace
        report.train_accuracy.append(
            evaluate_accuracy(model, xtr, ytr, cfg.batch_size, cfg.seed)
        )
        report.test_accuracy.append(
            evaluate_accuracy(model, xte, yte, cfg.batch_size, cfg.seed)
        )
        if epoch_trace is not None:
            report.objective_traces.append(epoch_trace)
    report.final_accuracy = report.test_accuracy[-1]
    report.data_order_digest = digest.hexdigest()
    report.wall_clock_seconds = time.perf_counter() - t0
    return report, model


def placement_sweep(cfg: TrainConfig, vit_cfg: VitConfig, split: DatasetSplit,
                    placements: Sequence[tuple[int, ...]]) -> list[dict]:
    """Train one model per placement with a shared seed and data order."""
    rows = []
    for blocks in placements:
        blocks = tuple(sorted(blocks))
        variant = cfg.variant
        if not blocks:
            variant = "baseline"
        elif variant == "baseline":
            variant = "fixed-prox"
        arm_cfg = TrainConfig(
            epochs=cfg.epochs, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
            seed=cfg.seed, variant=variant, placement=blocks, lam=cfg.lam, k_max=cfg.k_max,
            zero_diagonal=cfg.zero_diagonal, prox_lr_multiplier=cfg.prox_lr_multiplier,
        )
        report, _ = train(arm_cfg, vit_cfg, split)
        rows.append(
            {"blocks": blocks, "accuracy": report.final_accuracy, "seed": cfg.seed,
             "data_order_digest": report.data_order_digest}
        )
    return rows
