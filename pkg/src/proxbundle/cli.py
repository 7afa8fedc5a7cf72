"""Command-line surface: train / sweep / geometry / prox-bench.

Experiments are described by a JSON config document validated against a
strict schema (unknown keys rejected, errors name the field path).  Flags
override document fields.  Exit codes: 0 success, 1 runtime failure,
2 usage/config error.  ``PROXBUNDLE_THREADS`` caps sweep-arm parallelism.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .data import DatasetSplit, LabeledFeatures, gen_images, load_idx, SyntheticImageSpec
from .errors import ConfigError, DimensionError, FormatError, UsageError
from .geometry import TsneConfig, class_distance_matrix, separability_report, tsne_embed
from .pipeline import TrainConfig, evaluate, train
from .prox import ProxSchedule, default_step, unroll, write_trace_csv
from .pxb import read_matrix, write_pxb
from .tensor import Tensor
from .vit import PatchEmbedConfig, VitConfig, load_checkpoint, save_checkpoint


# ---------------------------------------------------------------------------
# config schema
# ---------------------------------------------------------------------------

_DATASET_KEYS = {
    "synthetic-images": {"kind": str, "image_size": int, "classes": int,
                         "samples_per_class": int, "noise": (int, float), "seed": int},
    "idx": {"kind": str, "images": str, "labels": str, "seed": int},
}
_MODEL_KEYS = {"layers": int, "heads": int, "embed_dim": int, "ffn_dim": int,
               "patch_size": int, "channels": int, "head_dim": int,
               "positional_embedding": bool}
_MODEL_REQUIRED = ("layers", "heads", "embed_dim", "ffn_dim", "patch_size")
_TRAIN_KEYS = {"epochs": int, "batch_size": int, "learning_rate": (int, float),
               "variant": str, "prox_lr_multiplier": (int, float)}
_TRAIN_REQUIRED = ("epochs", "batch_size", "learning_rate", "variant")
_PROX_KEYS = {"lambda": (int, float), "k_max": int, "zero_diagonal": bool,
              "placement": list}
_TOP_REQUIRED = ("seed", "dataset", "model", "train")


def _check_keys(section: dict, allowed: dict, required, path: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown key")
    for key in required:
        if key not in section:
            raise ConfigError(f"{path}.{key}: missing required field")
    for key, value in section.items():
        if not isinstance(value, allowed[key]) or isinstance(value, bool) and allowed[key] is int:
            raise ConfigError(f"{path}.{key}: expected {allowed[key]}, got {type(value).__name__}")


def validate_config(doc: dict) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError("config: expected a JSON object")
    top_allowed = {"seed": int, "out_dir": str, "dataset": dict, "model": dict,
                   "train": dict, "prox": dict}
    for key in doc:
        if key not in top_allowed:
            raise ConfigError(f"{key}: unknown key")
    for key in _TOP_REQUIRED:
        if key not in doc:
            raise ConfigError(f"{key}: missing required field")

    ds = doc["dataset"]
    kind = ds.get("kind")
    if kind not in _DATASET_KEYS:
        raise ConfigError(f"dataset.kind: expected one of {sorted(_DATASET_KEYS)}, got {kind!r}")
    required = ("kind", "images", "labels") if kind == "idx" else tuple(
        k for k in _DATASET_KEYS[kind] if k != "seed"
    )
    _check_keys(ds, _DATASET_KEYS[kind], required, "dataset")
    _check_keys(doc["model"], _MODEL_KEYS, _MODEL_REQUIRED, "model")
    _check_keys(doc["train"], _TRAIN_KEYS, _TRAIN_REQUIRED, "train")
    variant = doc["train"]["variant"]
    if variant not in ("baseline", "fixed-prox", "learnable-prox"):
        raise ConfigError(f"train.variant: unknown variant {variant!r}")
    if "prox" in doc:
        _check_keys(doc["prox"], _PROX_KEYS, (), "prox")
        placement = doc["prox"].get("placement", [])
        if not all(isinstance(b, int) and not isinstance(b, bool) for b in placement):
            raise ConfigError("prox.placement: expected a list of block indices")
    elif variant != "baseline":
        raise ConfigError("prox: missing required field (needed unless variant is baseline)")
    return doc


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return validate_config(doc)


def _build_dataset(ds: dict) -> DatasetSplit:
    if ds["kind"] == "synthetic-images":
        spec = SyntheticImageSpec(
            image_size=ds["image_size"], classes=ds["classes"],
            samples_per_class=ds["samples_per_class"], noise=float(ds["noise"]),
            seed=ds.get("seed", 0),
        )
        return gen_images(spec)
    return load_idx(ds["images"], ds["labels"], seed=ds.get("seed", 0))


def _build_configs(doc: dict) -> tuple[TrainConfig, VitConfig]:
    m = doc["model"]
    ds = doc["dataset"]
    image_size = ds.get("image_size", 16) if ds["kind"] == "synthetic-images" else None
    prox = doc.get("prox", {})
    patch = PatchEmbedConfig(
        image_height=image_size if image_size else 28,
        image_width=image_size if image_size else 28,
        channels=m.get("channels", 1),
        patch_size=m["patch_size"],
        embed_dim=m["embed_dim"],
    )
    vit_cfg = VitConfig(
        num_layers=m["layers"], num_heads=m["heads"], embed_dim=m["embed_dim"],
        ffn_dim=m["ffn_dim"], patch=patch, head_dim=m.get("head_dim"),
        positional_embedding=m.get("positional_embedding", True),
    )
    t = doc["train"]
    cfg = TrainConfig(
        epochs=t["epochs"], batch_size=t["batch_size"],
        learning_rate=float(t["learning_rate"]), seed=doc["seed"], variant=t["variant"],
        placement=tuple(sorted(prox.get("placement", []))),
        lam=float(prox.get("lambda", 0.1)), k_max=prox.get("k_max", 5),
        zero_diagonal=prox.get("zero_diagonal", False),
        prox_lr_multiplier=float(t.get("prox_lr_multiplier", 1.0)),
    )
    return cfg, vit_cfg


def _patch_for_idx(doc: dict, split: DatasetSplit, vit_cfg: VitConfig) -> VitConfig:
    h, w = split.samples.shape[1], split.samples.shape[2]
    if (vit_cfg.patch.image_height, vit_cfg.patch.image_width) == (h, w):
        return vit_cfg
    patch = PatchEmbedConfig(h, w, vit_cfg.patch.channels, vit_cfg.patch.patch_size,
                             vit_cfg.patch.embed_dim)
    return VitConfig(vit_cfg.num_layers, vit_cfg.num_heads, vit_cfg.embed_dim,
                     vit_cfg.ffn_dim, patch, vit_cfg.head_dim, vit_cfg.positional_embedding)


def _out_dir(doc: dict, args) -> Path:
    out = args.out or doc.get("out_dir")
    if not out:
        raise ConfigError("out_dir: missing required field (or pass --out)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _apply_overrides(doc: dict, args) -> dict:
    if args.seed is not None:
        doc = dict(doc)
        doc["seed"] = args.seed
    return doc


def _export_model(model, out: Path, meta: dict) -> None:
    tensors = {name: t.data for name, t in model.parameters().items()}
    save_checkpoint(out / "checkpoint", tensors, meta)


def _write_eval_exports(out: Path, result) -> None:
    write_pxb(out / "features_pre.pxb", result.features_pre)
    write_pxb(out / "features_post.pxb", result.features_post)
    (out / "labels.json").write_text(json.dumps([int(v) for v in result.labels]))
    for i, w in enumerate(result.coefficients):
        write_pxb(out / f"coefficients_batch{i}.pxb", w)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    doc = _apply_overrides(load_config(args.config), args)
    out = _out_dir(doc, args)
    cfg, vit_cfg = _build_configs(doc)
    split = _build_dataset(doc["dataset"])
    if doc["dataset"]["kind"] == "idx":
        vit_cfg = _patch_for_idx(doc, split, vit_cfg)
    report, model = train(cfg, vit_cfg, split)
    (out / "report.json").write_text(report.to_json())
    with open(out / "train_log.jsonl", "w") as fh:
        for entry in report.steps:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    meta = {"config": {k: doc[k] for k in ("seed", "dataset", "model", "train")},
            "prox": doc.get("prox", {}), "num_classes": model.num_classes,
            "batch_size": cfg.batch_size}
    _export_model(model, out, meta)
    result = evaluate(model, split, part="test")
    _write_eval_exports(out, result)
    print(f"final test accuracy {report.final_accuracy:.4f} "
          f"({report.wall_clock_seconds:.1f}s, artifacts in {out})")
    return 0


def _parse_placements(text: str, num_layers: int) -> list[tuple[int, ...]]:
    placements = []
    for token in text.split(";"):
        token = token.strip()
        if token in ("", "none", "∅"):
            placements.append(())
            continue
        blocks = []
        for part in token.split("+"):
            part = part.strip()
            blocks.append(num_layers if part == "L" else int(part))
        placements.append(tuple(sorted(blocks)))
    return placements


def cmd_sweep(args) -> int:
    doc = _apply_overrides(load_config(args.config), args)
    out = _out_dir(doc, args)
    cfg, vit_cfg = _build_configs(doc)
    split = _build_dataset(doc["dataset"])
    if doc["dataset"]["kind"] == "idx":
        vit_cfg = _patch_for_idx(doc, split, vit_cfg)
    try:
        placements = _parse_placements(args.placements, vit_cfg.num_layers)
    except ValueError as exc:
        raise ConfigError(f"placements: {exc}") from exc
    for blocks in placements:
        for b in blocks:
            if b < 1 or b > vit_cfg.num_layers:
                raise ConfigError(f"placements: block {b} outside [1, {vit_cfg.num_layers}]")

    from .pipeline import placement_sweep

    workers = _thread_cap()
    if workers > 1:
        def run_one(blocks):
            return placement_sweep(cfg, vit_cfg, split, [blocks])[0]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_one, placements))
    else:
        rows = placement_sweep(cfg, vit_cfg, split, placements)
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["blocks", "accuracy", "seed"])
        for row in rows:
            blocks = "+".join(str(b) for b in row["blocks"]) or "none"
            writer.writerow([blocks, repr(row["accuracy"]), row["seed"]])
    digests = {row["data_order_digest"] for row in rows}
    print(f"wrote {out / 'sweep.csv'} ({len(rows)} rows, "
          f"{'shared' if len(digests) == 1 else 'DIFFERING'} data order)")
    return 0


def _thread_cap() -> int:
    raw = os.environ.get("PROXBUNDLE_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"PROXBUNDLE_THREADS: expected an integer, got {raw!r}")


def _load_labeled(features_path, labels_path) -> LabeledFeatures:
    feats = read_matrix(features_path)
    try:
        labels = json.loads(Path(labels_path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read labels {labels_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{labels_path}: invalid JSON: {exc.msg}") from exc
    return LabeledFeatures(feats, np.asarray(labels))


def cmd_geometry(args) -> int:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    lf = _load_labeled(args.features, args.labels)
    dm = class_distance_matrix(lf)
    _write_matrix_csv(out / "distance_matrix.csv", dm, lf.classes())
    if args.post:
        post = LabeledFeatures(read_matrix(args.post), lf.labels)
        report = separability_report(lf, post)
        dm_post = class_distance_matrix(post)
        _write_matrix_csv(out / "distance_matrix_post.csv", dm_post, lf.classes())
    else:
        report = separability_report(lf, lf)
    (out / "separability.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    if args.tsne:
        cfg = TsneConfig(perplexity=args.perplexity, seed=args.seed or 0)
        emb, kl = tsne_embed(lf.features, cfg)
        with open(out / "tsne.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "label"])
            for row, lab in zip(emb, lf.labels):
                writer.writerow([repr(row[0]), repr(row[1]), int(lab)])
        with open(out / "tsne_kl.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "kl"])
            for i, v in enumerate(kl):
                writer.writerow([i, repr(v)])
    print(f"geometry artifacts written to {out}")
    return 0


def _write_matrix_csv(path, matrix: np.ndarray, classes) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class"] + [str(int(c)) for c in classes])
        for c, row in zip(classes, matrix):
            writer.writerow([str(int(c))] + [repr(float(v)) for v in row])


def cmd_prox_bench(args) -> int:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    z = read_matrix(args.features)
    if z.shape[1] < 2:
        raise UsageError(f"self-expression needs at least 2 feature columns, got {z.shape[1]}")
    if args.checkpoint:
        schedule = _schedule_from_checkpoint(args.checkpoint, args.block, z)
    else:
        gamma = args.gamma if args.gamma is not None else default_step(z)
        schedule = ProxSchedule.fixed(args.lam, gamma, args.k_max, args.zero_diagonal)
    # checkpointed schedules replay the training-time unroll, which starts
    # at the identity; standalone benching uses the classical zero start
    start = args.w0 or ("identity" if args.checkpoint else "zero")
    w0 = None if start == "zero" else Tensor(np.eye(z.shape[1]))
    rep = unroll(z, schedule, w0)
    write_trace_csv(out / "objective_trace.csv", rep.objective_trace)
    write_pxb(out / "w_final.pxb", rep.w_final.data)
    print(f"unrolled {schedule.k_max} steps; objective "
          f"{rep.objective_trace[0]:.6g} -> {rep.objective_trace[-1]:.6g}")
    return 0


def _schedule_from_checkpoint(ckpt_dir, block: int | None, z: np.ndarray) -> ProxSchedule:
    tensors, meta = load_checkpoint(ckpt_dir)
    blocks = sorted({int(name.split(".")[1][5:]) for name in tensors
                     if name.startswith("prox.block")})
    if not blocks:
        raise UsageError(f"checkpoint {ckpt_dir} contains no trained unroll parameters")
    if block is None:
        block = blocks[-1]
    elif block not in blocks:
        raise UsageError(f"checkpoint has unroll parameters for blocks {blocks}, not {block}")
    prefix = f"prox.block{block}"
    gammas, rs = [], []
    for k in range(10_000):
        gkey, rkey = f"{prefix}.gamma{k}", f"{prefix}.r{k}"
        if gkey not in tensors:
            break
        gammas.append(float(tensors[gkey][0, 0]))
        rs.append(tensors[rkey])
    lam = float(meta.get("prox", {}).get("lambda", 0.1))
    zero_diag = bool(meta.get("prox", {}).get("zero_diagonal", False))
    m = z.shape[1]
    if rs and rs[0].shape[0] != m:
        raise UsageError(
            f"checkpoint preconditioners are {rs[0].shape[0]}x{rs[0].shape[0]} "
            f"but features have {m} columns"
        )
    return ProxSchedule(lam=lam, gammas=gammas, preconditioners=rs, zero_diagonal=zero_diag)


# ---------------------------------------------------------------------------
# entry
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proxbundle")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config document")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--out")
    p_train.set_defaults(func=cmd_train)

    p_sweep = sub.add_parser("sweep", help="train one arm per placement")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--placements", required=True,
                         help="semicolon-separated, e.g. 'none;2;L' or '1+2'")
    p_sweep.add_argument("--seed", type=int)
    p_sweep.add_argument("--out")
    p_sweep.set_defaults(func=cmd_sweep)

    p_geo = sub.add_parser("geometry", help="distance matrices and t-SNE from features")
    p_geo.add_argument("--features", required=True, help="PXB1 d x m feature matrix")
    p_geo.add_argument("--labels", required=True, help="JSON list of integer labels")
    p_geo.add_argument("--post", help="optional post-processing features (PXB1)")
    p_geo.add_argument("--tsne", action="store_true")
    p_geo.add_argument("--perplexity", type=float, default=15.0)
    p_geo.add_argument("--seed", type=int)
    p_geo.add_argument("--out")
    p_geo.set_defaults(func=cmd_geometry)

    p_bench = sub.add_parser("prox-bench", help="run the unroll standalone")
    p_bench.add_argument("--features", required=True, help="PXB1 d x m feature matrix")
    p_bench.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p_bench.add_argument("--k-max", dest="k_max", type=int, default=200)
    p_bench.add_argument("--gamma", type=float, help="step size (default 1/L)")
    p_bench.add_argument("--zero-diagonal", action="store_true")
    p_bench.add_argument("--w0", choices=["zero", "identity"],
                         help="start point (default: identity for checkpoints, else zero)")
    p_bench.add_argument("--checkpoint", help="load a trained schedule from this directory")
    p_bench.add_argument("--block", type=int, help="placement block within the checkpoint")
    p_bench.add_argument("--out")
    p_bench.set_defaults(func=cmd_prox_bench)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ConfigError, UsageError, FormatError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())
