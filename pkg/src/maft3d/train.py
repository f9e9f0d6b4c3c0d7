"""Deterministic training engine: data loading, epochs, logging, checkpoints.

All randomness flows from the config seed through named generator streams
(parameter init, epoch shuffling, per-scene cropping), so a (seed, config,
data) triple fixes every logged number, and checkpoints capture enough
state to resume bit-identically.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as cfgmod
from . import numcore as nc
from .numcore import _kernels
from .config import Config
from .decoder import DecoderParams, ModelConfig, forward
from .matchloss import LossWeights, compute_loss
from .metrics import EvalReport, evaluate_scenes, extract_instances
from .numcore import AdamW
from .scene import (
    GenParams,
    GroundTruth,
    SceneTokens,
    crop_to_limit,
    generate_scene,
    load_scene,
    save_scene,
    voxelize,
)


class TrainingAborted(RuntimeError):
    """Non-finite loss; carries a reference to the last good checkpoint."""

    def __init__(self, message: str, last_checkpoint: str | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


def model_config(cfg: Config) -> ModelConfig:
    return ModelConfig(
        layers=cfg.decoder.layers,
        heads=cfg.decoder.heads,
        d=cfg.decoder.d,
        ffn=cfg.decoder.ffn,
        queries=cfg.decoder.queries,
        classes=cfg.data.classes,
        rpe_size=cfg.rpe.s,
        rpe_len=cfg.rpe.length,
        ape_temperature=cfg.ape.temperature,
        knn=cfg.data.knn,
    )


def gen_params(cfg: Config) -> GenParams:
    g = cfg.gen
    return GenParams(
        extent=(g.extent_x, g.extent_y, g.extent_z),
        n_inst=(g.n_inst_min, g.n_inst_max),
        noise_sigma=g.noise_sigma,
        clutter_fraction=g.clutter_fraction,
        inst_points=(g.inst_points_min, g.inst_points_max),
        min_separation=g.min_separation,
        n_classes=cfg.data.classes,
    )


def loss_weights(cfg: Config) -> LossWeights:
    ls = cfg.loss
    return LossWeights(
        cls=ls.lambda_cls,
        bce=ls.lambda_bce,
        dice=ls.lambda_dice,
        center=ls.lambda_center,
        no_object=ls.no_object_weight,
    )


def build_model(cfg: Config) -> DecoderParams:
    return DecoderParams(model_config(cfg), np.random.default_rng([cfg.seed, 0]))


def poly_lr(lr0: float, step: int, total_steps: int, power: float) -> float:
    frac = min(step / max(total_steps, 1), 1.0)
    return lr0 * (1.0 - frac) ** power


def generate_dataset(cfg: Config, out_dir, count: int) -> list[Path]:
    """Write ``count`` scene files plus a manifest; seeds are seed + index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = gen_params(cfg)
    paths = []
    rows = ["file\tpoints\tinstances"]
    for i in range(count):
        scene = generate_scene(cfg.seed + i, params)
        path = out / f"scene_{i:05d}.txt"
        save_scene(scene, path)
        paths.append(path)
        rows.append(f"{path.name}\t{scene.n_points}\t{scene.n_instances}")
    (out / "manifest.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return paths


def load_split(split_dir, cfg: Config) -> list[tuple[SceneTokens, GroundTruth]]:
    split_dir = Path(split_dir)
    files = sorted(split_dir.glob("scene_*.txt"))
    if not files:
        raise FileNotFoundError(f"no scene files under {split_dir}")
    out = []
    for i, path in enumerate(files):
        scene = load_scene(path)
        crop_rng = np.random.default_rng([cfg.seed, 2, i])
        scene = crop_to_limit(scene, cfg.data.max_points, crop_rng)
        out.append(voxelize(scene, cfg.data.voxel_size))
    return out


def evaluate_model(
    params: DecoderParams, cfg: Config, scenes: list[tuple[SceneTokens, GroundTruth]]
) -> EvalReport:
    def eval_one(pair):
        tokens, gt = pair
        with nc.check_finite(False):
            preds, _ = forward(tokens, params, cfg.mode, refine=cfg.ablation.refinement)
            extracted = extract_instances(preds[-1], cfg.eval.top_k, cfg.eval.min_tokens)
        return extracted, preds[0], gt, tokens.positions

    workers = cfg.train.workers
    env_cap = os.environ.get("MAFT_THREADS")
    if env_cap:
        workers = max(1, min(workers, int(env_cap)))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(eval_one, scenes))
    else:
        rows = [eval_one(pair) for pair in scenes]
    results = [r[0] for r in rows]
    layer1 = [r[1] for r in rows]
    gts = [r[2] for r in rows]
    positions = [r[3] for r in rows]
    return evaluate_scenes(results, layer1, gts, positions)


_LOG_COLUMNS = (
    "epoch",
    "loss_total",
    "loss_cls",
    "loss_bce",
    "loss_dice",
    "loss_center",
    "lr",
    "val_map",
    "val_map50",
    "val_map25",
    "recall25",
    "recall50",
)


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def _save_state(path, model: DecoderParams, opt: AdamW, order_rng, epoch, global_step, cfg):
    tensors = {name: p.data for name, p in model.named().items()}
    for name in model.named():
        tensors[f"optim.m.{name}"] = opt.m[name]
        tensors[f"optim.v.{name}"] = opt.v[name]
    meta = {
        "config": cfgmod.to_text(cfg),
        "epoch": epoch,
        "global_step": global_step,
        "optim_step": opt.step_count,
        "order_rng": order_rng.bit_generator.state,
    }
    ckpt.save(path, tensors, meta)


def load_model(path) -> tuple[Config, DecoderParams, dict]:
    """Rebuild a model from a checkpoint; returns (config, params, meta)."""
    tensors, meta = ckpt.load(path)
    cfg = cfgmod.from_text(meta["config"])
    model = build_model(cfg)
    try:
        model.load_arrays({k: v for k, v in tensors.items() if not k.startswith("optim.")})
    except (KeyError, nc.DimensionError) as exc:
        raise ckpt.CheckpointError(f"{path}: {exc}") from None
    return cfg, model, meta


def _resume_state(path, cfg: Config, model: DecoderParams, opt: AdamW, order_rng):
    tensors, meta = ckpt.load(path)
    if meta["config"] != cfgmod.to_text(cfg):
        raise ckpt.CheckpointError(
            "checkpoint configuration does not match the requested configuration"
        )
    model.load_arrays({k: v for k, v in tensors.items() if not k.startswith("optim.")})
    opt.load_state_dict(
        {
            "step_count": meta["optim_step"],
            "m": {k: tensors[f"optim.m.{k}"] for k in model.named()},
            "v": {k: tensors[f"optim.v.{k}"] for k in model.named()},
        }
    )
    state = meta["order_rng"]
    state["state"] = {k: int(v) for k, v in state["state"].items()}
    order_rng.bit_generator.state = state
    return int(meta["epoch"]), int(meta["global_step"])


def run_training(
    cfg: Config,
    data_dir,
    out_dir,
    resume=None,
    quiet: bool = False,
) -> dict:
    """Train on data_dir/train, validate on data_dir/val, write artifacts to out_dir."""
    cfg.validate()
    data_dir = Path(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_scenes = load_split(data_dir / "train", cfg)
    val_scenes = load_split(data_dir / "val", cfg)

    model = build_model(cfg)
    opt = AdamW(
        model.named(),
        lr=cfg.optim.lr,
        weight_decay=cfg.optim.weight_decay,
    )
    order_rng = np.random.default_rng([cfg.seed, 1])
    weights = loss_weights(cfg)

    start_epoch, global_step = 0, 0
    if resume is not None:
        start_epoch, global_step = _resume_state(resume, cfg, model, opt, order_rng)

    batch_size = cfg.train.batch_size
    steps_per_epoch = math.ceil(len(train_scenes) / batch_size)
    total_steps = max(1, steps_per_epoch * cfg.train.epochs)

    log_path = out / "train_log.tsv"
    trace_path = out / "matching_trace.tsv"
    log_mode = "a" if resume is not None else "w"
    log_fh = open(log_path, log_mode, encoding="utf-8")
    trace_fh = open(trace_path, log_mode, encoding="utf-8")
    if resume is None:
        log_fh.write("\t".join(_LOG_COLUMNS) + "\n")
        trace_fh.write("step\tquery\tx\ty\tz\n")

    n_workers = cfg.train.workers
    env_cap = os.environ.get("MAFT_THREADS")
    if env_cap:
        n_workers = max(1, min(n_workers, int(env_cap)))
    _kernels.warmup()  # compile before worker threads share the dispatcher
    pool = ThreadPoolExecutor(max_workers=n_workers) if n_workers > 1 else None

    def scene_pass(scene_index: int, inv_batch: float):
        tokens, gt = train_scenes[scene_index]
        grad_map: dict = {}
        with nc.check_finite(False):
            with nc.Graph() as graph:
                preds, _ = forward(tokens, model, cfg.mode, refine=cfg.ablation.refinement)
                loss, breakdown, assigns = compute_loss(
                    preds,
                    gt,
                    weights,
                    tokens.bounds,
                    center_match=cfg.ablation.center_match,
                    center_loss=cfg.ablation.center_loss,
                )
                graph.backward(loss * inv_batch, into=grad_map)
        return breakdown, assigns[-1], gt.centers, grad_map

    last_checkpoint: str | None = None
    final_report: EvalReport | None = None
    try:
        for epoch in range(start_epoch, cfg.train.epochs):
            order = order_rng.permutation(len(train_scenes))
            term_sums = {k: 0.0 for k in ("total", "cls", "bce", "dice", "center")}
            lr = cfg.optim.lr
            for b0 in range(0, len(order), batch_size):
                batch = [int(si) for si in order[b0 : b0 + batch_size]]
                opt.zero_grad()
                inv = 1.0 / len(batch)
                if pool is not None:
                    outputs = list(pool.map(lambda si: scene_pass(si, inv), batch))
                else:
                    outputs = [scene_pass(si, inv) for si in batch]
                # accumulate in batch order so results are worker-count invariant
                for bi, (breakdown, final_assign, centers, grad_map) in enumerate(outputs):
                    if not np.isfinite(breakdown["total"]):
                        raise TrainingAborted(
                            f"non-finite loss at epoch {epoch} step {global_step}; "
                            f"last good checkpoint: {last_checkpoint or 'none'}",
                            last_checkpoint,
                        )
                    for p in model.named().values():
                        g = grad_map.get(p)
                        if g is not None:
                            p.grad = g if p.grad is None else p.grad + g
                    for key in term_sums:
                        term_sums[key] += breakdown[key]
                    if bi == 0:
                        for k in range(len(final_assign)):
                            cx, cy, cz = centers[k]
                            trace_fh.write(
                                f"{global_step}\t{int(final_assign[k])}\t"
                                f"{_fmt(cx)}\t{_fmt(cy)}\t{_fmt(cz)}\n"
                            )
                opt.ensure_grads()
                lr = poly_lr(cfg.optim.lr, global_step, total_steps, cfg.optim.poly_power)
                opt.step(lr)
                global_step += 1

            report = evaluate_model(model, cfg, val_scenes)
            final_report = report
            n = len(train_scenes)
            row = [
                term_sums["total"] / n,
                term_sums["cls"] / n,
                term_sums["bce"] / n,
                term_sums["dice"] / n,
                term_sums["center"] / n,
                lr,
                report.map_all,
                report.map50,
                report.map25,
                report.recall_layer1[0.25],
                report.recall_layer1[0.5],
            ]
            log_fh.write("\t".join([str(epoch)] + [_fmt(v) for v in row]) + "\n")
            log_fh.flush()
            trace_fh.flush()
            if not quiet:
                print(
                    f"epoch {epoch}: loss {term_sums['total'] / n:.4f} "
                    f"val mAP50 {report.map50:.3f} recall@0.25 {report.recall_layer1[0.25]:.3f}"
                )
            if (epoch + 1) % cfg.train.checkpoint_every == 0 or epoch + 1 == cfg.train.epochs:
                path = out / f"ckpt_epoch{epoch + 1:04d}.maft"
                _save_state(path, model, opt, order_rng, epoch + 1, global_step, cfg)
                last_checkpoint = str(path)
    finally:
        log_fh.close()
        trace_fh.close()
        if pool is not None:
            pool.shutdown(wait=False)

    if cfg.train.epochs == 0 or last_checkpoint is None:
        path = out / "ckpt_epoch0000.maft"
        _save_state(path, model, opt, order_rng, cfg.train.epochs, global_step, cfg)
        last_checkpoint = str(path)
    return {
        "final_checkpoint": last_checkpoint,
        "log": str(log_path),
        "trace": str(trace_path),
        "report": final_report,
        "model": model,
    }
