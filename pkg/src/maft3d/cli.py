"""Command-line entry point: gen-data, train, eval, diagnose.

Thread caps (MAFT_THREADS) must land in the environment before numpy loads,
so heavy imports happen inside main(). Exit codes: 0 success, 1 usage,
2 validation, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


def _setup_threads() -> None:
    n = os.environ.get("MAFT_THREADS")
    if n:
        os.environ.setdefault("OMP_NUM_THREADS", n)
        os.environ.setdefault("NUMEXPR_NUM_THREADS", n)
    # single-threaded BLAS: the matrices are skinny and BLAS worker spin-waits
    # starve the fused kernels; numba-omp threads do the wide work instead
    for var in ("OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
        os.environ.setdefault(var, "1")
    os.environ.setdefault("OMP_WAIT_POLICY", "passive")
    os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="maft3d", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="configuration file (key = value lines)")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument(
            "--mode", choices=["rpe", "mask_attention", "none"], help="attention mode"
        )

    p_gen = sub.add_parser("gen-data", help="write synthetic scene files")
    common(p_gen)
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.add_argument("--count", type=int, required=True, help="number of scenes")

    p_train = sub.add_parser("train", help="train a model")
    common(p_train)
    p_train.add_argument("--data", required=True, help="directory with train/ and val/")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--checkpoint", help="resume from this checkpoint")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True, help="directory with val/ (or scenes)")
    p_eval.add_argument("--out", help="also write the report here")

    p_diag = sub.add_parser("diagnose", help="diagnostics from logs/checkpoints")
    p_diag.add_argument(
        "--kind", required=True, choices=["recall_curve", "matching_trace", "grad_check"]
    )
    p_diag.add_argument("--checkpoint", help="checkpoint file or directory")
    p_diag.add_argument("--data", help="data or training-output directory")
    p_diag.add_argument("--out", help="output directory for diagnostic files")
    p_diag.add_argument("--query", type=int, default=0, help="query id for matching_trace")
    common(p_diag)
    return parser


def _load_config(args):
    from . import config as cfgmod

    cfg = cfgmod.load(args.config) if getattr(args, "config", None) else cfgmod.Config()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "mode", None):
        cfg.mode = args.mode
    return cfg.validate()


def _cmd_gen_data(args) -> int:
    from .train import generate_dataset

    cfg = _load_config(args)
    paths = generate_dataset(cfg, args.out, args.count)
    print(f"wrote {len(paths)} scenes to {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .train import run_training

    cfg = _load_config(args)
    result = run_training(cfg, args.data, args.out, resume=args.checkpoint)
    print(f"final checkpoint: {result['final_checkpoint']}")
    if result["report"] is not None:
        print(result["report"].to_text())
    return EXIT_OK


def _eval_split_dir(data_dir):
    from pathlib import Path

    data = Path(data_dir)
    if (data / "val").is_dir():
        return data / "val"
    return data


def _cmd_eval(args) -> int:
    import json

    from .train import evaluate_model, load_model, load_split

    cfg, model, _ = load_model(args.checkpoint)
    scenes = load_split(_eval_split_dir(args.data), cfg)
    report = evaluate_model(model, cfg, scenes)
    text = report.to_text()
    payload = {
        "mAP": report.map_all,
        "mAP50": report.map50,
        "mAP25": report.map25,
        "box_mAP50": report.box_map50,
        "box_mAP25": report.box_map25,
        "recall_layer1": {str(k): v for k, v in report.recall_layer1.items()},
        "per_class_ap50": {str(k): v for k, v in report.per_class.items()},
    }
    machine = json.dumps(payload, sort_keys=True)
    print(text)
    print("JSON: " + machine)
    if args.out:
        from pathlib import Path

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_report.txt").write_text(text + "\nJSON: " + machine + "\n", encoding="utf-8")
    return EXIT_OK


def _cmd_diagnose(args) -> int:
    from pathlib import Path

    if args.kind == "grad_check":
        return _diag_grad_check(args)
    if args.kind == "recall_curve":
        return _diag_recall_curve(args)
    return _diag_matching_trace(args, Path(args.data or "."))


def _diag_grad_check(args) -> int:
    import numpy as np

    from .train import build_model, gen_params, loss_weights
    from .scene import Scene, compact_instances, generate_scene, voxelize

    cfg = _load_config(args)
    scene = generate_scene(cfg.seed, gen_params(cfg))
    rng = np.random.default_rng(cfg.seed)
    keep = rng.choice(scene.n_points, size=min(600, scene.n_points), replace=False)
    tiny = compact_instances(
        Scene(
            scene.points[keep].copy(),
            scene.colors[keep].copy(),
            scene.sem_label[keep].copy(),
            scene.inst_label[keep].copy(),
        )
    )
    tokens, gt = voxelize(tiny, cfg.data.voxel_size * 4)
    model = build_model(cfg)
    total = sum(p.size for p in model.named().values())
    coords = rng.choice(total, size=min(20, total), replace=False)
    err = _model_gradient_check(model, tokens, gt, cfg, loss_weights(cfg), coords)
    print(f"max relative gradient error: {err:.3e}")
    return EXIT_OK if err < 1e-3 else EXIT_NUMERIC


def _model_gradient_check(model, tokens, gt, cfg, weights, coords, h: float = 1e-5):
    import numpy as np

    from . import numcore as nc
    from .decoder import forward
    from .matchloss import compute_loss

    names = sorted(model.named())

    def run_loss():
        preds, _ = forward(tokens, model, cfg.mode, refine=cfg.ablation.refinement)
        loss, _, _ = compute_loss(preds, gt, weights, tokens.bounds)
        return loss

    for p in model.named().values():
        p.grad = None
    with nc.Graph() as graph:
        loss = run_loss()
        graph.backward(loss)
    grads = np.concatenate(
        [
            (model.named()[n].grad if model.named()[n].grad is not None else np.zeros(model.named()[n].shape)).ravel()
            for n in names
        ]
    )
    sizes = np.array([model.named()[n].size for n in names])
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])

    worst = 0.0
    with nc.no_grad():
        for c in coords:
            pi = int(np.searchsorted(starts, c, side="right") - 1)
            p = model.named()[names[pi]]
            local = int(c - starts[pi])
            flat = p.data.ravel()
            orig = flat[local]
            flat[local] = orig + h
            fp = run_loss().item()
            flat[local] = orig - h
            fm = run_loss().item()
            flat[local] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = grads[c]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst


def _diag_recall_curve(args) -> int:
    from pathlib import Path

    from .train import evaluate_model, load_model, load_split
    from .metrics import initial_recall
    from .decoder import forward

    if not args.checkpoint or not args.data:
        print("recall_curve needs --checkpoint and --data", file=sys.stderr)
        return EXIT_VALIDATION
    path = Path(args.checkpoint)
    files = sorted(path.glob("ckpt_epoch*.maft")) if path.is_dir() else [path]
    if not files:
        print(f"no checkpoints found under {path}", file=sys.stderr)
        return EXIT_VALIDATION
    rows = ["epoch\trecall25\trecall50"]
    for file in files:
        cfg, model, meta = load_model(file)
        scenes = load_split(_eval_split_dir(args.data), cfg)
        r25, r50 = [], []
        for tokens, gt in scenes:
            preds, _ = forward(tokens, model, cfg.mode, refine=cfg.ablation.refinement)
            r25.append(initial_recall(preds[0], gt, 0.25))
            r50.append(initial_recall(preds[0], gt, 0.5))
        rows.append(
            f"{meta['epoch']}\t{sum(r25) / len(r25):.6f}\t{sum(r50) / len(r50):.6f}"
        )
    table = "\n".join(rows) + "\n"
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "recall_curve.tsv").write_text(table, encoding="utf-8")
    return EXIT_OK


def _diag_matching_trace(args, run_dir) -> int:
    from pathlib import Path

    trace_file = Path(run_dir) / "matching_trace.tsv"
    if not trace_file.exists():
        print(f"missing trace log: {trace_file}", file=sys.stderr)
        return EXIT_VALIDATION
    lines = trace_file.read_text(encoding="utf-8").splitlines()[1:]
    rows = ["iter\tx\ty\tz"]
    seen_queries = set()
    for line in lines:
        step, query, x, y, z = line.split("\t")
        seen_queries.add(int(query))
        if int(query) == args.query:
            rows.append(f"{step}\t{x}\t{y}\t{z}")
    table = "\n".join(rows) + "\n"
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"matching_trace_query{args.query}.tsv").write_text(table, encoding="utf-8")
    return EXIT_OK


def main(argv=None) -> int:
    _setup_threads()
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse exits for usage errors and --help
        return int(exc.code or 0)

    from . import checkpoint as ckptmod
    from . import config as cfgmod
    from . import numcore as nc
    from .numcore import _kernels
    from .scene import GenerationError, ParseError, SceneError
    from .train import TrainingAborted

    n_threads = os.environ.get("MAFT_THREADS")
    if n_threads:
        _kernels.set_threads(int(n_threads))

    handlers = {
        "gen-data": _cmd_gen_data,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "diagnose": _cmd_diagnose,
    }
    try:
        return handlers[args.command](args)
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except nc.NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (
        cfgmod.ConfigError,
        SceneError,
        ParseError,
        GenerationError,
        ckptmod.CheckpointError,
        FileNotFoundError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
