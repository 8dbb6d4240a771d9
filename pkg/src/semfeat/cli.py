"""Command-line entry point: generate, train, eval, export, rmse, plot."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config

log = logging.getLogger("semfeat")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _content_hash(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file():
                h.update(str(p.relative_to(path)).encode())
                h.update(p.read_bytes())
    elif path.is_file():
        h.update(path.read_bytes())
    return h.hexdigest()


def _write_run(out: Path, command: str, cfg: ExperimentConfig, args, inputs: dict[str, Path]):
    out.mkdir(parents=True, exist_ok=True)
    run = {
        "command": command,
        "version": __version__,
        "seed": args.seed,
        "deterministic": bool(args.deterministic),
        "config": cfg.to_dict(),
        "inputs": {k: {"path": str(p), "sha256": _content_hash(Path(p))} for k, p in inputs.items() if p is not None},
    }
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True, default=str) + "\n")


def _resolve(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.trainer = dataclasses.replace(cfg.trainer, seed=args.seed)
        cfg.matcheval = dataclasses.replace(cfg.matcheval, seed=args.seed)
    else:
        args.seed = cfg.seed
    if args.deterministic:
        cfg.trainer = dataclasses.replace(cfg.trainer, deterministic=True)
    out = Path(args.out or cfg.out_dir)
    cfg.out_dir = str(out)
    return cfg, out


def _existing(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"no {what} given")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    from .synthgen import generate_corpus

    cfg, out = _resolve(args)
    count = args.count if args.count is not None else cfg.count
    if count < 0:
        raise UsageError("--count must be >= 0")
    try:
        manifest = generate_corpus(out, count, cfg.seed, cfg.synthgen)
    except OSError as e:
        raise RuntimeError(f"writing corpus to {out}: {e}") from e
    _write_run(out, "generate", cfg, args, {})
    print(f"wrote {manifest['count']} pairs to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import NonFiniteLossError, train

    cfg, out = _resolve(args)
    corpus = _existing(args.corpus or cfg.corpus, "training corpus")
    if not (corpus / "manifest.json").exists():
        raise UsageError(f"{corpus} is not a corpus directory (no manifest.json)")
    val = args.val_corpus or cfg.val_corpus
    if args.epochs is not None:
        warm = min(cfg.trainer.warmup_epochs, args.epochs)
        cfg.trainer = dataclasses.replace(cfg.trainer, epochs=args.epochs, warmup_epochs=warm)
    model_cfg = dataclasses.replace(cfg.model, num_classes=cfg.synthgen.scene.num_classes)
    manifest = json.loads((corpus / "manifest.json").read_text())
    model_cfg = dataclasses.replace(model_cfg, num_classes=int(manifest["num_classes"]))
    _write_run(out, "train", cfg, args, {"corpus": corpus, "val_corpus": Path(val) if val else None})
    try:
        state = train(corpus, model_cfg, cfg.loss, cfg.trainer, out_dir=out, val_corpus=val, resume_from=args.resume)
    except NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    last = state.history[-1] if state.history else {}
    print(f"trained {state.epoch} epochs; final total loss {last.get('total', float('nan')):.4f}; checkpoints in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .model import load_checkpoint
    from .pipeline import evaluate_corpus, excluded_classes, gap_report, match_record, semantic_off
    from .plots import plot_matches
    from .synthgen import load_corpus

    cfg, out = _resolve(args)
    ckpt = _existing(args.checkpoint, "checkpoint")
    corpus = _existing(args.corpus or cfg.eval_corpus, "evaluation corpus")
    try:
        net, _, _ = load_checkpoint(ckpt)
    except (ValueError, KeyError) as e:
        raise UsageError(f"cannot load {ckpt}: {e}") from e
    samples = load_corpus(corpus)
    if samples and samples[0].gt_a.num_classes != net.cfg.num_classes:
        raise UsageError(f"checkpoint has {net.cfg.num_classes} classes but corpus has {samples[0].gt_a.num_classes}")
    mcfg = cfg.matcheval if not args.no_semantic_filter else semantic_off(cfg.matcheval)
    out.mkdir(parents=True, exist_ok=True)
    _write_run(out, "eval", cfg, args, {"checkpoint": ckpt, "corpus": corpus})
    if not samples:
        warnings.warn(f"evaluation corpus {corpus} is empty; metrics are null")
    records, summary, results = evaluate_corpus(net, samples, mcfg, keep_results=True)
    with open(out / "eval.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    meta = {
        "semantic_filter": not args.no_semantic_filter,
        "same_class_required": mcfg.same_class_required,
        "excluded_classes": excluded_classes(mcfg, net.cfg.num_classes) if samples else mcfg.excluded_classes,
        "eps_px": mcfg.eps_px,
        "checkpoint": str(ckpt),
        "corpus": str(corpus),
    }
    summary_doc = {"summary": summary, "metadata": meta, "reference_gap": gap_report(summary)}
    (out / "summary.json").write_text(json.dumps(summary_doc, indent=2, sort_keys=True) + "\n")
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["Method", "Keypoint Recall (%)", "Inlier Ratio (%)"])
        fmt = lambda v: "" if v is None else f"{v:.1f}"  # noqa: E731
        w.writerow(["Ours", fmt(summary["keypoint_recall"]), fmt(summary["inlier_ratio"])])
    mdir = out / "matches"
    mdir.mkdir(exist_ok=True)
    pair_lines = (corpus / "pairs.jsonl").read_text().splitlines() if (corpus / "pairs.jsonl").exists() else []
    pair_recs = [json.loads(line) for line in pair_lines if line.strip()]
    for i, (s, res) in enumerate(zip(samples[: args.max_plots], results)):
        paths = [str((corpus / pair_recs[i][f"image_{v}"]).resolve()) if i < len(pair_recs) else None for v in "ab"]
        rec = match_record(s, res, *paths)
        (mdir / f"{i:06d}_record.json").write_text(json.dumps(rec) + "\n")
        plot_matches(mdir / f"{i:06d}.png", s.image_a, s.image_b, rec["xy_a"], rec["xy_b"], rec["correct"])
    fmt = lambda v: "null" if v is None else f"{v:.1f}%"  # noqa: E731
    print(f"pairs={summary['pairs']} keypoint_recall={fmt(summary['keypoint_recall'])} inlier_ratio={fmt(summary['inlier_ratio'])}")
    return EXIT_OK


def cmd_export(args) -> int:
    from PIL import Image

    from .geoexport import export_colmap
    from .matcheval import extract_keypoints, match, semantic_filter
    from .model import load_checkpoint, predict
    from .pipeline import excluded_classes

    cfg, out = _resolve(args)
    ckpt = _existing(args.checkpoint, "checkpoint")
    image_dir = _existing(args.images, "image directory")
    net, _, _ = load_checkpoint(ckpt)
    paths = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    mc = cfg.matcheval
    excl = excluded_classes(mc, net.cfg.num_classes)
    kps, features = {}, {}
    for p in paths:
        img = np.asarray(Image.open(p).convert("RGB"), dtype=np.float64) / 255.0
        try:
            k = extract_keypoints(predict(net, img), mc.threshold, mc.nms_radius, mc.max_count, mc.refine)
        except ValueError as e:
            raise UsageError(f"{p}: {e}") from e
        kps[p.name] = semantic_filter(k, excl)
        features[p.name] = (kps[p.name].xy, kps[p.name].descriptors)
    names = [p.name for p in paths]
    if cfg.geoexport.pairing == "sequential":
        pairs = list(zip(names, names[1:]))
    else:
        pairs = [(a, b) for i, a in enumerate(names) for b in names[i + 1:]]
    matches = []
    for a, b in pairs:
        ms = match(kps[a], kps[b], mc.ratio, mc.same_class_required)
        matches.append((a, b, np.stack([ms.idx_a, ms.idx_b], axis=1)))
    export_colmap(out, features, matches)
    _write_run(out, "export", cfg, args, {"checkpoint": ckpt, "images": image_dir})
    print(f"exported {len(features)} feature files and {len(matches)} match blocks to {out}")
    return EXIT_OK


def cmd_rmse(args) -> int:
    from .geoexport import align_trajectories, read_trajectory_csv, trajectory_rmse

    est = read_trajectory_csv(_existing(args.estimated, "estimated trajectory"))
    ref = read_trajectory_csv(_existing(args.reference, "reference trajectory"))
    report = {}
    for mode, with_scale in (("similarity", True), ("rigid", False)):
        T = align_trajectories(est, ref, with_scale=with_scale)
        report[mode] = {"rmse_m": trajectory_rmse(est, ref, T), "scale": T.scale}
        print(f"RMSE ({mode}): {report[mode]['rmse_m']:.3f} m")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "rmse.json").write_text(json.dumps(report, indent=2) + "\n")
        cfg = load_config(args.config)
        _write_run(out, "rmse", cfg, args, {"estimated": Path(args.estimated), "reference": Path(args.reference)})
    return EXIT_OK


def cmd_plot(args) -> int:
    from PIL import Image

    from .geoexport import align_trajectories, read_trajectory_csv, trajectory_rmse
    from .plots import plot_matches, plot_trajectories

    cfg, out = _resolve(args)
    if not args.matches and not args.trajectory:
        raise UsageError("nothing to plot: pass --matches and/or --trajectory")
    out.mkdir(parents=True, exist_ok=True)
    inputs = {}
    for i, m in enumerate(args.matches or []):
        rec = json.loads(_existing(m, "match record").read_text())
        size = rec.get("image_size", [64, 64])
        imgs = []
        for key in ("image_a", "image_b"):
            if rec.get(key):
                imgs.append(np.asarray(Image.open(rec[key]).convert("RGB"), dtype=np.float64) / 255.0)
            else:
                imgs.append(np.full((size[0], size[1], 3), 0.5))
        png = plot_matches(out / f"{Path(m).stem}.png", imgs[0], imgs[1], rec["xy_a"], rec["xy_b"], rec["correct"])
        inputs[f"matches_{i}"] = Path(m)
        print(f"wrote {png}")
    if args.trajectory:
        est = read_trajectory_csv(_existing(args.trajectory[0], "estimated trajectory"))
        ref = read_trajectory_csv(_existing(args.trajectory[1], "reference trajectory"))
        T = align_trajectories(est, ref)
        png = plot_trajectories(out / "trajectory.png", T.apply(est.positions), ref.positions, trajectory_rmse(est, ref, T))
        inputs["estimated"], inputs["reference"] = Path(args.trajectory[0]), Path(args.trajectory[1])
        print(f"wrote {png}")
    _write_run(out, "plot", cfg, args, inputs)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON or TOML experiment config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--deterministic", action="store_true", default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")

    p = _Parser(prog="semfeat", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic pair corpus")
    g.add_argument("--count", type=int, default=None, help="number of pairs")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train the multi-task network")
    t.add_argument("--corpus", default=None)
    t.add_argument("--val-corpus", default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="match and score held-out pairs")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", default=None)
    e.add_argument("--no-semantic-filter", action="store_true")
    e.add_argument("--max-plots", type=int, default=10)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", parents=[common], help="write COLMAP feature and match files")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--images", required=True, help="directory of images")
    x.set_defaults(func=cmd_export)

    r = sub.add_parser("rmse", parents=[common], help="aligned trajectory RMSE from two CSV files")
    r.add_argument("estimated")
    r.add_argument("reference")
    r.set_defaults(func=cmd_rmse)

    pl = sub.add_parser("plot", parents=[common], help="render match and trajectory figures")
    pl.add_argument("--matches", nargs="*", default=None, help="match record JSON files")
    pl.add_argument("--trajectory", nargs=2, metavar=("EST", "REF"), default=None)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("deterministic", False), ("out", None)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
