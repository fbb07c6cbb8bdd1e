"""Command-line entry point: ``cogrind {gen,train,infer,stabilize,eval}``.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines whose
keys are the subcommand's long option names (dashes or underscores).
Precedence is built-in default < config file < explicit flag. Each run writes
a JSON run manifest next to its outputs. ``COGRIND_THREADS`` caps the number
of worker threads used by ``infer``.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import io as cio
from . import synthetic as sy
from .metrics import cxcywh_to_xyxy, evaluate, format_table
from .model import MODES, ModelConfig, parse_mode
from .postprocess import check_window, make_topk_frame, stabilize_video
from .text import Vocabulary
from .trainer import TrainConfig, build_model, predict_video, train

log = logging.getLogger("cogrind")


class CLIError(Exception):
    pass


# ---------------------------------------------------------------- option helpers


def _tuple_or_scalar(text):
    return cio.parse_value(text) if isinstance(text, str) else text


def _add_dataclass_options(parser, cls, skip=()):
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if isinstance(default, bool):
            parser.add_argument(flag, type=lambda s: bool(cio.parse_value(s)), default=default, metavar="BOOL")
        elif isinstance(default, (int, float)):
            parser.add_argument(flag, type=type(default), default=default)
        elif isinstance(default, str):
            parser.add_argument(flag, default=default)
        else:
            parser.add_argument(flag, type=_tuple_or_scalar, default=default, metavar="VALUE")


def _pick(ns, cls):
    names = {f.name for f in dataclasses.fields(cls)}
    return cls(**{k: v for k, v in vars(ns).items() if k in names})


def _parse_mix(text):
    if isinstance(text, dict):
        return text
    out = {}
    for part in str(text).split(","):
        if not part.strip():
            continue
        if "=" not in part:
            raise argparse.ArgumentTypeError(f"mix entry {part!r} is not class=weight")
        k, v = part.split("=", 1)
        out[k.strip()] = float(v)
    unknown = set(out) - set(sy.CLASSES)
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown ambiguity classes {sorted(unknown)}; valid: {', '.join(sy.CLASSES)}")
    return out


def _odd_window(text):
    P = int(text)
    try:
        check_window(P)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return P


def _positive(text):
    k = int(text)
    if k < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {k}")
    return k


def _threads():
    try:
        return max(1, int(os.environ.get("COGRIND_THREADS", "1")))
    except ValueError:
        return 1


def _write_run_manifest(path, args, outputs, started):
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "parser")}
    cio.write_manifest(path, subcommand=args.command, config=cfg, seed=getattr(args, "seed", None),
                       version=__version__, outputs=[str(o) for o in outputs],
                       wall_clock_seconds=round(time.time() - started, 3),
                       started=time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)))


def _manifest_for(out: Path) -> Path:
    return out / "run_manifest.json" if out.is_dir() else out.with_name(out.stem + ".run_manifest.json")


# ---------------------------------------------------------------- subcommands


def cmd_gen(args):
    cfg = _pick(args, sy.GeneratorConfig)
    cfg.mix = _parse_mix(args.mix)
    samples = sy.generate(args.seed, cfg)
    out = sy.save_dataset(samples, args.out, png=args.png, cfg=cfg)
    print(f"wrote {len(samples)} videos to {out}")
    return [out]


def _load_data(path):
    root = Path(path)
    if not (root / "manifest.json").exists():
        raise CLIError(f"{root}: not a dataset directory (manifest.json missing)")
    vocab = Vocabulary.load(root / "vocab.txt") if (root / "vocab.txt").exists() else sy.synthetic_vocab()
    return sy.load_dataset(root), vocab


def cmd_train(args):
    tcfg = _pick(args, TrainConfig)
    mcfg = _pick(args, ModelConfig)
    samples, vocab = _load_data(args.data)
    val = _load_data(args.val)[0] if args.val else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.zip"

    def progress(row):
        print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()), flush=True)

    model, history = train(tcfg, mcfg, samples, val, vocab, progress, checkpoint_path=ckpt)
    meta = {"model": dataclasses.asdict(model.cfg), "train": dataclasses.asdict(tcfg), "vocab": vocab.itos}
    cio.save_checkpoint(ckpt, model.params, meta)
    history.to_csv(out / "history.csv")
    cio.write_config(out / "config.txt", tcfg, model.cfg)
    print(f"checkpoint: {ckpt}")
    return [ckpt, out / "history.csv", out / "config.txt"]


def _model_from_checkpoint(path, mode=None):
    params, meta = cio.load_checkpoint(path)
    mc = dict(meta["model"])
    if mode is not None and parse_mode(mode) != parse_mode(mc["mode"]):
        log.warning("running a %s checkpoint in %s mode", mc["mode"], mode)
        mc["mode"] = mode
    cfg = ModelConfig(**mc)
    model = build_model(cfg, len(meta["vocab"]), 0)
    missing = set(model.params) - set(params)
    if missing:
        raise CLIError(f"{path}: checkpoint lacks parameters {sorted(missing)[:5]}")
    model.params = params
    return model, Vocabulary(meta["vocab"][2:])


def _records(pred, K):
    out = []
    for t, (r, feats) in enumerate(zip(pred.results, pred.features)):
        idx = r.topk(K)
        boxes = [dict(zip(("cx", "cy", "w", "h"), r.boxes[i]), score=r.scores[i]) for i in idx]
        fv = [feats[r.level[i]][r.cell[i]] for i in idx]
        out.append({"video_id": pred.video_id, "frame_idx": t, "boxes": boxes, "selected_idx": 0,
                    "features": fv})
    return out


def cmd_infer(args):
    model, vocab = _model_from_checkpoint(args.ckpt, args.mode)
    samples, _ = _load_data(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dump = Path(args.dump_attention) if args.dump_attention else None
    if dump:
        dump.mkdir(parents=True, exist_ok=True)

    def one(s):
        pred = predict_video(model, s, vocab, args.stride)
        if dump and pred.maps and pred.maps[0]:
            cio.dump_attention(dump / f"{s.video_id}.json", s.video_id, pred.maps, model.cfg.grids[0])
        return _records(pred, args.topk)

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        records = [r for recs in pool.map(one, samples) for r in recs]
    cio.write_predictions(out, records)
    print(f"wrote {len(records)} frame predictions to {out}")
    return [out] + ([dump] if dump else [])


def _by_video(records):
    videos = {}
    for r in records:
        videos.setdefault(r["video_id"], []).append(r)
    for v in videos.values():
        v.sort(key=lambda r: r["frame_idx"])
    return videos


def stabilize_records(records, K=5, P=5):
    """Re-select each frame's box with the window re-scoring; returns new records."""
    check_window(P)
    out = []
    for vid, recs in sorted(_by_video(records).items()):
        frames = []
        for r in recs:
            if not r.get("features"):
                raise CLIError(f"{vid} frame {r['frame_idx']}: stabilization needs per-box features")
            boxes = [[b["cx"], b["cy"], b["w"], b["h"]] for b in r["boxes"]]
            scores = [b["score"] for b in r["boxes"]]
            frames.append(make_topk_frame(boxes, scores, np.asarray(r["features"], dtype=float).T, k=K))
        for r, fr, st in zip(recs, frames, stabilize_video(frames, P)):
            n = min(K, len(r["boxes"]))
            sel = st.selected if st.selected < n else n - 1
            out.append({**r, "boxes": r["boxes"][:n], "features": r["features"][:n], "selected_idx": sel})
    return out


def cmd_stabilize(args):
    records = cio.read_predictions(args.pred)
    out = Path(args.out)
    cio.write_predictions(out, stabilize_records(records, args.topk, args.window))
    print(f"stabilized {len(records)} frames (K={args.topk}, P={args.window}) -> {out}")
    return [out]


def evaluate_records(records, samples, classes=None, frames="all"):
    by_id = {s.video_id: s for s in samples}
    preds, gts, vids = [], [], []
    for vid, recs in sorted(_by_video(records).items()):
        if vid not in by_id:
            raise CLIError(f"prediction for unknown video {vid!r}")
        s = by_id[vid]
        if classes and s.ambiguity_class not in classes:
            continue
        if len(recs) != len(s.frames):
            raise CLIError(f"{vid}: {len(recs)} predicted frames for {len(s.frames)} ground-truth frames")
        S = s.frames.shape[1]
        for r in recs:
            t = r["frame_idx"]
            if frames == "occluded" and not s.occluded[t]:
                continue
            b = r["boxes"][r["selected_idx"]]
            preds.append(cxcywh_to_xyxy([b["cx"], b["cy"], b["w"], b["h"]], S, S))
            gts.append(s.gt_tube[t])
            vids.append(vid)
    if not preds:
        raise CLIError("no frames left to evaluate")
    return evaluate(np.array(preds), np.array(gts), vids)


def cmd_eval(args):
    samples, _ = _load_data(args.data)
    names = args.names.split(",") if args.names else [Path(p).stem for p in args.pred]
    if len(names) != len(args.pred):
        raise CLIError(f"{len(names)} names for {len(args.pred)} prediction files")
    classes = [c.strip() for c in args.classes.split(",")] if args.classes else None
    reports = {}
    for name, path in zip(names, args.pred):
        reports[name] = evaluate_records(cio.read_predictions(path), samples, classes, args.frames)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, rep in reports.items():
        rep.to_json(out / f"{name}.report.json")
        rep.write_curves(out / f"{name}.curves.csv")
        written += [out / f"{name}.report.json", out / f"{name}.curves.csv"]
    table = format_table(reports)
    (out / "table.txt").write_text(table + "\n")
    written.append(out / "table.txt")
    if len(reports) > 1:
        print("Ablation (Acc@0.5 in %)")
    print(table)
    return written


# ---------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="cogrind", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="key = value file with defaults for this subcommand")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True, help=out_help)

    g = sub.add_parser("gen", help="generate a synthetic video dataset")
    common(g, "dataset directory")
    _add_dataclass_options(g, sy.GeneratorConfig, skip=("mix",))
    g.add_argument("--mix", type=_parse_mix, default=",".join(f"{c}=0.25" for c in sy.CLASSES),
                   help="class=weight,... over " + ", ".join(sy.CLASSES))
    g.add_argument("--png", action="store_true", help="store frames as PNG instead of .npy")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    common(t, "run directory (checkpoint, history, config)")
    t.add_argument("--data", required=True)
    t.add_argument("--val", help="held-out dataset directory for per-epoch evaluation")
    _add_dataclass_options(t, TrainConfig, skip=("seed",))
    _add_dataclass_options(t, ModelConfig, skip=("mode",))
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict boxes for every frame")
    common(i, "predictions .jsonl")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--mode", choices=MODES, type=lambda s: parse_mode(s),
                   help="override the checkpoint's mode")
    i.add_argument("--topk", type=_positive, default=5)
    i.add_argument("--stride", type=_positive, default=1, help="co-grounding partner offset")
    i.add_argument("--dump-attention", metavar="DIR", help="write subject/location maps as JSON grids")
    i.set_defaults(func=cmd_infer)

    s = sub.add_parser("stabilize", help="re-select boxes with the temporal window")
    common(s, "stabilized predictions .jsonl")
    s.add_argument("--pred", required=True)
    s.add_argument("--topk", type=_positive, default=5)
    s.add_argument("--window", type=_odd_window, default=5)
    s.set_defaults(func=cmd_stabilize)

    e = sub.add_parser("eval", help="score prediction files against the dataset")
    common(e, "report directory")
    e.add_argument("--pred", required=True, nargs="+")
    e.add_argument("--data", required=True)
    e.add_argument("--names", help="comma-separated row names (default: file stems)")
    e.add_argument("--classes", help="comma-separated ambiguity classes to keep")
    e.add_argument("--frames", choices=("all", "occluded"), default="all")
    e.set_defaults(func=cmd_eval)
    return p, sub


def _subparser(sub, name):
    return sub.choices[name]


def parse_args(argv=None):
    parser, sub = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sp = _subparser(sub, args.command)
        valid = {a.dest for a in sp._actions if a.option_strings and a.dest not in ("help", "config")}
        try:
            values = cio.read_config(args.config, valid)
        except (OSError, cio.FormatError) as exc:
            parser.error(str(exc))
        defaults = {}
        for dest, v in values.items():
            action = next(a for a in sp._actions if a.dest == dest)
            if action.type is not None and isinstance(v, str):
                try:
                    v = action.type(v)
                except (argparse.ArgumentTypeError, ValueError) as exc:
                    parser.error(f"{args.config}: {dest}: {exc}")
            defaults[dest] = v
        sp.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        outputs = args.func(args)
    except (CLIError, cio.FormatError, sy.GenerationError, ValueError, FileNotFoundError) as exc:
        print(f"cogrind {args.command}: error: {exc}", file=sys.stderr)
        return 2
    _write_run_manifest(_manifest_for(Path(args.out)), args, outputs, started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
