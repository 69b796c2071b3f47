"""Command-line entry point: ``yoga <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import graph as G
from .detect import Detection, to_jsonl
from .errors import DivergenceError, WeightFileError, YogaError
from .tensor import Tensor, no_grad


def _emit(obj, fmt: str, table: str) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n" if fmt == "json" else table)


def _fmt_count(v: float, unit: float) -> str:
    return f"{v / unit:.2f}"


# ---------------------------------------------------------------------------
def cmd_describe(args) -> int:
    g = G.build_yoga(args.profile, args.classes, (args.img_size, args.img_size))
    rows = G.layer_table(g)
    params, flops = G.param_count(g), G.flop_count(g)
    ref = G.REFERENCE.get(args.profile)
    out = {"profile": args.profile, "img_size": args.img_size, "num_classes": args.classes,
           "depth_factor": g.profile.depth_factor, "width_factor": g.profile.width_factor,
           "layers": rows, "total_params": params, "total_flops": flops,
           "ghost_saving_params": sum(r["ghost_saving"] for r in rows)}
    if ref:
        out["reference"] = {"params": ref[0], "flops": ref[1],
                            "params_delta": params / ref[0] - 1,
                            "flops_delta": flops / ref[1] - 1}
    lines = [f"YOGA-{args.profile}  depth x{g.profile.depth_factor}  width "
             f"x{g.profile.width_factor}  input {args.img_size}x{args.img_size}",
             f"{'idx':>3} {'from':<12} {'n':>2} {'block':<10} {'out shape':<16} "
             f"{'params':>10} {'std params':>11} {'saved':>9} {'FLOPs':>14}"]
    for r in rows:
        shape = "x".join(map(str, r["out_shape"])) if r["out_shape"] else "3 scales"
        lines.append(f"{r['index']:>3} {str(r['from']):<12} {r['repeats']:>2} {r['kind']:<10} "
                     f"{shape:<16} {r['params']:>10} {r['standard_params']:>11} "
                     f"{r['ghost_saving']:>9} {r['flops']:>14}")
    lines.append(f"total params {params} ({_fmt_count(params, 1e6)} M)  "
                 f"FLOPs {flops} ({_fmt_count(flops, 1e9)} B)")
    if ref:
        lines.append(f"reference    {_fmt_count(ref[0], 1e6)} M / {_fmt_count(ref[1], 1e9)} B  "
                     f"delta {out['reference']['params_delta']:+.1%} / "
                     f"{out['reference']['flops_delta']:+.1%}")
    _emit(out, args.format, "\n".join(lines) + "\n")
    return 0


def cmd_check_grad(args) -> int:
    from .train import grad_report
    faults = [args.inject_fault] if args.inject_fault else []
    rep = grad_report(args.seed, include_model=args.full, faults=faults)
    rep["profile"] = args.profile
    lines = [f"{'name':<22} {'group':<10} {'worst rel err':>14} {'tol':>8}  result"]
    for e in rep["entries"]:
        lines.append(f"{e['name']:<22} {e['group']:<10} {e['error']:>14.3e} "
                     f"{e['tolerance']:>8.0e}  {'ok' if e['passed'] else 'FAIL'}")
    lines.append("PASS" if rep["passed"] else "FAIL: " + ", ".join(rep["failed"]))
    _emit(rep, args.format, "\n".join(lines) + "\n")
    if not rep["passed"]:
        print(f"gradient audit failed for: {', '.join(rep['failed'])}", file=sys.stderr)
        return 1
    return 0


def cmd_train_toy(args) -> int:
    from .train import TrainConfig, gen_toy_dataset, toy_model, train_toy
    ds = gen_toy_dataset(args.images + args.val_images, args.img_size, args.classes, args.seed)
    train = ds.subset(range(args.images))
    val = ds.subset(range(args.images, len(ds)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = (lambda s: print(s, file=sys.stderr)) if args.verbose else None
    runs = {"main": args.label_smoothing}
    if args.compare_smoothing:
        runs["no_smoothing" if args.label_smoothing > 0 else "smoothing"] = \
            0.0 if args.label_smoothing > 0 else 0.1
    summary = {}
    for tag, eps in runs.items():
        cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, label_smoothing=eps,
                          seed=args.seed)
        model = toy_model(args.classes, args.img_size, args.seed)
        try:
            rep = train_toy(model, train, val, cfg, args.target_ap, log=log)
        except DivergenceError as exc:
            print(f"training diverged: {exc}", file=sys.stderr)
            return 1
        suffix = "" if tag == "main" else f"_{tag}"
        (out / f"report{suffix}.json").write_text(rep.to_json())
        (out / f"report{suffix}.csv").write_text(rep.to_csv())
        (out / f"curves{suffix}.svg").write_text(rep.to_svg())
        if tag == "main":
            G.save_weights(model, out / "weights.yogw")
        summary[tag] = {"label_smoothing": eps, "final_ap50": rep.final_ap50,
                        "best_ap50": rep.best_ap50, "epochs_to_target": rep.epochs_to_target,
                        "final_loss": rep.epochs[-1]["loss"], "seconds (timing)": rep.seconds}
    summary["out_dir"] = str(out)
    lines = [f"{k}: eps={v['label_smoothing']} AP50 final {v['final_ap50']:.3f} best "
             f"{v['best_ap50']:.3f} epochs-to-target {v['epochs_to_target']}"
             for k, v in summary.items() if isinstance(v, dict)]
    _emit(summary, args.format, "\n".join(lines) + f"\nartifacts in {out}\n")
    return 0


def cmd_infer(args) -> int:
    from .detect import nms, decode
    from .train import read_ppm
    try:
        model = G.load_weights(args.weights)
    except (WeightFileError, OSError) as exc:
        print(f"cannot load weights: {exc}", file=sys.stderr)
        return 1
    model.eval()
    dets: List[Detection] = []
    for path in args.image:
        img = read_ppm(path)
        if img.shape[:2] != tuple(model.graph.input_size):
            print(f"{path}: image is {img.shape[1]}x{img.shape[0]}, model expects "
                  f"{model.graph.input_size[1]}x{model.graph.input_size[0]}", file=sys.stderr)
            return 1
        x = img.astype(np.float32).transpose(2, 0, 1)[None] / 255.0
        with no_grad():
            raw = model(Tensor(np.ascontiguousarray(x)))
        found = decode(raw, model.graph.anchors, args.conf, [Path(path).stem])[0]
        dets.extend(nms(found, args.iou))
    text = to_jsonl(dets)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_bench(args) -> int:
    from threadpoolctl import threadpool_limits
    g = G.build_yoga(args.profile, args.classes, (args.img_size, args.img_size))
    model = g.instantiate(args.seed).eval()
    x = Tensor(np.random.default_rng(args.seed)
               .standard_normal((1, 3, args.img_size, args.img_size)).astype(np.float32))
    times = []
    with threadpool_limits(limits=args.threads), no_grad():
        for i in range(args.warmup + args.runs):
            t = time.perf_counter()
            model(x)
            if i >= args.warmup:
                times.append(time.perf_counter() - t)
    t = np.asarray(times)
    flops = G.flop_count(g)
    mean = float(t.mean())
    rep = {"profile": args.profile, "img_size": args.img_size, "runs": args.runs,
           "warmup": args.warmup, "threads": args.threads, "flops": flops,
           "hardware": f"{platform.machine()} {platform.processor() or platform.platform()}",
           "latency_s (timing)": {"mean": mean, "p50": float(np.percentile(t, 50)),
                                  "p95": float(np.percentile(t, 95)),
                                  "std": float(t.std(ddof=1)) if len(t) > 1 else 0.0,
                                  "sem": float(t.std(ddof=1) / np.sqrt(len(t))) if len(t) > 1
                                  else 0.0},
           "flops_per_second (timing)": flops / mean}
    lat = rep["latency_s (timing)"]
    table = (f"YOGA-{args.profile} {args.img_size}x{args.img_size} on {rep['hardware']} "
             f"({args.threads} thread(s), {args.runs} runs, {args.warmup} warm-up)\n"
             f"mean {lat['mean'] * 1e3:.2f} ms  p50 {lat['p50'] * 1e3:.2f} ms  "
             f"p95 {lat['p95'] * 1e3:.2f} ms  +/- {lat['sem'] * 1e3:.2f} ms (s.e.m.)\n"
             f"{flops / 1e9:.3f} GFLOPs per pass, {rep['flops_per_second (timing)'] / 1e9:.2f} "
             f"GFLOP/s\n")
    _emit(rep, args.format, table)
    return 0


def cmd_gen_data(args) -> int:
    from .train import gen_toy_dataset
    ds = gen_toy_dataset(args.images, args.img_size, args.classes, args.seed)
    ds.save(args.out)
    n_obj = int(sum(len(l) for l in ds.labels))
    rep = {"out_dir": str(args.out), "images": len(ds), "objects": n_obj,
           "classes": args.classes, "img_size": args.img_size, "seed": args.seed}
    _emit(rep, args.format, f"wrote {len(ds)} images ({n_obj} objects) to {args.out}\n")
    return 0


# ---------------------------------------------------------------------------
def _positive(v: str) -> int:
    n = int(v)
    if n < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return n


def _img_size(v: str) -> int:
    n = _positive(v)
    if n % 32:
        raise argparse.ArgumentTypeError("must be divisible by 32")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="yoga", description="YOGA detector toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    profiles = sorted(G.PROFILES)

    def fmt(sp):
        sp.add_argument("--format", choices=("table", "json"), default="table")
        sp.add_argument("--seed", type=int, default=0)

    d = sub.add_parser("describe", help="per-layer parameter and FLOP report")
    d.add_argument("--profile", choices=profiles, default="n")
    d.add_argument("--img-size", type=_img_size, default=640)
    d.add_argument("--classes", type=_positive, default=80)
    fmt(d)
    d.set_defaults(func=cmd_describe)

    c = sub.add_parser("check-grad", help="finite-difference gradient audit")
    c.add_argument("--profile", choices=("micro",), default="micro")
    c.add_argument("--full", action="store_true", help="also audit the whole micro network")
    c.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)
    fmt(c)
    c.set_defaults(func=cmd_check_grad)

    t = sub.add_parser("train-toy", help="train micro-YOGA on synthetic shapes")
    t.add_argument("--epochs", type=_positive, default=100)
    t.add_argument("--images", type=_positive, default=200)
    t.add_argument("--val-images", type=_positive, default=50)
    t.add_argument("--classes", type=_positive, default=3)
    t.add_argument("--img-size", type=_img_size, default=64)
    t.add_argument("--batch-size", type=_positive, default=16)
    t.add_argument("--label-smoothing", type=float, default=0.1)
    t.add_argument("--compare-smoothing", action="store_true",
                   help="repeat the run with label smoothing toggled")
    t.add_argument("--target-ap", type=float, default=0.5)
    t.add_argument("--out", default="toy_run")
    t.add_argument("--verbose", action="store_true")
    fmt(t)
    t.set_defaults(func=cmd_train_toy)

    i = sub.add_parser("infer", help="detect objects in PPM images")
    i.add_argument("--weights", required=True)
    i.add_argument("--image", required=True, nargs="+")
    i.add_argument("--conf", type=float, default=0.25)
    i.add_argument("--iou", type=float, default=0.45)
    i.add_argument("--out", default=None, help="JSON-lines output (stdout if omitted)")
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("bench", help="CPU forward-pass latency")
    b.add_argument("--profile", choices=profiles, default="n")
    b.add_argument("--img-size", type=_img_size, default=640)
    b.add_argument("--classes", type=_positive, default=80)
    b.add_argument("--runs", type=int, default=10)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--threads", type=_positive, default=1)
    fmt(b)
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gen-data", help="write the synthetic toy dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--images", type=_positive, default=200)
    g.add_argument("--img-size", type=_img_size, default=64)
    g.add_argument("--classes", type=_positive, default=3)
    fmt(g)
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "runs", 3) < 3:
        parser.error("--runs must be at least 3")
    if args.command == "check-grad" and args.inject_fault:
        from . import ops
        from .tensor import Function
        known = {v.name for v in vars(ops).values()
                 if isinstance(v, type) and issubclass(v, Function) and v is not Function}
        if args.inject_fault not in known:
            parser.error(f"unknown primitive {args.inject_fault!r}")
    try:
        return args.func(args)
    except (YogaError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
