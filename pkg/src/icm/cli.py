"""Operator command line: corpus generation, training, coding, evaluation."""

from __future__ import annotations

import os

# Force single-threaded BLAS before numpy loads anywhere: per-image math
# must be bit-identical regardless of machine and worker count.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import sys

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_FORMAT = 3
EXIT_DIVERGED = 4


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _fail(code: int, kind: str, message: str):
    raise CliError(code, kind, message)


# ---------------------------------------------------------------------------
# helpers

def _load_run_config(path):
    from . import config as config_mod

    if path is None:
        return config_mod.RunConfig()
    try:
        return config_mod.load(path)
    except FileNotFoundError:
        _fail(EXIT_IO, "config-missing", f"config file not found: {path}")
    except config_mod.ConfigError as e:
        _fail(EXIT_USAGE, "config-invalid", str(e))


def _load_corpus(path):
    from . import corpus as corpus_mod

    try:
        return corpus_mod.load_corpus(path)
    except FileNotFoundError as e:
        _fail(EXIT_IO, "corpus-missing", str(e))


def _read_image(path):
    from . import imageio

    try:
        return imageio.read_image(path)
    except FileNotFoundError:
        _fail(EXIT_IO, "image-missing", f"image not found: {path}")
    except imageio.ImageIOError as e:
        _fail(EXIT_FORMAT, "image-bad", str(e))


def _load_checkpoint(path):
    from . import training

    try:
        return training.load_checkpoint(path)
    except FileNotFoundError:
        _fail(EXIT_IO, "checkpoint-missing", f"checkpoint not found: {path}")
    except training.CheckpointFormatError as e:
        _fail(EXIT_FORMAT, "checkpoint-bad", str(e))


def _load_task_model(path):
    from . import tasks, training

    try:
        return tasks.load_task_model(path)
    except FileNotFoundError:
        _fail(EXIT_IO, "task-model-missing", f"task model not found: {path}")
    except training.CheckpointFormatError as e:
        _fail(EXIT_FORMAT, "task-model-bad", str(e))


def _prepare_image(img, ckpt):
    from . import codec

    factor = ckpt.codec_weights.config.scale_factor
    padded, orig = codec.pad_image(img, factor)
    return padded, orig


def _encode_latent_to_file(latent, pw, orig_hw, out_path):
    from . import entropy

    bs = entropy.compress_latent(latent, pw, orig_hw)
    with open(out_path, "wb") as f:
        f.write(bs.to_bytes())
    return bs


def _gather_inputs(paths):
    files = []
    for p in paths:
        if os.path.isdir(p):
            sub = [os.path.join(p, n) for n in sorted(os.listdir(p))
                   if n.lower().endswith((".png", ".ppm", ".pnm"))]
            if os.path.isdir(os.path.join(p, "images")):
                sub = [os.path.join(p, "images", n)
                       for n in sorted(os.listdir(os.path.join(p, "images")))
                       if n.lower().endswith((".png", ".ppm", ".pnm"))]
            files.extend(sub)
        else:
            files.append(p)
    if not files:
        _fail(EXIT_USAGE, "no-inputs", "no input images given")
    return files


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_corpus(args) -> int:
    from . import corpus as corpus_mod

    data = corpus_mod.generate_corpus(seed=args.seed, count=args.count, size=args.size)
    corpus_mod.save_corpus(data, args.out)
    print(f"wrote {len(data)} scenes of {args.size}x{args.size} to {args.out}")
    return EXIT_OK


def cmd_train_task(args) -> int:
    from . import tasks

    data = _load_corpus(args.corpus)
    if any(l is None for l in data.labels):
        _fail(EXIT_IO, "labels-missing", "corpus has images without label maps")
    tm = tasks.train_task_model(
        data, tasks.TaskConfig(seed=args.seed, hidden_channels=args.hidden),
        epochs=args.epochs, lr=args.lr, seed=args.seed)
    tasks.save_task_model(tm, args.out)
    print(f"trained task model on {len(data)} scenes -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from . import rdeval, tasks, training

    cfg = _load_run_config(args.config)
    corpus = _load_corpus(args.corpus)
    heldout = _load_corpus(args.heldout)
    tm = _load_task_model(args.task)
    os.makedirs(args.out_dir, exist_ok=True)

    def progress(epoch, log, rd):
        print(f"epoch {epoch:3d} weights={log.weights} "
              f"rate={log.mean_rate_bpp:.4f}bpp task={log.mean_task:.4f} "
              f"mse={log.mean_mse:.5f} | heldout bpp={rd.bpp:.4f} metric={rd.metric:.4f}")

    try:
        ckpts, logs = training.train(
            cfg.train, corpus, heldout, tm,
            codec_config=cfg.codec, prob_config=cfg.probmodel,
            progress=progress if args.verbose else None)
    except training.TrainDivergedError as e:
        _fail(EXIT_DIVERGED, "train-diverged", str(e))
    points = []
    for ck in ckpts:
        training.save_checkpoint(ck, os.path.join(args.out_dir, f"{ck.rd.label}.ckpt"))
        points.append(ck.rd)
    with open(os.path.join(args.out_dir, "rd_points.csv"), "w") as f:
        f.write(rdeval.points_to_csv(points))
    print(f"wrote {len(ckpts)} checkpoints and rd_points.csv to {args.out_dir}")
    return EXIT_OK


def cmd_encode(args) -> int:
    from . import codec
    from .autograd import Tensor

    ckpt = _load_checkpoint(args.ckpt)
    img = _read_image(args.input)
    padded, orig = _prepare_image(img, ckpt)
    y = codec.encode(Tensor(padded), ckpt.codec_weights)
    latent = codec.quantize(y, ckpt.codec_weights.config.quant_step)
    bs = _encode_latent_to_file(latent, ckpt.prob_weights, orig, args.output)
    print(f"encoded {args.input} -> {args.output} "
          f"({len(bs.payload)} payload bytes, {orig[0]}x{orig[1]})")
    return EXIT_OK


def cmd_decode(args) -> int:
    from . import codec, entropy, imageio

    ckpt = _load_checkpoint(args.ckpt)
    try:
        with open(args.input, "rb") as f:
            raw = f.read()
    except FileNotFoundError:
        _fail(EXIT_IO, "bitstream-missing", f"bitstream not found: {args.input}")
    try:
        bs = entropy.Bitstream.from_bytes(raw)
        latent = entropy.decompress_latent(bs, ckpt.prob_weights)
    except entropy.CoderError as e:
        _fail(EXIT_FORMAT, type(e).__name__.lower(), str(e))
    xhat = codec.decode(latent, ckpt.codec_weights)
    out = codec.crop_image(xhat.data, (bs.orig_h, bs.orig_w))
    imageio.write_image(args.output, out)
    print(f"decoded {args.input} -> {args.output} ({bs.orig_h}x{bs.orig_w})")
    return EXIT_OK


def cmd_finetune_encode(args) -> int:
    import dataclasses

    from . import codec, finetune, tasks
    from .autograd import Tensor

    cfg = _load_run_config(args.config)
    ft = dataclasses.replace(cfg.finetune, trace=True)
    if args.iters is not None:
        ft = dataclasses.replace(ft, iterations=args.iters)
    ckpt = _load_checkpoint(args.ckpt)
    fe = tasks.init_extractor(tasks.ExtractorConfig(seed=args.extractor_seed))
    files = _gather_inputs(args.inputs)
    os.makedirs(args.out_dir, exist_ok=True)

    prepared = []
    for path in files:
        img = _read_image(path)
        padded, orig = _prepare_image(img, ckpt)
        prepared.append((path, padded, orig))

    results = finetune.finetune_batch(
        [p[1] for p in prepared], ckpt.codec_weights, ckpt.prob_weights, fe,
        ft, workers=args.workers)

    report_lines = []
    for (path, padded, orig), (ydata, report) in zip(prepared, results):
        latent = codec.quantize(Tensor(ydata), ckpt.codec_weights.config.quant_step)
        name = os.path.splitext(os.path.basename(path))[0] + ".icm"
        _encode_latent_to_file(latent, ckpt.prob_weights, orig, os.path.join(args.out_dir, name))
        rec = {"id": os.path.basename(path),
               "bpp_before": report.initial_rate_bpp,
               "bpp_after": report.final_rate_bpp,
               "total_before": report.initial_total,
               "total_after": report.final_total,
               "aborted": report.aborted}
        if report.trace_total:
            rec["trace"] = report.trace_total
        report_lines.append(json.dumps(rec, sort_keys=True))
    if args.report:
        with open(args.report, "w") as f:
            f.write("\n".join(report_lines) + "\n")
    print(f"finetuned and encoded {len(files)} images -> {args.out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import rdeval, training

    tm = _load_task_model(args.task)
    corpus = _load_corpus(args.corpus)
    points = []
    if args.ckpt_dir:
        names = sorted(n for n in os.listdir(args.ckpt_dir) if n.endswith(".ckpt"))
        if not names:
            _fail(EXIT_IO, "no-checkpoints", f"no .ckpt files in {args.ckpt_dir}")
        for n in names:
            ck = _load_checkpoint(os.path.join(args.ckpt_dir, n))
            rd = training.evaluate_checkpoint(
                ck.codec_weights, ck.prob_weights, corpus, tm,
                label=os.path.splitext(n)[0])
            points.append(rd)
    elif args.bitstreams:
        points.append(_eval_bitstream_dir(args, corpus, tm))
    else:
        _fail(EXIT_USAGE, "no-mode", "pass --ckpt-dir or --bitstreams")
    csv_text = rdeval.points_to_csv(points)
    with open(args.out, "w") as f:
        f.write(csv_text)
    print(csv_text, end="")
    return EXIT_OK


def _eval_bitstream_dir(args, corpus, tm):
    from . import codec, entropy, rdeval, tasks
    from .autograd import Tensor

    if not args.ckpt:
        _fail(EXIT_USAGE, "no-checkpoint", "--bitstreams mode needs --ckpt for decoding")
    ckpt = _load_checkpoint(args.ckpt)
    names = sorted(n for n in os.listdir(args.bitstreams) if n.endswith(".icm"))
    if not names:
        _fail(EXIT_IO, "no-bitstreams", f"no .icm files in {args.bitstreams}")
    if len(names) != len(corpus):
        _fail(EXIT_USAGE, "count-mismatch",
              f"{len(names)} bitstreams vs {len(corpus)} corpus images")
    bpps, metrics = [], []
    for n, labels in zip(names, corpus.labels):
        with open(os.path.join(args.bitstreams, n), "rb") as f:
            raw = f.read()
        try:
            bs = entropy.Bitstream.from_bytes(raw)
            latent = entropy.decompress_latent(bs, ckpt.prob_weights)
        except entropy.CoderError as e:
            _fail(EXIT_FORMAT, type(e).__name__.lower(), f"{n}: {e}")
        bpps.append(rdeval.measure_bpp(bs, bs.orig_h, bs.orig_w,
                                       include_header=args.include_header))
        xhat = codec.decode(latent, ckpt.codec_weights)
        out = codec.crop_image(xhat.data, (bs.orig_h, bs.orig_w))
        metrics.append(tasks.task_metric(Tensor(out), labels, tm) if labels is not None else 0.0)
    label = os.path.basename(os.path.normpath(args.bitstreams))
    return rdeval.RDPoint(bpp=float(np.mean(bpps)), metric=float(np.mean(metrics)), label=label)


def cmd_curves(args) -> int:
    from . import rdeval, svgplot

    def read_points(path):
        try:
            with open(path) as f:
                return rdeval.points_from_csv(f.read())
        except FileNotFoundError:
            _fail(EXIT_IO, "csv-missing", f"CSV not found: {path}")
        except ValueError as e:
            _fail(EXIT_FORMAT, "csv-bad", f"{path}: {e}")

    anchor_pts = read_points(args.anchor)
    test_pts = read_points(args.test)
    if args.clip:
        lo, hi = args.clip
        anchor_pts = [p for p in anchor_pts if lo <= p.bpp <= hi]
        test_pts = [p for p in test_pts if lo <= p.bpp <= hi]
        if not anchor_pts or not test_pts:
            _fail(EXIT_USAGE, "clip-empty", "bpp clipping removed every point")
    anchor = rdeval.pareto_front(anchor_pts)
    test = rdeval.pareto_front(test_pts)
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "pareto_anchor.csv"), "w") as f:
        f.write(rdeval.points_to_csv(anchor.points))
    with open(os.path.join(args.out_dir, "pareto_test.csv"), "w") as f:
        f.write(rdeval.points_to_csv(test.points))
    try:
        report = rdeval.bucket_report(anchor, test, edges=args.edges)
    except rdeval.EvalError as e:
        _fail(EXIT_USAGE, "bd-undefined", str(e))
    text = report.render_text(anchor_name=os.path.basename(args.anchor))
    with open(os.path.join(args.out_dir, "bd_buckets.txt"), "w") as f:
        f.write(text)
    with open(os.path.join(args.out_dir, "bd_buckets.csv"), "w") as f:
        f.write(report.to_csv())
    svg = svgplot.rd_plot_svg(
        [("anchor", anchor.points), ("test", test.points)])
    with open(os.path.join(args.out_dir, "rd_plot.svg"), "w") as f:
        f.write(svg)
    print(text, end="")
    print(f"artifacts in {args.out_dir}")
    return EXIT_OK


def cmd_diff(args) -> int:
    from . import imageio

    a = _read_image(args.a)
    b = _read_image(args.b)
    if a.shape != b.shape:
        _fail(EXIT_USAGE, "shape-mismatch", f"images differ in shape: {a.shape} vs {b.shape}")
    l1 = np.abs(a - b).sum(axis=0) / 3.0
    heat = np.clip(l1 * args.gain, 0.0, 1.0)
    imageio.write_image(args.output, np.stack([heat, heat, heat]))
    print(f"wrote l1 difference image to {args.output} "
          f"(mean l1 {float(l1.mean()):.6f}, gain {args.gain})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", message)


def build_parser() -> _Parser:
    p = _Parser(prog="icm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="emit seeded synthetic images + label maps")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=64)
    g.add_argument("--size", type=int, default=48)
    g.set_defaults(func=cmd_gen_corpus)

    t = sub.add_parser("train-task", help="train and freeze the toy task model")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--lr", type=float, default=3e-3)
    t.add_argument("--hidden", type=int, default=16)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train_task)

    tr = sub.add_parser("train", help="train codec + probability model")
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--heldout", required=True)
    tr.add_argument("--task", required=True)
    tr.add_argument("--out-dir", required=True)
    tr.add_argument("--config", default=None)
    tr.add_argument("--verbose", action="store_true")
    tr.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="image -> bitstream")
    e.add_argument("--ckpt", required=True)
    e.add_argument("input")
    e.add_argument("output")
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="bitstream -> image")
    d.add_argument("--ckpt", required=True)
    d.add_argument("input")
    d.add_argument("output")
    d.set_defaults(func=cmd_decode)

    f = sub.add_parser("finetune-encode",
                       help="content-adaptive latent finetuning, then encode")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--out-dir", required=True)
    f.add_argument("--report", default=None)
    f.add_argument("--config", default=None)
    f.add_argument("--iters", type=int, default=None)
    f.add_argument("--workers", type=int, default=None)
    f.add_argument("--extractor-seed", type=int, default=0)
    f.add_argument("inputs", nargs="+")
    f.set_defaults(func=cmd_finetune_encode)

    ev = sub.add_parser("eval", help="checkpoints or bitstreams -> RD points CSV")
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--task", required=True)
    ev.add_argument("--ckpt-dir", default=None)
    ev.add_argument("--bitstreams", default=None)
    ev.add_argument("--ckpt", default=None)
    ev.add_argument("--include-header", action="store_true")
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    c = sub.add_parser("curves", help="CSVs -> Pareto fronts, BD buckets, SVG plot")
    c.add_argument("--anchor", required=True)
    c.add_argument("--test", required=True)
    c.add_argument("--out-dir", required=True)
    c.add_argument("--edges", type=lambda s: [float(x) for x in s.split(",")],
                   default=[0.05, 0.1])
    c.add_argument("--clip", type=lambda s: tuple(float(x) for x in s.split(",")),
                   default=None, metavar="LO,HI")
    c.set_defaults(func=cmd_curves)

    df = sub.add_parser("diff", help="two images -> l1 difference heat image")
    df.add_argument("a")
    df.add_argument("b")
    df.add_argument("output")
    df.add_argument("--gain", type=float, default=5.0)
    df.set_defaults(func=cmd_diff)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as e:
        print(f"ICM-ERROR code={e.code} kind={e.kind} msg={e}", file=sys.stderr)
        return e.code
    except OSError as e:
        print(f"ICM-ERROR code={EXIT_IO} kind=io msg={e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
