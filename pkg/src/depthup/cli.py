"""``depthup`` command line: gen, train, eval, infer, bench, ablate.

Exit status: 0 success, 1 configuration error, 2 data or format error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import model, pipeline, synth
from .errors import ConfigError, FormatError, ShapeError, SyncError, TrainingError, UndefinedMetricError

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 1, 2


def _say(msg=""):
    print(msg, flush=True)


def _deltas(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --deltas {text!r}") from exc
    if not vals or min(vals) < 1:
        raise ConfigError(f"--deltas needs positive integers, got {text!r}")
    return vals


def _write_json(path, text):
    Path(path).write_text(text)
    _say(f"wrote {path}")


# --------------------------------------------------------------------------
# commands

def cmd_gen(args) -> int:
    spec = pipeline.GenSpec.from_dict(pipeline.read_json(args.spec)) if args.spec else pipeline.GenSpec()
    if args.duration is not None:
        spec = dataclasses.replace(spec, duration_s=args.duration)
    if args.n is not None:
        spec = dataclasses.replace(spec, n_sequences=args.n)
    spec.validate()
    out = Path(args.out)
    for seq in pipeline.generate_dataset(spec, args.seed):
        synth.write_sequence(seq, out / seq.name)
        inv = float(np.mean(seq.depth == 0))
        _say(f"{seq.name}: {len(seq.rgb_ts)} rgb + {len(seq.depth_ts)} depth frames, "
             f"invalid fraction {inv:.4f}, sha256 {seq.checksum()[:12]}")
    return EXIT_OK


def _apply_overrides(cfg: pipeline.RunConfig, args):
    for section, key in (("training", "epochs"), ("training", "lr"), ("training", "seed"),
                         ("training", "batch_size"), ("data", "held_out"), ("data", "dataset_dir"),
                         ("data", "weights_out")):
        v = getattr(args, key, None)
        if v is not None:
            setattr(getattr(cfg, section), key, v)
    return cfg.validate()


def cmd_train(args) -> int:
    cfg = _apply_overrides(pipeline.load_run_config(args.config), args)
    seqs = synth.read_dataset(cfg.data.dataset_dir)
    held = cfg.data.held_out or seqs[-1].name
    train_s, test_s = pipeline.loso_samples(seqs, held, cfg.data.delta_frames)
    _say(f"training on {len(train_s)} samples, held out {held!r} ({len(test_s)} samples)")
    if cfg.training.epochs == 0:
        _say("zero epochs: writing initial weights")

    def log(e):
        held_txt = "-" if e.heldout_rmse is None else f"{e.heldout_rmse:.5f}"
        _say(f"epoch {e.epoch}: train loss {e.train_loss:.5f}, held-out RMSE {held_txt} ({e.seconds:.1f} s)")

    res = pipeline.train(cfg.network, cfg.training, train_s, test_s, log=log)
    model.save_weights(res.net, cfg.data.weights_out)
    log_path = Path(cfg.data.weights_out).with_suffix(".log.json")
    log_path.write_text(json.dumps({"config": cfg.to_dict(), "held_out": held, "best_epoch": res.best_epoch,
                                    "history": [dataclasses.asdict(h) for h in res.history]}, indent=2))
    _say(f"wrote {cfg.data.weights_out} (best epoch {res.best_epoch}) and {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net = model.load_weights(args.weights)
    seqs = synth.read_dataset(args.data)
    names = [s.name for s in seqs]
    if args.held_out:
        if args.held_out not in names:
            raise ConfigError(f"unknown held-out sequence {args.held_out!r}; have {names}")
        seqs = [s for s in seqs if s.name == args.held_out]
    report = pipeline.evaluate_all(net, {s.name: s for s in seqs}, _deltas(args.deltas), stride=args.stride)
    sys.stdout.write(report.to_text())
    if args.json:
        _write_json(args.json, report.to_json())
    return EXIT_OK


def cmd_infer(args) -> int:
    net = model.load_weights(args.weights)
    seq = synth.read_sequence(args.seq)
    rt = pipeline.RuntimeConfig("half" if args.half else "full", args.pipelined, crop_factor=args.crop)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runner = pipeline.StreamRunner(net, seq, rt)
    frames = []

    def sink(k, frame):
        frame.astype("<u2").tofile(out / f"pred_{k:06d}.d16")
        frames.append({"file": f"pred_{k:06d}.d16", "timestamp_us": int(seq.rgb_ts[k])})

    preds = runner.run(limit=args.frames, sink=sink)
    h, w = runner.full_hw
    (out / "predictions.json").write_text(json.dumps(
        {"width": w, "height": h, "max_depth_mm": seq.max_depth_mm, "frames": frames}, indent=2))
    _say(f"wrote {len(preds)} frames to {out} (sha256 {pipeline.frames_checksum(preds)[:12]})")
    return EXIT_OK


def cmd_bench(args) -> int:
    net = model.load_weights(args.weights) if args.weights else model.build(model.NetworkConfig())
    seq = synth.read_sequence(args.seq)
    if (net.config.input_h, net.config.input_w) != (seq.height // args.crop, seq.width // args.crop):
        net = net.resized(seq.height // args.crop, seq.width // args.crop)
    report = pipeline.bench(net, seq, frames=args.frames, warmup=args.warmup, crop_factor=args.crop)
    sys.stdout.write(report.to_text())
    if args.json:
        _write_json(args.json, report.to_json())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _apply_overrides(pipeline.load_run_config(args.config), args)
    seqs = synth.read_dataset(cfg.data.dataset_dir)
    held = cfg.data.held_out or seqs[-1].name
    train_s, test_s = pipeline.loso_samples(seqs, held, cfg.data.delta_frames)
    cascades = tuple(int(c) for c in args.cascades.split(","))
    variants = pipeline.ablation_variants(cfg.network, cascades)
    rows = pipeline.run_ablation(variants, cfg.training, train_s, test_s, log=_say)
    sys.stdout.write(pipeline.ablation_table(rows))
    if args.json:
        _write_json(args.json, json.dumps([dataclasses.asdict(r) for r in rows], indent=2))
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="depthup", description="Temporal depth upsampling from a hybrid RGB-D rig.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--spec", help="JSON generation spec (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--duration", type=float, help="seconds per sequence")
    g.add_argument("-n", type=int, help="number of sequences")
    g.set_defaults(func=cmd_gen)

    def run_overrides(q):
        q.add_argument("--config", required=True)
        q.add_argument("--epochs", type=int)
        q.add_argument("--lr", type=float)
        q.add_argument("--seed", type=int)
        q.add_argument("--batch-size", dest="batch_size", type=int)
        q.add_argument("--held-out", dest="held_out")
        q.add_argument("--data", dest="dataset_dir")
        q.add_argument("--weights-out", dest="weights_out")

    t = sub.add_parser("train", help="train with one sequence held out")
    run_overrides(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="naive / flow / network RMSE table and delta sweep")
    e.add_argument("--weights", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--held-out", dest="held_out")
    e.add_argument("--deltas", default="1")
    e.add_argument("--stride", type=int, default=1, help="score every n-th sample")
    e.add_argument("--json")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="stream predictions for every color frame")
    i.add_argument("--weights", required=True)
    i.add_argument("--seq", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--half", action="store_true")
    i.add_argument("--pipelined", action="store_true")
    i.add_argument("--crop", type=int, default=1)
    i.add_argument("--frames", type=int)
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("bench", help="latency and throughput report")
    b.add_argument("--weights")
    b.add_argument("--seq", required=True)
    b.add_argument("--frames", type=int, default=100)
    b.add_argument("--warmup", type=int, default=10)
    b.add_argument("--crop", type=int, default=1)
    b.add_argument("--json")
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("ablate", help="cascade and skip-connection ablations")
    run_overrides(a)
    a.add_argument("--cascades", default="2,3,4")
    a.add_argument("--json")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, ShapeError, SyncError, UndefinedMetricError, TrainingError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
