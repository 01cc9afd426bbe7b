"""Command-line entry point: gen-data, train, encode, decode, bench, inspect.

Options may also come from ``--config file.json`` (keys are the long option
names with dashes or underscores); explicit flags take precedence.
Exit codes: 0 success, 1 usage, 2 data or format error, 3 numeric failure.
"""
import argparse
import json
import logging
import sys
import time
from dataclasses import asdict

import numpy as np

from . import codec, harness
from .errors import (CapacityError, CorruptionError, DesyncError, DimensionError, DomainError, FormatError,
                     NumericError)
from .metrics import log_msssim, msssim, psnr
from .networks import NetworkConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _net_flags(p):
    d = NetworkConfig()
    p.add_argument("--N", type=int, default=d.N)
    p.add_argument("--M", type=int, default=d.M)
    p.add_argument("--K", type=int, default=d.K)
    p.add_argument("--Nz", type=int, default=d.Nz)
    p.add_argument("--num-down", type=int, default=d.num_down)
    p.add_argument("--sigma-min", type=float, default=d.sigma_min)
    p.add_argument("--L", type=int, default=d.L)
    p.add_argument("--factorized", action="store_true", help="factorized y-prior ablation (no hyper code)")


def _il_flags(p):
    d = codec.EncodeOptions()
    p.add_argument("--internal-learning", action="store_true")
    p.add_argument("--steps", type=int, default=d.steps)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--lam", type=float, default=d.lam)
    p.add_argument("--metric", choices=("mse", "msssim"), default=d.metric)
    p.add_argument("--threads", type=int, default=None)


def build_parser():
    p = _Parser(prog="cevc", description="conditional-entropy video codec")
    p.add_argument("--config", help="JSON file of option defaults")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic translating video as .raw")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--objects", type=int, default=3)
    g.add_argument("--max-velocity", type=int, default=3)

    t = sub.add_parser("train", help="train a codec on synthetic clips")
    d = harness.TrainConfig()
    t.add_argument("--out", required=True)
    t.add_argument("--lam", type=float, default=d.lam)
    t.add_argument("--target-bpp", type=float, default=d.target_bpp)
    t.add_argument("--lr", type=float, default=d.lr)
    t.add_argument("--batch", type=int, default=d.batch)
    t.add_argument("--crop", type=int, default=d.crop)
    t.add_argument("--epochs", type=int, default=d.epochs)
    t.add_argument("--seed", type=int, default=d.seed)
    t.add_argument("--train-clips", type=int, default=d.train_clips)
    t.add_argument("--clip-frames", type=int, default=d.clip_frames)
    t.add_argument("--val-clips", type=int, default=d.val_clips)
    t.add_argument("--log", help="write the per-epoch log as JSON")
    t.add_argument("--init", help="start from this checkpoint instead of a fresh model")
    _net_flags(t)

    e = sub.add_parser("encode", help="encode a .raw video")
    e.add_argument("--input", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--dump", help="also write the encoder-side reconstruction as .raw")
    _il_flags(e)

    dd = sub.add_parser("decode", help="decode a .cevc bitstream to .raw")
    dd.add_argument("--input", required=True)
    dd.add_argument("--model", required=True)
    dd.add_argument("--out", required=True)
    dd.add_argument("--threads", type=int, default=None)

    b = sub.add_parser("bench", help="time encode/decode, or sweep several checkpoints")
    b.add_argument("--input", required=True)
    b.add_argument("--model", required=True, nargs="+")
    b.add_argument("--csv")
    b.add_argument("--json")
    b.add_argument("--with-internal-learning", action="store_true",
                   help="add an internal-learning row per checkpoint")
    _il_flags(b)

    i = sub.add_parser("inspect", help="dump header and per-frame bit accounting")
    i.add_argument("--input", required=True)
    i.add_argument("--model", help="also report model cross-entropy per frame")
    return p


def _apply_config(parser, argv):
    first, _ = parser.parse_known_args(argv)
    if not first.config:
        return parser.parse_args(argv)
    with open(first.config) as f:
        cfg = json.load(f)
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    sub = parser._subparsers._group_actions[0].choices.get(first.command) if first.command else None
    if sub is None:
        return parser.parse_args(argv)
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise UsageError(f"unknown config keys for {first.command}: {', '.join(unknown)}")
    for a in sub._actions:
        if a.dest in cfg:
            a.required = False
    sub.set_defaults(**cfg)
    return parser.parse_args(argv)


def _net_config(a):
    return NetworkConfig(N=a.N, M=a.M, K=a.K, Nz=a.Nz, num_down=a.num_down, sigma_min=a.sigma_min, L=a.L,
                         conditional=not a.factorized)


def _options(a):
    return codec.EncodeOptions(internal_learning=a.internal_learning, steps=a.steps, lr=a.lr, lam=a.lam,
                               metric=a.metric, threads=a.threads)


def _emit(obj):
    def clean(v):
        if isinstance(v, float) and not np.isfinite(v):
            return None
        if isinstance(v, (np.floating, np.integer)):
            return v.item()
        return v
    json.dump(obj, sys.stdout, indent=1, default=clean)
    sys.stdout.write("\n")


def cmd_gen_data(a):
    frames = harness.gen_synthetic_video(a.seed, a.frames, a.height, a.width, a.objects, a.max_velocity)
    harness.write_raw(a.out, frames)
    _emit({"out": a.out, "seed": a.seed, "frames": a.frames, "height": a.height, "width": a.width})


def cmd_train(a):
    cfg = harness.TrainConfig(lam=a.lam, target_bpp=a.target_bpp, lr=a.lr, batch=a.batch, crop=a.crop,
                              epochs=a.epochs, seed=a.seed, train_clips=a.train_clips,
                              clip_frames=a.clip_frames, val_clips=a.val_clips)
    init = codec.checkpoint_load(a.init) if a.init else None
    net = init.config if init else _net_config(a)
    model, hist = harness.train(cfg, net, model=init)
    codec.checkpoint_save(model, a.out)
    result = {"out": a.out, "seed": a.seed, "best_epoch": hist.best_epoch, "best_val": hist.best_val,
              "train_config": asdict(cfg), "network": net.to_dict(), "epochs": hist.epochs}
    if a.log:
        with open(a.log, "w") as f:
            json.dump(result, f, indent=1, default=float)
    _emit({k: v for k, v in result.items() if k != "epochs"})


def cmd_encode(a):
    model = codec.checkpoint_load(a.model)
    frames = harness.read_raw(a.input)
    t0 = time.perf_counter()
    res = codec.encode_video(model, frames, _options(a))
    elapsed = time.perf_counter() - t0
    with open(a.out, "wb") as f:
        f.write(res.data)
    if a.dump:
        harness.write_raw(a.dump, res.reconstructions)
    mse = float(np.mean((frames - res.reconstructions) ** 2))
    _emit({"out": a.out, "frames": len(frames), "bytes": len(res.data), "bpp": res.bpp(),
           "psnr": psnr(frames, res.reconstructions), "mse": mse, "seconds": elapsed,
           "internal_learning": a.internal_learning,
           "per_frame": [{k: v for k, v in st.items() if k != "il_objective"} for st in res.stats]})


def cmd_decode(a):
    model = codec.checkpoint_load(a.model)
    with open(a.input, "rb") as f:
        data = f.read()
    t0 = time.perf_counter()
    res = codec.decode_video(model, data, a.threads)
    elapsed = time.perf_counter() - t0
    harness.write_raw(a.out, res.frames)
    _emit({"out": a.out, "frames": len(res.frames), "seconds": elapsed})


def cmd_bench(a):
    frames = harness.read_raw(a.input)
    models = [codec.checkpoint_load(p) for p in a.model]
    opts = _options(a)
    if len(models) > 1 or a.csv or a.json or a.with_internal_learning:
        rows = harness.rd_sweep(models, frames, opts, internal_learning=a.with_internal_learning,
                                labels=a.model)
        harness.write_rd_table(rows, a.csv, a.json)
        _emit({"rows": [asdict(r) for r in rows]})
        return
    model = models[0]
    t0 = time.perf_counter()
    res = codec.encode_video(model, frames, opts)
    t1 = time.perf_counter()
    dec = codec.decode_video(model, res.data, a.threads)
    t2 = time.perf_counter()
    ms = float(np.mean([msssim(x, y) for x, y in zip(frames, dec.frames)]))
    _emit({"frames": len(frames), "encode_seconds": t1 - t0, "decode_seconds": t2 - t1,
           "encode_fps": len(frames) / (t1 - t0), "decode_fps": len(frames) / (t2 - t1),
           "bpp": res.bpp(), "psnr": psnr(frames, dec.frames), "msssim": ms, "log_msssim": log_msssim(ms)})


def cmd_inspect(a):
    with open(a.input, "rb") as f:
        data = f.read()
    bs = codec.Bitstream.from_bytes(data)
    h = bs.header
    header = {k: (v.hex() if isinstance(v, bytes) else v) for k, v in asdict(h).items()}
    pixels = h.frame_count * h.height * h.width
    frames = [{"frame": i, "bits_z": 8 * len(r.z.data), "bits_y": 8 * len(r.y.data)}
              for i, r in enumerate(bs.records)]
    if a.model:
        model = codec.checkpoint_load(a.model)
        codec.check_header(model, h)
        H, W = h.height + h.pad_h, h.width + h.pad_w
        lshape, zshape = model.latent_shape(H, W), model.hyper_shape(H, W)
        prev = codec.LatentCode.zeros(lshape, model.config.L)
        for i, rec in enumerate(bs.records):
            try:
                y, z = codec.decode_latents(model, rec, prev, lshape, zshape)
            except (CorruptionError, DesyncError, ValueError) as e:
                raise FormatError(f"frame {i}: {e}", frame=i) from e
            _, _, st = codec.code_latents(model, y, prev, z)
            frames[i].update({"model_bits_y": st["model_bits_y"], "model_bits_z": st["model_bits_z"],
                              "xent_bits_y": st["xent_bits_y"]})
            prev = y
    _emit({"header": header, "bytes": len(data), "payload_bits": bs.payload_bits(),
           "bpp": bs.payload_bits() / pixels if pixels else 0.0, "frames": frames})


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "encode": cmd_encode, "decode": cmd_decode,
            "bench": cmd_bench, "inspect": cmd_inspect}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        if not args.command:
            raise UsageError(parser.format_usage().strip())
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError) as e:
        print(f"cevc: cannot read config: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except FormatError as e:
        where = f" (frame {e.frame})" if e.frame is not None else ""
        print(f"cevc: {e}{where}", file=sys.stderr)
        return EXIT_DATA
    except (CorruptionError, DesyncError, DimensionError, CapacityError, OSError) as e:
        print(f"cevc: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, DomainError) as e:
        print(f"cevc: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"cevc: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
