"""Command line interface: ``vrpcc train | compress | decompress | eval``.

Errors are reported as a single ``error <code> <kind>: <message>`` line on
stderr with a distinct exit status per kind (see :data:`EXIT_CODES`). The
``VRPCC_THREADS`` environment variable caps BLAS threads.
"""
from __future__ import annotations

import argparse
import os
import sys

from threadpoolctl import threadpool_limits

from .autodiff import CheckpointError
from .codec import LatentCodec, Model, ModelMismatchError, decompress
from .octree import OctreeError
from .pointset import PointCloudParseError, load, load_directory, save, synth_dataset
from .rangecoder import BitstreamError
from .trainer import CONFIG_DOC, TrainConfig, TrainingDiverged, evaluate, rd_csv, train

EXIT_CODES = {
    "usage": 2,
    "parse": 3,           # malformed point cloud, bitstream or checkpoint
    "model-mismatch": 4,
    "range": 5,           # k or bpp target out of range
    "diverged": 6,
    "config": 7,
    "io": 8,
}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def parse_synth(source: str) -> list:
    """``synth:shape=all,n=256,count=64,seed=0,pose=1`` -> list of clouds."""
    opts = {"shape": "all", "n": "256", "count": "64", "seed": "0", "pose": "0"}
    body = source[len("synth:"):]
    for item in filter(None, body.split(",")):
        if "=" not in item:
            raise CliError("usage", f"bad synth option {item!r}")
        key, value = item.split("=", 1)
        if key not in opts:
            raise CliError("usage", f"unknown synth option {key!r}")
        opts[key] = value
    shape = opts["shape"].split("+") if "+" in opts["shape"] else opts["shape"]
    try:
        return synth_dataset(shape, int(opts["n"]), int(opts["seed"]), int(opts["count"]),
                             random_pose=opts["pose"] not in ("0", "false", "no"))
    except ValueError as exc:
        raise CliError("usage", str(exc)) from None


def load_data(source: str) -> list:
    if source.startswith("synth:"):
        return parse_synth(source)
    if os.path.isdir(source):
        return load_directory(source)
    return [load(source)]


def parse_int_list(text: str, what: str) -> list[int]:
    """Comma list with optional inclusive ranges: ``1,2,4-8``."""
    out = []
    try:
        for part in filter(None, text.split(",")):
            if "-" in part:
                lo, hi = part.split("-", 1)
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
    except ValueError:
        raise CliError("usage", f"bad {what} list {text!r}") from None
    return out


def _write(path: str, data: bytes | str) -> None:
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(path, mode) as fh:
        fh.write(data)


def cmd_train(args) -> None:
    try:
        cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
        if args.steps is not None:
            cfg = TrainConfig.from_text(cfg.to_text(), steps=args.steps)
    except (ValueError, TypeError) as exc:
        raise CliError("config", str(exc)) from None
    clouds = load_data(args.data)
    log = print if args.verbose else None

    def checkpoint(step, model):
        model.save(args.out)

    model, trace = train(clouds, cfg, on_checkpoint=checkpoint, log_every=args.log_every, logger=log)
    model.save(args.out)
    if args.log:
        _write(args.log, trace.to_csv())


def cmd_compress(args) -> None:
    model = Model.load(args.model)
    codec = LatentCodec(model, load(args.input))
    keep = args.keep.strip().lower()
    try:
        k = codec.keep_for_bpp(float(keep[:-3])) if keep.endswith("bpp") else int(keep)
    except ValueError:
        raise CliError("usage", f"--keep expects an integer or '<x>bpp', got {args.keep!r}") from None
    if not 1 <= k <= model.latent:
        raise CliError("range", f"keep={k} outside [1, {model.latent}]")
    comp = codec.compress(k)
    _write(args.out, comp.data)
    print(f"k={k} bytes={len(comp.data)} payload_bpp={comp.bpp:.6f}")


def cmd_decompress(args) -> None:
    model = Model.load(args.model)
    with open(args.input, "rb") as fh:
        data = fh.read()
    save(decompress(model, data), args.out, args.format)


def cmd_eval(args) -> None:
    model = Model.load(args.model)
    clouds = load_data(args.data)
    ks = parse_int_list(args.truncations, "truncation") if args.truncations else [model.latent]
    depths = parse_int_list(args.baseline_octree, "depth") if args.baseline_octree else []
    for k in ks:
        if not 1 <= k <= model.latent:
            raise CliError("range", f"truncation {k} outside [1, {model.latent}]")
    rows, detail = evaluate(model, clouds, ks, depths, per_cloud=True)
    _write(args.out, rd_csv(rows))
    if args.per_cloud:
        _write(args.per_cloud, rd_csv(detail, with_cloud=True))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vrpcc", description=__doc__.splitlines()[0],
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model", epilog="config keys:\n" + CONFIG_DOC,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("--config", help="key = value config file (defaults if omitted)")
    t.add_argument("--data", required=True, help="directory, cloud file, or synth:key=value,...")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="write the per-step training log CSV here")
    t.add_argument("--steps", type=int, help="override the configured step count")
    t.add_argument("--log-every", type=int, default=100)
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compress", help="compress one cloud")
    c.add_argument("--model", required=True)
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--keep", required=True, help="kept latent length k, or a target like 0.3bpp")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compress)

    d = sub.add_parser("decompress", help="reconstruct a cloud from a bitstream")
    d.add_argument("--model", required=True)
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--format", choices=("xyz-text", "ply-ascii", "ply-binary-le"))
    d.set_defaults(func=cmd_decompress)

    e = sub.add_parser("eval", help="rate-distortion table as CSV")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--truncations", help="kept lengths, e.g. 8,16,32-34 (default: full latent)")
    e.add_argument("--baseline-octree", help="octree depths, e.g. 4-9")
    e.add_argument("--out", required=True)
    e.add_argument("--per-cloud", help="also write unaveraged rows here")
    e.set_defaults(func=cmd_eval)
    return p


def _classify(exc: Exception) -> str:
    if isinstance(exc, CliError):
        return exc.kind
    if isinstance(exc, ModelMismatchError):
        return "model-mismatch"
    if isinstance(exc, (PointCloudParseError, BitstreamError, CheckpointError, OctreeError)):
        return "parse"
    if isinstance(exc, TrainingDiverged):
        return "diverged"
    if isinstance(exc, OSError):
        return "io"
    return "parse"


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = os.environ.get("VRPCC_THREADS")
    try:
        limits = threadpool_limits(int(threads)) if threads else None
    except ValueError:
        print(f"error {EXIT_CODES['usage']} usage: VRPCC_THREADS must be an integer", file=sys.stderr)
        return EXIT_CODES["usage"]
    try:
        args.func(args)
    except (CliError, ModelMismatchError, PointCloudParseError, BitstreamError, CheckpointError,
            OctreeError, TrainingDiverged, OSError, ValueError) as exc:
        kind = _classify(exc)
        msg = " ".join(str(exc).split())
        print(f"error {EXIT_CODES[kind]} {kind}: {msg}", file=sys.stderr)
        return EXIT_CODES[kind]
    finally:
        if limits is not None:
            limits.unregister()
    return 0


if __name__ == "__main__":
    sys.exit(main())
