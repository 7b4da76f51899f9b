"""Command-line entry point: ``echorecon {gen-data,train,eval,reconstruct,inspect}``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as eckp
from .errors import ConfigError, DataError, FormatError, NumericError, ParameterError, StateError
from .syndata import DatasetConfig, generate_dataset, read_echoclip, write_echoclip

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(event: str, **payload) -> None:
    print(json.dumps({"event": event, **payload}, sort_keys=True, default=str), flush=True)


def _load_json(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return doc


def _resolve(defaults: dict, file_doc: dict, flags: dict) -> tuple[dict, dict]:
    """Merge flag > config file > default and remember where each value came from."""
    unknown = sorted(set(file_doc) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values, source = {}, {}
    for key, default in defaults.items():
        if flags.get(key) is not None:
            values[key], source[key] = flags[key], "flag"
        elif key in file_doc:
            values[key], source[key] = file_doc[key], "file"
        else:
            values[key], source[key] = default, "default"
    return values, source


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    base = DatasetConfig().to_json()
    defaults = {**base, "seed": 0}
    flags = {"n_normal": args.n_normal, "n_abnormal": args.n_abnormal, "anomaly": args.anomaly,
             "n_frames": args.frames, "size": args.size, "seed": args.seed}
    doc = _load_json(args.config) if args.config else {}
    values, source = _resolve(defaults, doc, flags)
    seed = int(values.pop("seed"))
    _emit("config", command="gen-data", config=values, seed=seed, source=source)
    cfg = DatasetConfig.from_json(values)
    manifest = generate_dataset(cfg, seed, args.out)
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    _emit("done", command="gen-data", out=str(args.out), clips=len(manifest.clips), splits=counts)
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import TrainConfig, train

    defaults = TrainConfig().to_json()
    doc = _load_json(args.config) if args.config else {}
    values, source = _resolve(defaults, doc, {"seed": args.seed, "epochs": args.epochs})
    cfg = TrainConfig.from_json(values)
    _emit("config", command="train", config=cfg.to_json(), seed=cfg.seed, source=source,
          deterministic=bool(args.deterministic), resume=args.resume)
    final = train(cfg, args.data, args.out, resume=args.resume, deterministic=args.deterministic,
                  log=lambda msg: _emit("progress", message=msg))
    _emit("done", command="train", checkpoint=str(final))
    return EXIT_OK


def _seed_all(seed, deterministic: bool) -> None:
    import torch

    from .train import set_deterministic

    set_deterministic(deterministic)
    if seed is not None:
        torch.manual_seed(seed)


def cmd_eval(args) -> int:
    from .evaluate import run_eval

    _seed_all(args.seed, args.deterministic)
    out = Path(args.out) if args.out else Path(args.ckpt).parent / f"eval_{args.task}"
    _emit("config", command="eval", ckpt=str(args.ckpt), data=str(args.data), task=args.task, out=str(out),
          seed=args.seed, shuffle_labels=args.shuffle_labels, dump_banks=args.dump_banks)
    shuffle = (args.seed if args.seed is not None else 0) if args.shuffle_labels else None
    report = run_eval(args.ckpt, args.data, args.task, out, shuffle_seed=shuffle, dump_bank_csv=args.dump_banks,
                      log=lambda msg: _emit("progress", message=msg))
    _emit("done", command="eval", metrics=report.to_json(), out=str(out))
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from PIL import Image

    from .evaluate import reconstruct, structure_masks
    from .train import load_model

    _seed_all(args.seed, args.deterministic)
    _emit("config", command="reconstruct", ckpt=str(args.ckpt), input=str(args.input),
          direction=args.direction, out=str(args.out), seed=args.seed)
    model, cfg, _ = load_model(args.ckpt)
    frames, _ = read_echoclip(args.input)
    recon = reconstruct((model, cfg), frames, args.direction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for n, frame in enumerate(recon):
        pixels = np.round(np.clip(frame.mean(-1), 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(pixels, mode="L").save(out / f"frame{n:03d}.png")
    masks = structure_masks(recon, cfg=cfg, src_hw=frames.shape[1:3])
    clip_path = out / f"{Path(args.input).stem}_{args.direction}.echoclip"
    write_echoclip(clip_path, recon, masks)
    _emit("done", command="reconstruct", frames=len(recon), clip=str(clip_path))
    return EXIT_OK


def cmd_inspect(args) -> int:
    _emit("config", command="inspect", ckpt=str(args.ckpt), seed=args.seed)
    header, tensors = eckp.read_checkpoint(args.ckpt)
    print(json.dumps(header, indent=1, sort_keys=True))
    for name in sorted(tensors):
        arr = tensors[name]
        print(f"{name}\t{arr.dtype}\t{list(arr.shape)}")
    _emit("done", command="inspect", tensors=len(tensors))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (overrides the config file)")
    common.add_argument("--deterministic", action="store_true", help="single-threaded deterministic numerics")
    common.add_argument("--config", default=None, help="JSON config file")

    parser = _Parser(prog="echorecon", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="render a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-normal", type=int)
    p.add_argument("--n-abnormal", type=int)
    p.add_argument("--anomaly", choices=("structural", "motion"))
    p.add_argument("--frames", type=int)
    p.add_argument("--size", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train the bidirectional model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--epochs", type=int, default=None, help="override the configured epoch count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="probe, Fréchet distance and Dice evaluation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", required=True, choices=("cls", "reg", "recon"))
    p.add_argument("--out", default=None)
    p.add_argument("--dump-banks", action="store_true", help="also write both memory banks as CSV")
    p.add_argument("--shuffle-labels", action="store_true", help="permute training targets (control run)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reconstruct", parents=[common], help="translate one clip and export frames")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--direction", required=True, choices=("a2b", "b2a"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("inspect", parents=[common], help="print checkpoint header and tensor shapes")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        if not argv:
            raise UsageError("echorecon: a command is required")
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("echorecon: a command is required")
        if args.command != "train" and args.config and args.command != "gen-data":
            raise UsageError(f"echorecon {args.command}: --config is only used by gen-data and train")
        return args.func(args)
    except (UsageError, ConfigError, ParameterError) as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, NumericError, StateError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
