"""Command-line entry points: dataset creation, training, evaluation,
generation, and serving.

Machine-readable output goes to stdout (the training metric stream is
newline-delimited JSON; ``generate`` and ``eval`` print one JSON line),
progress and diagnostics go to stderr. Failure families map to distinct
exit codes so scripts can tell a bad config from bad data, an unreadable
checkpoint, or a numeric abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import (ConfigError, default_config, dump_config,
                     generator_config, load_config)
from .data import DataError, load_dataset, make_dataset
from .layouts import LayoutError, parse_layout
from .service import encode_png, make_server, synthesize
from .training import (CheckpointError, init_state, load_checkpoint,
                       make_batch, prepare_items, save_checkpoint,
                       train_step)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_NUMERIC = 5


def _info(msg: str) -> None:
    print(msg, file=sys.stderr)


class RunLock:
    """Exclusive-writer lock on a run directory (a .lock marker file)."""

    def __init__(self, directory: Path):
        self.path = Path(directory) / ".lock"
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path,
                              os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"run directory {self.path.parent} is locked by another "
                f"trainer (remove {self.path} if that run is dead)") from None
        os.write(self.fd, f"{os.getpid()}\n".encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)
        return False


def _load_run_config(args):
    cfg = load_config(args.config) if args.config else default_config()
    train = cfg.train
    data = cfg.data
    if getattr(args, "seed", None) is not None:
        train = dataclasses.replace(train, seed=args.seed)
        data = dataclasses.replace(data, seed=args.seed)
    if getattr(args, "steps", None) is not None:
        train = dataclasses.replace(train, steps=args.steps)
    if getattr(args, "semi_fraction", None) is not None:
        data = dataclasses.replace(data,
                                   supervised_fraction=args.semi_fraction)
    return dataclasses.replace(cfg, train=train, data=data)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_dataset_make(args) -> int:
    cfg = _load_run_config(args)
    d = cfg.data
    root = make_dataset(args.out, n_samples=d.n_samples,
                        resolution=cfg.model.resolution,
                        m_min=d.m_min, m_max=d.m_max,
                        allow_overlap=d.allow_overlap, seed=d.seed)
    _info(f"wrote {d.n_samples} samples to {root}")
    print(json.dumps({"dataset": str(root), "samples": d.n_samples,
                      "resolution": cfg.model.resolution}))
    return EXIT_OK


def cmd_train(args) -> int:
    if args.dump_config:
        print(dump_config(_load_run_config(args)), end="")
        return EXIT_OK
    if args.data is None:
        raise ConfigError("train needs --data (or use --dump-config)")
    if args.out is None:
        raise ConfigError("train needs --out")
    mode = "semi" if args.semi else "fully"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with RunLock(out):
        if args.checkpoint:
            state = load_checkpoint(args.checkpoint)
            if args.steps is not None:
                train = dataclasses.replace(state.config.train,
                                            steps=args.steps)
                state.config = dataclasses.replace(state.config, train=train)
            cfg = state.config
        else:
            cfg = _load_run_config(args)
            generator_config(cfg)  # surface shape errors before any work
            state = init_state(cfg)
        dataset = load_dataset(args.data)
        items = prepare_items(dataset, cfg, mode)
        steps = cfg.train.steps
        _info(f"training {mode} for {steps} steps on "
              f"{len(items)} samples (seed {cfg.train.seed})")
        with open(out / "metrics.ndjson", "a", encoding="utf-8") as stream:
            for _ in range(steps):
                batch, styles = make_batch(state, items)
                metrics = train_step(state, batch, styles, mode=mode)
                line = json.dumps(metrics)
                print(line, flush=True)
                stream.write(line + "\n")
                if cfg.train.checkpoint_every > 0 and \
                        state.step % cfg.train.checkpoint_every == 0:
                    save_checkpoint(
                        out / f"ckpt_{state.step:06d}.ckpt", state)
        save_checkpoint(out / "checkpoint.ckpt", state)
        _info(f"saved {out / 'checkpoint.ckpt'} at step {state.step}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import write_report
    state = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    report = write_report(args.out, state.gen, dataset, seed=args.seed or 0,
                          metrics_path=args.metrics)
    _info(f"wrote report to {args.out}")
    print(json.dumps({
        "report": str(Path(args.out) / "report.json"),
        "mask_iou_mean": report["mask_iou"]["mean"],
        "diversity_mean": report["diversity"]["mean"],
        "locality_exact": report["locality"]["alpha_zero"],
    }))
    return EXIT_OK


def cmd_generate(args) -> int:
    state = load_checkpoint(args.checkpoint)
    try:
        text = Path(args.layout).read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read layout file: {e}") from None
    layout, style = parse_layout(text)
    result = synthesize(state.gen, layout, style,
                        default_seed=args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "image.png").write_bytes(encode_png(result["image"], "RGB"))
    (out / "label_map.png").write_bytes(
        encode_png(result["label_map_rgb"], "RGB"))
    for i, mask in enumerate(result["masks"]):
        (out / f"mask_{i:02d}.png").write_bytes(encode_png(mask, "L"))
    _info(f"wrote image, label map, and {len(result['masks'])} masks "
          f"to {out}")
    print(json.dumps({"out": str(out),
                      "image_seed": result["image_seed"],
                      "object_seeds": result["object_seeds"],
                      "labels": result["labels"]}))
    return EXIT_OK


def cmd_serve(args) -> int:
    state = load_checkpoint(args.checkpoint)
    server = make_server(state.gen, port=args.port, model_step=state.step,
                         default_seed=args.seed or 0)
    _info(f"serving checkpoint (step {state.step}) "
          f"on http://127.0.0.1:{server.server_port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        _info("stopped")
    finally:
        server.server_close()
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layoutgan",
        description="Layout-conditioned image and label-map synthesis.")
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="dataset utilities")
    ds_sub = ds.add_subparsers(dest="dataset_command", required=True)
    mk = ds_sub.add_parser("make", help="write a procedural shapes dataset")
    mk.add_argument("--config", help="run configuration YAML")
    mk.add_argument("--seed", type=int, help="override dataset seed")
    mk.add_argument("--out", required=True, help="output directory")
    mk.set_defaults(func=cmd_dataset_make)

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--config", help="run configuration YAML")
    tr.add_argument("--seed", type=int, help="override training seed")
    tr.add_argument("--out", help="run directory for checkpoints/metrics")
    tr.add_argument("--data", help="dataset directory")
    tr.add_argument("--steps", type=int, help="override step count")
    tr.add_argument("--checkpoint", help="resume from this checkpoint")
    tr.add_argument("--semi", action="store_true",
                    help="semi-supervised mode (detected boxes with "
                         "confidences on the unsupervised split)")
    tr.add_argument("--semi-fraction", type=float, dest="semi_fraction",
                    help="supervised fraction for --semi")
    tr.add_argument("--dump-config", action="store_true",
                    dest="dump_config",
                    help="print the effective configuration and exit")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True, help="dataset directory")
    ev.add_argument("--out", required=True, help="report directory")
    ev.add_argument("--seed", type=int)
    ev.add_argument("--metrics", help="metric stream to render as curves")
    ev.set_defaults(func=cmd_eval)

    ge = sub.add_parser("generate", help="synthesize one layout")
    ge.add_argument("--checkpoint", required=True)
    ge.add_argument("--layout", required=True, help="layout JSON file")
    ge.add_argument("--out", required=True, help="output directory")
    ge.add_argument("--seed", type=int,
                    help="master style seed when the layout has none")
    ge.set_defaults(func=cmd_generate)

    sv = sub.add_parser("serve", help="HTTP inference service")
    sv.add_argument("--checkpoint", required=True)
    sv.add_argument("--port", type=int, default=8321)
    sv.add_argument("--seed", type=int,
                    help="default master seed for unseeded requests")
    sv.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        _info(f"configuration error: {e}")
        return EXIT_CONFIG
    except (DataError, LayoutError) as e:
        _info(f"data error: {e}")
        return EXIT_DATA
    except CheckpointError as e:
        _info(f"checkpoint error: {e}")
        return EXIT_CHECKPOINT
    except FloatingPointError as e:
        _info(f"numeric failure: {e}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
