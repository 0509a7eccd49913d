"""Command-line entry point.

Any configuration key can be overridden on the command line as
``--key value`` (for example ``--grid.vx 0.25 --train.steps 300``);
precedence is CLI > config file > defaults.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, build_run_config
from .pointcloud import parse_scene_spec
from .pipeline import (
    cmd_encode,
    cmd_eval,
    cmd_gradcheck,
    cmd_infer,
    cmd_nds,
    cmd_synth,
    cmd_train_toy,
)


def _parse_overrides(extra: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--"):
            raise ConfigError(f"unexpected argument {token!r}")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {token!r} is missing a value")
            value = extra[i + 1]
            i += 2
        out[key] = value
    return out


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key-value config file")
    p.add_argument("--seed", type=int, help="override the run seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="centerbev",
        description="Anchor-free, NMS-free 3D detection pipeline at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic labeled scenes")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--scene-spec", type=Path, help="scene spec file (flat key-value)")

    p = sub.add_parser("encode", help="encode training targets for scenes")
    _add_common(p)
    p.add_argument("--scenes", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train-toy", help="train the dense reference head")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("infer", help="decode detections for scenes")
    _add_common(p)
    p.add_argument("--scenes", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--oracle-head", action="store_true",
                   help="bypass the model and decode encoded targets directly")

    p = sub.add_parser("eval", help="score detections against labels")
    _add_common(p)
    p.add_argument("--detections", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--mtp", type=Path, help="sidecar with the five TP error terms")

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    _add_common(p)
    p.add_argument("--probes", type=int, default=100)

    p = sub.add_parser("nds", help="detection score from an mTP sidecar")
    _add_common(p)
    p.add_argument("--mtp", type=Path, required=True)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = _parse_overrides(extra)
        if args.seed is not None:
            overrides["seed"] = str(args.seed)
        file_text = args.config.read_text() if args.config else None
        cfg = build_run_config(file_text, overrides)

        if args.command == "synth":
            spec = None
            if args.scene_spec:
                spec = parse_scene_spec(args.scene_spec.read_text())
            fids = cmd_synth(cfg, args.out, args.count, spec)
            print(f"wrote {len(fids)} scenes to {args.out}")
        elif args.command == "encode":
            fids = cmd_encode(cfg, args.scenes, args.out)
            print(f"encoded {len(fids)} frames to {args.out}")
        elif args.command == "train-toy":
            summary = cmd_train_toy(cfg, args.out)
            print(f"initial_loss={summary['initial_loss']:.6g}")
            print(f"final_loss={summary['final_loss']:.6g}")
            print(f"ratio={summary['ratio']:.6g}")
            for name, value in summary["val_ap"].items():
                print(f"val_ap40_bev_05.{name}={value:.6f}")
            print(f"checkpoint={summary['checkpoint']}")
        elif args.command == "infer":
            fids = cmd_infer(cfg, args.scenes, args.out,
                             checkpoint=args.checkpoint, oracle=args.oracle_head)
            print(f"wrote detections for {len(fids)} frames to {args.out}")
        elif args.command == "eval":
            report, _ = cmd_eval(cfg, args.detections, args.labels, args.mtp)
            print(report, end="")
        elif args.command == "gradcheck":
            table, ok = cmd_gradcheck(seed=cfg.seed, n_probes=args.probes)
            print(table)
            return 0 if ok else 1
        elif args.command == "nds":
            print(f"nds={cmd_nds(args.mtp):.6f}")
        return 0
    except (ConfigError, ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
