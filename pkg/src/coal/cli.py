"""Command-line entry point: ``coal gen-data | train | track | eval | gradcheck | validate``.

Exit statuses: 0 success, 2 usage or configuration error, 3 dataset
validation failure, 4 I/O failure, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from coal import container, gradcheck, metrics, priors
from coal.config import ConfigError, RunConfig, load_config
from coal.encoders import FeatureError
from coal.tensor import NumericalError
from coal.tracker import Scorer, format_records, run_sequence
from coal.training import CheckpointError, Trainer, load_checkpoint, resume, save_checkpoint
from coal.validation import validate_dataset

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4, 5
CONFIG_ECHO = "run_config.json"


class CommandError(Exception):
    def __init__(self, message: str, status: int):
        super().__init__(message)
        self.status = status


@dataclass
class Flag:
    """A command-line flag bound to one dotted config key."""

    name: str
    key: str
    help: str
    type: type | None = None
    const: object = None  # set for switches
    choices: tuple | None = None


DATA_FLAGS = [
    Flag("--sequences", "data.sequences", "number of sequences", int),
    Flag("--frames", "data.frames", "frames per sequence", int),
    Flag("--objects", "data.objects", "objects per sequence", int),
    Flag("--expressions", "data.expressions", "expressions per sequence", int),
    Flag("--counterfactuals", "data.counterfactuals", "counterfactual pool size per expression", int),
    Flag("--caption-error-rate", "data.caption_error_rate", "probability a caption attribute is wrong", float),
    Flag("--box-jitter", "data.box_jitter", "std of proposal box noise", float),
    Flag("--spurious-rate", "data.spurious_rate", "expected spurious proposals per frame", float),
    Flag("--miss-rate", "data.miss_rate", "probability an object gets no proposal", float),
    Flag("--seed", "data.seed", "generator seed", int),
]

TRAIN_FLAGS = [
    Flag("--dataset", "train.dataset", "dataset directory", str),
    Flag("--checkpoint", "train.checkpoint", "checkpoint output path", str),
    Flag("--log", "train.log", "loss log path (JSON lines; default <checkpoint>.log.jsonl)", str),
    Flag("--epochs", "train.epochs", "training epochs", int),
    Flag("--lr", "train.lr", "AdamW learning rate", float),
    Flag("--seed", "train.seed", "seed for initialization and sampling", int),
    Flag("--n-queries", "train.n_queries", "expressions per frame (each adds one counterfactual)", int),
    Flag("--precision", "train.precision", "floating point precision", str, choices=("f32", "f64")),
    Flag("--no-cfl", "train.cf_enabled", "disable the counterfactual loss", const=False),
    Flag("--no-esi", "train.esi_enabled", "disable caption/proposal injection", const=False),
    Flag("--weight-decay", "train.weight_decay", "AdamW weight decay", float),
    Flag("--grad-clip", "train.grad_clip", "global gradient norm clip (0 disables)", float),
    Flag("--dim", "train.dim", "feature dimension", int),
    Flag("--heads", "train.heads", "attention heads", int),
    Flag("--map-height", "train.map_height", "synthetic feature map height", int),
    Flag("--map-width", "train.map_width", "synthetic feature map width", int),
    Flag("--visual-noise", "train.visual_noise", "synthetic feature map noise std", float),
    Flag("--features", "train.features", "visual feature source", str, choices=("synthetic", "precomputed")),
    Flag("--feature-path", "train.feature_path", "tensor container with precomputed maps", str),
]

TRACK_FLAGS = [
    Flag("--tau-high", "tracker.tau_high", "first-stage score threshold", float),
    Flag("--tau-low", "tracker.tau_low", "second-stage score threshold", float),
    Flag("--epsilon", "tracker.epsilon", "score needed to start a track", float),
    Flag("--iou-gate", "tracker.iou_gate", "minimum IoU for an association", float),
    Flag("--max-lost", "tracker.max_lost", "frames a lost track is kept", int),
    Flag("--combine-detector-score", "tracker.combine_detector_score", "stage on semantic x detector score", const=True),
]


def _add_flags(parser: argparse.ArgumentParser, flags: list[Flag]) -> None:
    defaults = RunConfig().to_flat()
    for flag in flags:
        dest = flag.key.replace(".", "__")
        text = f"{flag.help} (default: {defaults[flag.key]})"
        if flag.const is not None:
            parser.add_argument(flag.name, dest=dest, action="store_const", const=flag.const, default=None, help=text)
        else:
            parser.add_argument(flag.name, dest=dest, type=flag.type, choices=flag.choices, default=None, help=text)


def _resolve(args: argparse.Namespace, flags: list[Flag]) -> RunConfig:
    config = load_config(args.config)
    for flag in flags:
        value = getattr(args, flag.key.replace(".", "__"))
        if value is not None:
            config.set(flag.key, value)
    config.validate()
    return config


def _echo(config: RunConfig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config.dumps())


def _require_valid(dataset: str | None) -> list[priors.Sequence]:
    if not dataset:
        raise CommandError("a dataset directory is required", EXIT_USAGE)
    report = validate_dataset(dataset)
    if not report.ok:
        sys.stderr.write(report.format())
        raise CommandError(f"dataset {dataset} failed validation", EXIT_VALIDATION)
    return priors.read_dataset(dataset)


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = _resolve(args, DATA_FLAGS)
    data = config.data
    scene = priors.SceneParams(
        n_objects=data.objects,
        caption_error_rate=data.caption_error_rate,
        box_jitter=data.box_jitter,
        spurious_rate=data.spurious_rate,
        miss_rate=data.miss_rate,
    )
    params = priors.SequenceParams(data.frames, data.objects, data.expressions, data.counterfactuals, scene)
    grammar = priors.default_grammar()
    sequences = [
        priors.generate_sequence(grammar, params, np.random.default_rng([data.seed, i]), f"seq-{i:03d}")
        for i in range(data.sequences)
    ]
    out = Path(args.out)
    priors.write_dataset(out, sequences)
    _echo(config, out / CONFIG_ECHO)
    print(f"wrote {len(sequences)} sequence(s) to {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _resolve(args, TRAIN_FLAGS)
    train = config.train
    if not train.checkpoint:
        raise CommandError("--checkpoint is required", EXIT_USAGE)
    sequences = _require_valid(train.dataset)
    if not train.log:
        train.log = train.checkpoint + ".log.jsonl"
    Path(train.checkpoint).parent.mkdir(parents=True, exist_ok=True)

    def show(record: dict) -> None:
        print(
            f"epoch {record['epoch']:4d}  main {record['main']:.6f}  cf {record['cf']:.6f}"
            f"  total {record['total']:.6f}  frames {record['frames']}",
            flush=True,
        )

    if args.resume:
        trainer = resume(load_checkpoint(args.resume), sequences, train.epochs)
        trainer.config.log = train.log
    else:
        Path(train.log).write_text("")
        trainer = Trainer(train, sequences)
    state = trainer.run(show)
    save_checkpoint(train.checkpoint, state, trainer.config)
    _echo(config, Path(train.checkpoint + ".run.json"))
    return EXIT_OK


def cmd_track(args: argparse.Namespace) -> int:
    config = _resolve(args, TRACK_FLAGS)
    if not args.checkpoint or not Path(args.checkpoint).exists():
        raise CommandError(f"checkpoint {args.checkpoint} not found", EXIT_IO)
    sequences = _require_valid(args.dataset)
    scorer = Scorer.from_checkpoint(load_checkpoint(args.checkpoint), esi=False if args.no_esi else None)
    out = Path(args.out)
    wanted = set(args.expression or [])
    written = 0
    for sequence in sequences:
        for eid in sorted(sequence.expressions):
            expression = sequence.expressions[eid]
            if wanted and eid not in wanted and expression.text not in wanted:
                continue
            records = run_sequence(scorer, sequence, expression.text, config.tracker)
            path = metrics.prediction_path(out, sequence.sequence_id, eid)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(format_records(records))
            written += 1
    _echo(config, out / CONFIG_ECHO)
    print(f"wrote {written} prediction file(s) to {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = _resolve(args, [])
    predictions = Path(args.predictions)
    if not predictions.is_dir():
        raise CommandError(f"prediction directory {predictions} not found", EXIT_IO)
    sequences = _require_valid(args.dataset)
    report = metrics.evaluate_benchmark(sequences, predictions)
    table = report.table()
    sys.stdout.write(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(table)
        (out / "report.jsonl").write_text(report.json_lines())
        _echo(config, out / CONFIG_ECHO)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = gradcheck.check_ops(args.seed, args.tolerance)
    results.append(
        gradcheck.check_end_to_end(
            args.seed,
            args.tolerance,
            args.coords_per_param,
            dims=dict(proposals=args.proposals, tokens=args.tokens, dim=args.dim, size=args.size),
        )
    )
    sys.stdout.write(gradcheck.format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_validate(args: argparse.Namespace) -> int:
    report = validate_dataset(args.dataset)
    sys.stdout.write(report.format())
    return EXIT_OK if report.ok else EXIT_VALIDATION


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coal", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config", default=None, help="JSON config with dotted keys (default: %(default)s)")
    p.add_argument("--out", required=True, help="output dataset directory")
    _add_flags(p, DATA_FLAGS)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a scoring model")
    p.add_argument("--config", default=None, help="JSON config with dotted keys (default: %(default)s)")
    p.add_argument("--resume", default=None, help="continue from this checkpoint (default: %(default)s)")
    _add_flags(p, TRAIN_FLAGS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="write tracking predictions")
    p.add_argument("--config", default=None, help="JSON config with dotted keys (default: %(default)s)")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="prediction directory")
    p.add_argument("--expression", action="append", default=None, help="expression id or text to track (repeatable) (default: %(default)s)")
    p.add_argument("--no-esi", action="store_true", default=False, help="score without caption/proposal injection (default: %(default)s)")
    _add_flags(p, TRACK_FLAGS)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--config", default=None, help="JSON config with dotted keys (default: %(default)s)")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--predictions", required=True, help="prediction directory")
    p.add_argument("--out", default=None, help="directory for report.txt and report.jsonl (default: %(default)s)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0, help="input seed (default: %(default)s)")
    p.add_argument("--tolerance", type=float, default=gradcheck.TOLERANCE, help="max normwise relative error (default: %(default)s)")
    p.add_argument("--proposals", type=int, default=2, help="proposals in the end-to-end frame (default: %(default)s)")
    p.add_argument("--tokens", type=int, default=3, help="tokens per text in the end-to-end frame (default: %(default)s)")
    p.add_argument("--dim", type=int, default=8, help="feature dimension of the end-to-end frame (default: %(default)s)")
    p.add_argument("--size", type=int, default=8, help="feature map side of the end-to-end frame (default: %(default)s)")
    p.add_argument("--coords-per-param", type=int, default=None, help="sample this many coordinates per tensor (default: %(default)s)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("validate", help="check a dataset directory")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"coal: {exc}", file=sys.stderr)
        return exc.status
    except ConfigError as exc:
        print(f"coal: config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"coal: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except priors.PriorError as exc:
        print(f"coal: invalid dataset: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, CheckpointError, container.ContainerError, FeatureError, json.JSONDecodeError) as exc:
        print(f"coal: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
