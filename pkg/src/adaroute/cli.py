"""Command line entry points.

Subcommands: gen-tasks (materialize a stream artifact), train (run the
continual sequence), eval (score a checkpoint), report (re-emit saved run
records), verify (router identity self-test). Exit codes: 0 success,
1 usage or bad config, 2 verification failure, 3 I/O or file format.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, config_from_toml, default_config
from .harness import evaluate_bank, run_continual, run_equivalence_suite
from .reporting import (
    full_report,
    load_record,
    record_to_json,
    result_record,
    write_run_outputs,
)
from .tasks import TaskStream, generate_task_stream

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFY = 2
EXIT_IO = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we own the codes
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="adaroute", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-tasks", help="materialize a task stream artifact")
    gen.add_argument("--config", help="TOML run config (defaults to built-ins)")
    gen.add_argument("--seed", type=int, help="override the stream seed")
    gen.add_argument("--out", required=True, help="directory for stream.json")

    train = sub.add_parser("train", help="run the continual task sequence")
    train.add_argument("--config", help="TOML run config")
    train.add_argument("--seed", type=int, help="override the stream seed")
    train.add_argument("--order", choices=["1", "2", "custom"],
                       help="task order: fixed order 1 or 2, or the config's own")
    train.add_argument("--chunk-size", type=int, help="router update chunk size")
    train.add_argument("--generalist-route", action="store_true",
                       help="add the generic-input class routed to the bare encoder")
    train.add_argument("--stream", help="stream artifact to train on instead of regenerating")
    train.add_argument("--checkpoint", help="write the final checkpoint here")
    train.add_argument("--out", help="directory for report files")
    train.add_argument("--phase-checkpoints", action="store_true",
                       help="also write a checkpoint after every phase (needs --out)")
    train.add_argument("--resume", help="continue from a saved checkpoint")

    ev = sub.add_parser("eval", help="score a checkpoint on a stream")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--stream", help="stream artifact (defaults to regenerating)")
    ev.add_argument("--out", help="directory for the eval record")

    rep = sub.add_parser("report", help="re-emit tables from a saved run record")
    rep.add_argument("--run", required=True, help="run directory or run_record.json")
    rep.add_argument("--out", help="directory to rewrite report files into")

    ver = sub.add_parser("verify", help="router identity self-test")
    ver.add_argument("--trials", type=int, default=25)
    ver.add_argument("--seed", type=int, default=20240801)
    ver.add_argument("--tol", type=float, default=1e-9)
    ver.add_argument("--chunk-size", type=int, default=64)
    return parser


def _load_config(args) -> RunConfig:
    cfg = config_from_toml(args.config) if args.config else default_config()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, stream_seed=args.seed)
    order = getattr(args, "order", None)
    if order in ("1", "2"):
        cfg = replace(cfg, order=order)
    if getattr(args, "chunk_size", None) is not None:
        cfg = replace(cfg, chunk_size=args.chunk_size)
    if getattr(args, "generalist_route", False):
        cfg = replace(cfg, generalist_route=True)
    return cfg


def _load_stream(path) -> TaskStream:
    with open(path, encoding="utf-8") as fh:
        return TaskStream.from_payload(json.load(fh))


def _stream_for(cfg: RunConfig, stream_path) -> TaskStream:
    if stream_path is None:
        return generate_task_stream(cfg.stream, cfg.stream_seed)
    stream = _load_stream(stream_path)
    if stream.spec != cfg.stream:
        raise _UsageError(
            f"stream artifact {stream_path} was generated from a different stream spec"
        )
    return stream


def cmd_gen_tasks(args) -> int:
    cfg = _load_config(args)
    stream = generate_task_stream(cfg.stream, cfg.stream_seed)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "stream.json")
    payload = stream.to_payload()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"wrote {path}")
    print(f"tasks {stream.spec.num_tasks}  samples/task {stream.spec.samples_per_task}")
    print(f"digest {payload['digest']}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.resume:
        overrides = [
            name
            for name, value in (
                ("--config", args.config),
                ("--seed", args.seed),
                ("--order", args.order),
                ("--chunk-size", args.chunk_size),
                ("--generalist-route", args.generalist_route or None),
            )
            if value is not None
        ]
        if overrides:
            raise _UsageError(
                f"--resume continues the checkpoint's own config; drop {overrides}"
            )
        ck = load_checkpoint(args.resume)
        cfg, state, bank, start = ck.config, ck.state, ck.bank, ck.phase
    else:
        cfg, state, bank, start = _load_config(args), None, None, 0
    stream = _stream_for(cfg, args.stream)
    if args.phase_checkpoints and not args.out:
        raise _UsageError("--phase-checkpoints needs --out")

    callback = None
    if args.phase_checkpoints:
        os.makedirs(args.out, exist_ok=True)

        def callback(done, st, bk):
            save_checkpoint(
                st, bk, cfg, os.path.join(args.out, f"checkpoint_phase_{done}.bin"),
                phase=done,
            )

    result = run_continual(
        stream, cfg, start_phase=start, state=state, bank=bank, phase_callback=callback
    )
    record = result_record(result, cfg)
    print(full_report(record), end="")
    if args.out:
        paths = write_run_outputs(record, args.out)
        print(f"wrote {paths['run_record.json']}")
    if args.checkpoint:
        save_checkpoint(
            result.state, result.bank, cfg, args.checkpoint,
            phase=stream.spec.num_tasks,
        )
        print(f"wrote {args.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    stream = _stream_for(ck.config, args.stream)
    per_task = evaluate_bank(stream, ck.config, ck.state, ck.bank)
    print("per-task eval accuracy (exact match / routing)")
    for tid, scores in sorted(per_task.items()):
        print(
            f"task {tid}: {scores['score']:.4f} / {scores['routing_accuracy']:.4f}"
        )
    mean_score = sum(s["score"] for s in per_task.values()) / len(per_task)
    print(f"mean exact match: {mean_score:.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "eval_record.json")
        record = {
            "checkpoint": os.fspath(args.checkpoint),
            "phase": ck.phase,
            "per_task": {str(t): s for t, s in sorted(per_task.items())},
            "mean_score": mean_score,
        }
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(record_to_json(record))
        print(f"wrote {path}")
    return EXIT_OK


def cmd_report(args) -> int:
    record = load_record(args.run)
    print(full_report(record), end="")
    if args.out:
        paths = write_run_outputs(record, args.out)
        print(f"wrote {paths['run_record.json']}")
    return EXIT_OK


def cmd_verify(args) -> int:
    report = run_equivalence_suite(
        trials=args.trials,
        seed=args.seed,
        tol=args.tol,
        chunk_sizes=(1, 7, args.chunk_size),
    )
    print(f"router identity self-test over {report['trials']} random instances")
    print(f"joint vs recursive   max |dW| = {report['joint_recursive']:.3e}")
    print(f"recursive vs direct  max |dW| = {report['recursive_direct']:.3e}")
    print(f"chunked vs joint     max |dW| = {report['chunking']:.3e}")
    print(f"tolerance {report['tol']:.1e}: {'PASS' if report['passed'] else 'FAIL'}")
    return EXIT_OK if report["passed"] else EXIT_VERIFY


_COMMANDS = {
    "gen-tasks": cmd_gen_tasks,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        # before ValueError: JSONDecodeError subclasses it but is an I/O problem
        print(f"file format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
