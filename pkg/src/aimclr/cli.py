"""Command-line entry point: ``aimclr <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error. Hyperparameters come
from the ``--config`` JSON; flags carry paths and seeds and override the
config where both exist.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import evaluation as ev
from . import skeleton, training

STREAMS = ("joint", "bone", "motion")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _weights(text):
    try:
        vals = [float(w) for w in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"weights must be comma-separated numbers, got {text!r}") from None
    if len(vals) != 3 or min(vals) < 0:
        raise argparse.ArgumentTypeError("weights must be three non-negative numbers w_j,w_b,w_m")
    return vals


def _fraction(text):
    try:
        f = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0 < f <= 1:
        raise argparse.ArgumentTypeError("label fraction must lie in (0, 1]")
    return f


def build_parser():
    p = _Parser(prog="aimclr", description="Self-supervised skeleton contrastive pretraining and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("synth", help="write a synthetic labelled dataset")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--classes", type=int, default=4, help="number of classes (default 4)")
    s.add_argument("--per-class", type=int, default=64, help="training sequences per class (default 64)")
    s.add_argument("--test-per-class", type=int, default=0,
                   help="extra held-out sequences per class, listed in test_manifest.json (default 0)")
    s.add_argument("--frames", type=int, default=32, help="frames per sequence (default 32)")
    s.add_argument("--persons", type=int, default=1, help="person slots per sequence (default 1)")
    s.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")

    s = sub.add_parser("pretrain", help="two-stage contrastive pretraining")
    s.add_argument("--data", required=True, help="training manifest JSON")
    s.add_argument("--out", required=True, help="run directory for checkpoints and metrics.jsonl")
    s.add_argument("--config", help="training config JSON (defaults used when omitted)")
    s.add_argument("--graph", help="graph JSON (default: graph.json beside the manifest, else the built-in graph)")
    s.add_argument("--seed", type=int, help="overrides the config seed")
    s.add_argument("--stream", choices=STREAMS, help="overrides the config stream")
    s.add_argument("--resume", metavar="CKPT", help="checkpoint directory to resume from")

    for name, text in (("eval-knn", "KNN evaluation on frozen features"),
                       ("eval-linear", "linear probe on frozen features"),
                       ("finetune", "train encoder and classifier on (a fraction of) the labels")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--ckpt", required=True, help="checkpoint directory")
        s.add_argument("--train", required=True, help="labelled training manifest")
        s.add_argument("--test", required=True, help="test manifest")
        s.add_argument("--out", help="write the JSON report here as well as to stdout")
        if name == "eval-knn":
            s.add_argument("--k", type=int, default=1, help="neighbours voting (default 1)")
        else:
            s.add_argument("--epochs", type=int, help="classifier epochs")
            s.add_argument("--lr", type=float, help="learning rate")
            s.add_argument("--seed", type=int, default=0, help="classifier seed (default 0)")
        if name == "finetune":
            s.add_argument("--label-fraction", type=_fraction, default=1.0,
                           help="fraction of labels used, per class (default 1.0)")

    s = sub.add_parser("fuse", help="weighted fusion of per-stream reports")
    s.add_argument("--reports", nargs="+", required=True, help="report JSON files carrying per-sample scores")
    s.add_argument("--weights", type=_weights, help="w_j,w_b,w_m for joint, bone and motion (default 0.6,0.6,0.4)")
    s.add_argument("--out", help="write the fused JSON report here as well as to stdout")

    s = sub.add_parser("export-embeddings", help="write {id, label, h} records for a manifest")
    s.add_argument("--ckpt", required=True, help="checkpoint directory")
    s.add_argument("--data", required=True, help="manifest to embed")
    s.add_argument("--out", required=True, help="output JSONL path")
    return p


def _graph_for(manifest_path, graph_path):
    if graph_path:
        return skeleton.load_graph(graph_path)
    beside = Path(manifest_path).parent / "graph.json"
    return skeleton.load_graph(beside) if beside.exists() else skeleton.default_graph()


def _emit(report, out):
    if out:
        ev.save_report(report, out)
    print(json.dumps(report.to_json(include_scores=False)))
    print(report.table())


def cmd_synth(args):
    if args.classes < 2 or args.per_class < 1 or args.frames < 1 or args.persons < 1 or args.test_per_class < 0:
        raise UsageError("synth needs --classes >= 2 and positive --per-class, --frames, --persons")
    m = skeleton.generate_synthetic(args.classes, args.per_class, args.out, T=args.frames, P=args.persons,
                                    seed=args.seed, test_per_class=args.test_per_class)
    print(f"wrote {len(m)} training sequences to {Path(args.out) / 'manifest.json'}")
    if args.test_per_class:
        print(f"wrote {args.classes * args.test_per_class} test sequences to {Path(args.out) / 'test_manifest.json'}")


def cmd_pretrain(args):
    overrides = {"seed": args.seed, "stream": args.stream}
    if args.config:
        config = training.load_config(args.config, **overrides)
    else:
        config = training.TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    manifest = skeleton.load_manifest(args.data)
    graph = _graph_for(args.data, args.graph)
    last, _ = training.run_pretraining(config, manifest, graph, args.out, resume_from=args.resume)
    print(f"final checkpoint {last}")


def cmd_eval_knn(args):
    _emit(ev.knn_eval(args.ckpt, args.train, args.test, args.k), args.out)


def _opt(args, *names):
    return {n: getattr(args, n) for n in names if getattr(args, n) is not None}


def cmd_eval_linear(args):
    _emit(ev.linear_eval(args.ckpt, args.train, args.test, **_opt(args, "epochs", "lr", "seed")), args.out)


def cmd_finetune(args):
    report = ev.finetune_eval(args.ckpt, args.train, args.label_fraction, args.test,
                              **_opt(args, "epochs", "lr", "seed"))
    _emit(report, args.out)


def cmd_fuse(args):
    reports = [ev.load_report(p) for p in args.reports]
    weights = None
    if args.weights is not None:
        by_stream = dict(zip(STREAMS, args.weights))
        weights = [by_stream[r.streams[0]] for r in reports]
    _emit(ev.fuse_streams(reports, weights), args.out)


def cmd_export(args):
    path = ev.export_embeddings(args.ckpt, args.data, args.out)
    print(f"wrote embeddings to {path}")


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "eval-knn": cmd_eval_knn,
    "eval-linear": cmd_eval_linear,
    "finetune": cmd_finetune,
    "fuse": cmd_fuse,
    "export-embeddings": cmd_export,
}


def main(argv=None):
    args = None
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        training.worker_count()
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else 0
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        print(f"aimclr {getattr(args, 'command', '')}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
