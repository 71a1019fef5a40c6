"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every output file is written atomically (temporary file plus rename).
"""

import argparse
import csv
import io
import json
import logging
import os
import sys

from hkrm import __version__, kernels, tensorio
from hkrm import knowledge_graphs as kg
from hkrm.config import CONFIG_SCHEMA_VERSION, ConfigError, parse_config
from hkrm.explicit_module import supervision_mask, target_edges
from hkrm.harness.model import forward_model
from hkrm.harness.training import eval_scenes
from hkrm.harness.world import generate_annotations, generate_world
from hkrm.implicit_module import geometry_features, implicit_edges
from hkrm.nn_core import NumericError, derive_seed
from hkrm import runs

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

log = logging.getLogger("hkrm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


class JsonFormatter(logging.Formatter):
    """One JSON object per line: level, logger, message and any ``extra={"fields": ...}``."""

    def format(self, record):
        doc = {"level": record.levelname.lower(), "logger": record.name, "message": record.getMessage()}
        doc.update(getattr(record, "fields", {}) or {})
        return json.dumps(doc, sort_keys=True)


class TextFormatter(logging.Formatter):
    def format(self, record):
        text = f"{record.levelname.lower()} {record.name}: {record.getMessage()}"
        fields = getattr(record, "fields", None)
        if fields:
            text += " " + " ".join(f"{k}={v}" for k, v in sorted(fields.items()))
        return text


def setup_logging(mode, stream=None):
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(JsonFormatter() if mode == "json" else TextFormatter())
    root = logging.getLogger("hkrm")
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO)
    root.propagate = False


def version_text():
    lines = [
        f"hkrm {__version__}",
        f"kernel backend: {kernels.BACKEND}",
        f"{tensorio.FORMAT} container: {tensorio.VERSION}",
        f"prior graph schema: {kg.GRAPH_SCHEMA_VERSION}",
        f"model checkpoint schema: {runs.MODEL_SCHEMA_VERSION}",
        f"run config schema: {CONFIG_SCHEMA_VERSION}",
        f"metrics schema: {runs.METRICS_SCHEMA_VERSION}",
    ]
    return "\n".join(lines) + "\n"


def _matrix_csv(mat, labels):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["region"] + list(labels))
    for label, row in zip(labels, mat):
        writer.writerow([label] + [repr(float(v)) for v in row])
    return buf.getvalue()


# --------------------------------------------------------------------------
# subcommands


def cmd_build_graph(args):
    try:
        with open(args.annotations, encoding="utf-8") as fh:
            records = kg.parse_annotations(fh)
    except OSError as exc:
        raise kg.AnnotationError(f"cannot read annotations {args.annotations}: {exc.strerror}") from exc
    vocab = {}
    for key in ("classes", "attributes", "predicates"):
        path = getattr(args, key)
        vocab[key] = kg.read_vocabulary(path) if path else None
    table, triples = kg.ingest_annotations(
        records, top_attrs=args.top_attrs, top_predicates=args.top_predicates, **vocab
    )
    if args.kind == "attribute":
        graph = kg.build_attribute_graph(table, similarity=args.similarity)
    else:
        graph = kg.build_relationship_graph(triples, per_predicate=args.per_predicate)
    kg.save_graph(graph, args.out)
    if args.csv:
        tensorio.atomic_write_text(args.csv, kg.graph_to_csv(graph))
    log.info("graph written", extra={"fields": {"path": args.out, "kind": graph.kind, **graph.report}})
    return EXIT_OK


def cmd_gen_world(args):
    config = parse_config(args.config)
    seed = config.run.seed if args.seed is None else args.seed
    world = generate_world(config.world, derive_seed(seed, "world"))
    tensorio.atomic_write_text(args.out, runs.dumps_json(world.to_dict()))
    if args.annotations:
        records = generate_annotations(world, derive_seed(seed, "annotations"), args.annotation_scenes)
        text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
        tensorio.atomic_write_text(args.annotations, text)
    log.info("world written", extra={"fields": {"path": args.out, "num_classes": world.num_classes}})
    return EXIT_OK


def cmd_train(args):
    config = parse_config(args.config)
    if args.ablation is not None:
        config.run.ablation = args.ablation
    if args.seed is not None:
        config.run.seed = args.seed
        config.run.validate()
    doc = runs.train_run(config, args.out, jobs=args.jobs)
    final = doc["final"]
    log.info("training done", extra={"fields": {"out": args.out, "accuracy": final["accuracy"]}})
    return EXIT_OK


def cmd_eval(args):
    metrics = runs.evaluate_checkpoint(args.model, args.scenes, args.seed)
    text = runs.dumps_json(metrics)
    if args.out:
        tensorio.atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_inspect_edges(args):
    model, world, _ = runs.load_model(args.model)
    scenes = eval_scenes(world, args.seed, args.scenes)
    written = []
    os.makedirs(args.out, exist_ok=True)
    for k, scene in enumerate(scenes):
        regions = scene.regions
        gt = regions.gt_classes
        labels = [f"{i}:{world.class_names[c]}" for i, c in enumerate(gt)]
        files = {}
        if args.module == "implicit":
            if "spatial" not in model.branches:
                raise ValueError("checkpoint has no implicit (spatial) branch")
            branch = model.branches["spatial"]
            q = geometry_features(regions.boxes, regions.image_size, regions.fg_prob)
            averaged, cache = implicit_edges(q, branch.predictors)
            for m, (raw, _) in enumerate(cache["graphs"]):
                files[f"graph{m}"] = raw
            files["average"] = averaged
        else:
            if args.branch not in model.branches:
                raise ValueError(f"checkpoint has no {args.branch!r} branch")
            _, _, _, cache = forward_model(model, scene, supervise=False)
            bcache = cache["branches"][args.branch]
            files["pred"] = bcache["raw"]
            files["adj"] = bcache["norm"]["adj"]
            prior = model.branches[args.branch].prior
            if prior is not None:
                files["target"] = target_edges(gt, prior) * supervision_mask(gt)
        prefix = "implicit" if args.module == "implicit" else args.branch
        for name, mat in files.items():
            path = os.path.join(args.out, f"scene{k:03d}_{prefix}_{name}.csv")
            tensorio.atomic_write_text(path, _matrix_csv(mat, labels))
            written.append(path)
    log.info("edges written", extra={"fields": {"out": args.out, "files": len(written)}})
    return EXIT_OK


def cmd_export_metrics(args):
    docs = []
    for path in args.metrics:
        doc = runs.load_metrics(path)
        doc["source"] = path
        docs.append(doc)
    if args.what == "final":
        text = runs.final_csv(docs)
    else:
        if len(docs) != 1:
            raise ValueError(f"--what {args.what} exports one metrics file at a time")
        text = runs.steps_csv(docs[0]) if args.what == "steps" else runs.epochs_csv(docs[0])
    tensorio.atomic_write_text(args.out, text)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _seed(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer seed, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError("seeds must be >= 0")
    return value


def _global_flags(parser, defaults):
    log_default = "text" if defaults else argparse.SUPPRESS
    jobs_default = None if defaults else argparse.SUPPRESS
    parser.add_argument("--log", choices=("text", "json"), default=log_default, help="log line format on stderr")
    parser.add_argument("--jobs", type=_positive_int, default=jobs_default, help="worker threads for per-scene gradients")


def build_parser():
    parser = _Parser(prog="hkrm", description="Knowledge-routed region classification on synthetic worlds.")
    parser.add_argument("--version", action="store_true", help="print package and file-format schema versions")
    _global_flags(parser, defaults=True)
    # the global flags are accepted after the subcommand too
    common = _Parser(add_help=False)
    _global_flags(common, defaults=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    _add = sub.add_parser
    sub.add_parser = lambda name, **kw: _add(name, parents=[common], **kw)

    p = sub.add_parser("build-graph", help="build a prior graph from NDJSON annotations")
    p.add_argument("--annotations", required=True)
    p.add_argument("--kind", required=True, choices=kg.GRAPH_KINDS)
    p.add_argument("--similarity", action="store_true", help="attribute edges as 1 - JS instead of JS")
    p.add_argument("--per-predicate", action="store_true", help="average per-predicate normalized graphs")
    p.add_argument("--top-attrs", type=_positive_int, default=None)
    p.add_argument("--top-predicates", type=_positive_int, default=None)
    p.add_argument("--classes", help="class vocabulary file, one name per line")
    p.add_argument("--attributes", help="attribute vocabulary file")
    p.add_argument("--predicates", help="predicate vocabulary file")
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="also write the edge matrix as CSV")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("gen-world", help="generate a synthetic world (and optionally its annotations)")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=_seed, default=None, help="overrides run.seed")
    p.add_argument("--out", required=True, help="world JSON path")
    p.add_argument("--annotations", help="also write NDJSON annotations here")
    p.add_argument("--annotation-scenes", type=_positive_int, default=1000)
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("train", help="train one configuration into an output directory")
    p.add_argument("--config", required=True)
    p.add_argument("--ablation", choices=("baseline", "attr", "rel", "spatial", "all"), default=None)
    p.add_argument("--seed", type=_seed, default=None, help="overrides run.seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out scenes")
    p.add_argument("--model", required=True)
    p.add_argument("--scenes", type=_positive_int, required=True)
    p.add_argument("--seed", type=_seed, required=True)
    p.add_argument("--out", help="metrics JSON path (stdout when omitted)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-edges", help="dump edge matrices of held-out scenes as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--module", choices=("explicit", "implicit"), default="explicit")
    p.add_argument("--branch", choices=("attr", "rel"), default="attr", help="explicit branch to dump")
    p.add_argument("--scenes", type=_positive_int, default=1)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_inspect_edges)

    p = sub.add_parser("export-metrics", help="convert metrics JSON into CSV")
    p.add_argument("--metrics", required=True, nargs="+")
    p.add_argument("--what", choices=("steps", "epochs", "final"), default="steps")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_metrics)
    return parser


DATA_ERRORS = (
    ConfigError,
    kg.AnnotationError,
    kg.EmptyTableError,
    kg.GraphDomainError,
    tensorio.ContainerError,
    ValueError,
    KeyError,
    IndexError,
    OSError,
)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return EXIT_USAGE
    if args.version:
        sys.stdout.write(version_text())
        return EXIT_OK
    if args.command is None:
        sys.stderr.write(parser.format_help())
        return EXIT_USAGE
    setup_logging(args.log)
    try:
        return args.func(args)
    except (NumericError, FloatingPointError) as exc:
        log.error(f"numeric failure: {exc}", extra={"fields": {"exit": EXIT_NUMERIC}})
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        log.error(f"data error: {exc}", extra={"fields": {"exit": EXIT_DATA}})
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
