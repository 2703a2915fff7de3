"""Command-line entry point: ``psst <subcommand> [options]``.

Exit codes: 0 success, 1 usage or input error, 2 numerical abort,
3 oracle acceptance gate failed.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
import typing

import numpy as np
import yaml

from . import __version__
from .errors import CheckpointError, ConfigError, NumericalError, PsstError
from .estimators import Baseline, EstimatorConfig, Kind
from .experiment import (
    OUTPUT_ROOT_ENV,
    RunConfig,
    RunManifest,
    WorldContext,
    curve_by_run,
    evaluate,
    grid_cells,
    joint_train,
    load_agents,
    pretrain,
    recall_at_matched_cider,
    sweep,
)
from .world import World, WorldConfig, generate_world

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_GATE = 0, 1, 2, 3

log = logging.getLogger("psst")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _flag(name):
    return "--" + name.replace("_", "-")


def _base_type(tp):
    args = [a for a in typing.get_args(tp) if a is not type(None)]
    return args[0] if args else tp


def _add_run_flags(parser, skip=()):
    group = parser.add_argument_group("run configuration (overrides --config)")
    for f in dataclasses.fields(RunConfig):
        if f.name in skip:
            continue
        tp = _base_type(f.type)
        if tp is bool:
            group.add_argument(_flag(f.name), action=argparse.BooleanOptionalAction, default=None)
        else:
            group.add_argument(_flag(f.name), type=tp, default=None, metavar=f.name.upper())
    parser.add_argument("--config", help="YAML file with run configuration keys")


def _read_config_file(path):
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    out = {}
    for key, value in data.items():
        name = str(key).replace("-", "_")
        if name not in known:
            raise ConfigError(f"{path}: unknown config key {key!r}")
        out[name] = value
    return out


def resolve_run_config(args, **forced):
    """RunConfig from defaults, then the config file, then explicit CLI flags."""
    values = _read_config_file(getattr(args, "config", None))
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    values.update(forced)
    # knobs that do not apply to the chosen method are dropped, not rejected
    method = values.get("method", RunConfig.method)
    try:
        kind = Kind(method)
    except ValueError as exc:
        raise ConfigError(f"unknown method {method!r}") from exc
    if kind not in (Kind.PSST_MULTINOMIAL, Kind.PSST_GUMBEL):
        values["rho"] = None
    if kind not in (Kind.ST_GUMBEL, Kind.PSST_GUMBEL):
        values["tau"] = None
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def output_path(path):
    """Relative output paths are placed under ``$PSST_OUTPUT_ROOT`` (default ``runs``)."""
    if path is None:
        return None
    if os.path.isabs(path):
        return path
    return os.path.join(os.environ.get(OUTPUT_ROOT_ENV, "runs"), path)


def _load_world(path):
    if not path:
        raise ConfigError("--world is required")
    try:
        return World.load(path)
    except OSError as exc:
        raise ConfigError(f"cannot read world file: {exc}") from exc


def _csv_floats(text, name):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"--{name}: expected comma-separated numbers") from exc


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


# ----------------------------------------------------------------- commands


def cmd_world_gen(args):
    sizes = tuple(int(x) for x in _csv_floats(args.split_sizes, "split-sizes"))
    if len(sizes) != 3:
        raise ConfigError("--split-sizes needs three values: train,val,test")
    config = WorldConfig(
        num_attributes=args.num_attributes,
        values_per_attribute=args.values_per_attribute,
        synonyms_per_value=args.synonyms_per_value,
        refs_per_scene=args.refs_per_scene,
        split_sizes=sizes,
        max_len=args.max_len,
        mention_prob=args.mention_prob,
        preferred_synonym_prob=args.preferred_synonym_prob,
        seed=args.seed,
    )
    world = generate_world(config)
    world.save(args.out)
    print(f"wrote {args.out}: {len(world.scenes)} scenes, vocabulary {len(world.vocab)}")
    return EXIT_OK


def cmd_pretrain(args):
    world = _load_world(args.world)
    config = resolve_run_config(args)
    out = output_path(config.output_dir or f"pretrain_seed{config.seed}")
    t0 = time.perf_counter()
    speaker, listener, history = pretrain(world, config, out)
    manifest = RunManifest(
        config=config.to_dict(),
        timings={"pretrain_seconds": time.perf_counter() - t0},
        final_metrics={"speaker_val_nll": history["speaker_val_nll"][-1],
                       **(history["listener_val"][-1] if history["listener_val"] else {})},
        checkpoints={"speaker": os.path.join(out, "speaker_pretrain.ckpt"),
                     "listener": os.path.join(out, "listener_pretrain.ckpt")},
    )
    manifest.write(os.path.join(out, "manifest.json"))
    _print_json(manifest.final_metrics)
    return EXIT_OK


def _agents_for_training(world, config, args):
    if bool(args.speaker) != bool(args.listener):
        raise ConfigError("--speaker and --listener must be given together")
    if args.speaker:
        return load_agents(world, config, args.speaker, args.listener)
    speaker, listener, _ = pretrain(world, config)
    return speaker, listener


def cmd_train(args):
    world = _load_world(args.world)
    config = resolve_run_config(args)
    speaker, listener = _agents_for_training(world, config, args)
    out = output_path(config.output_dir or f"{config.method}_lam{config.lam:g}_seed{config.seed}")
    manifest, _, _ = joint_train(world, config, speaker, listener, out)
    _print_json({"best_epoch": manifest.best_epoch, "val": manifest.best_metrics, "test": manifest.final_metrics,
                 "output_dir": out})
    return EXIT_OK


def cmd_sweep(args):
    world = _load_world(args.world)
    base = resolve_run_config(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        try:
            Kind(m)
        except ValueError as exc:
            raise ConfigError(f"unknown method {m!r}") from exc
    seeds = [int(s) for s in _csv_floats(args.seeds, "seeds")]
    cells = grid_cells(methods, _csv_floats(args.lams, "lams"), _csv_floats(args.rhos, "rhos"), seeds)
    out = output_path(base.output_dir or "sweep")
    manifests, points = sweep(world, base, cells, out, workers=args.workers)
    failed = [c.name() for c, m in manifests.items() if m.status != "ok"]
    summary = {"cells": len(cells), "failed": failed, "csv": os.path.join(out, "curves.csv")}
    if args.cider_level is not None and points:
        by_run = recall_at_matched_cider(curve_by_run(points), args.cider_level)
        summary["recall1_at_cider"] = {f"{k[0]} lam={k[1]:g} rho={k[2]} seed={k[3]}": v for k, v in by_run.items()}
    _print_json(summary)
    return EXIT_OK


def cmd_evaluate(args):
    world = _load_world(args.world)
    config = resolve_run_config(args)
    speaker, listener = load_agents(world, config, args.speaker, args.listener)
    ctx = WorldContext(world)
    captions = None
    if args.references:
        captions = [ctx.references(s)[0] for s in world.split(args.split)]
    metrics = evaluate(world, speaker, listener, args.split, config.beam_width, config.max_len, ctx, captions)
    if args.show:
        for scene, cap in zip(world.split(args.split)[: args.show], metrics["captions"]):
            print(f"# scene {scene.id}: {world.describe(cap)}", file=sys.stderr)
    _print_json({k: v for k, v in metrics.items() if k != "captions"})
    return EXIT_OK


def cmd_oracle(args):
    from .oracle import estimator_report, random_instance, unbiasedness_gate

    rng = np.random.default_rng(args.seed)
    instances = [random_instance(rng, args.vocab, args.length, args.loss) for _ in range(args.instances)]
    t0 = time.perf_counter()
    ok, reports = unbiasedness_gate(instances, n_samples=args.samples, seed=args.seed)
    result = {"unbiased": ok, "seconds": round(time.perf_counter() - t0, 2), "instances": []}
    reductions = []
    for i in range(len(instances)):
        none, gt = reports[2 * i], reports[2 * i + 1]
        red = 1.0 - gt.mean_variance / none.mean_variance if none.mean_variance > 0 else 0.0
        reductions.append(red)
        result["instances"].append({
            "max_abs_z_none": none.max_abs_z(),
            "max_abs_z_ground_truth": gt.max_abs_z(),
            "variance_none": none.mean_variance,
            "variance_ground_truth": gt.mean_variance,
            "variance_reduction": red,
        })
    variance_ok = all(r > 0 for r in reductions) and max(reductions) >= 0.2
    result["variance_reduction_ok"] = variance_ok
    if args.rho_sweep:
        inst, params = instances[0]
        rows = {}
        for rho in (0.0, 0.25, 0.5, 0.75, 1.0):
            cfg = EstimatorConfig(Kind.PSST_MULTINOMIAL, rho=rho, baseline=Baseline.NONE)
            rep = estimator_report(inst, params, cfg, args.samples, np.random.default_rng([args.seed, 99]))
            rows[str(rho)] = {"variance": rep.mean_variance, "bias_norm": float(np.linalg.norm(rep.bias))}
        result["psst_rho_sweep"] = rows
    if args.json:
        _print_json(result)
    else:
        for i, rep in enumerate(reports):
            print(f"## instance {i // 2} {rep.kind}")
            print(rep.to_text())
        for i, row in enumerate(result["instances"]):
            print(f"## instance {i} variance_reduction={row['variance_reduction']:.4f}")
        for rho, row in result.get("psst_rho_sweep", {}).items():
            print(f"## psst rho={rho} variance={row['variance']:.6g} bias_norm={row['bias_norm']:.6g}")
        print(f"## gate unbiased={ok} variance_reduction_ok={variance_ok} seconds={result['seconds']}")
    return EXIT_OK if ok and variance_ok else EXIT_GATE


# ------------------------------------------------------------------- parser


def build_parser():
    parser = _Parser(prog="psst", description="Gradient estimators through discrete channels on a referential game.")
    parser.add_argument("--version", action="version", version=f"psst {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("world-gen", help="generate a referential world file")
    p.add_argument("--out", required=True)
    d = WorldConfig()
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--num-attributes", type=int, default=d.num_attributes)
    p.add_argument("--values-per-attribute", type=int, default=d.values_per_attribute)
    p.add_argument("--synonyms-per-value", type=int, default=d.synonyms_per_value)
    p.add_argument("--refs-per-scene", type=int, default=d.refs_per_scene)
    p.add_argument("--split-sizes", default=",".join(map(str, d.split_sizes)), help="train,val,test")
    p.add_argument("--max-len", type=int, default=d.max_len)
    p.add_argument("--mention-prob", type=float, default=d.mention_prob)
    p.add_argument("--preferred-synonym-prob", type=float, default=d.preferred_synonym_prob)
    p.set_defaults(func=cmd_world_gen)

    p = sub.add_parser("pretrain", help="MLE speaker and hinge listener pretraining")
    _add_run_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="joint training with one estimator")
    _add_run_flags(p)
    p.add_argument("--speaker", help="pretrained speaker checkpoint (pretrains in-process if omitted)")
    p.add_argument("--listener", help="pretrained listener checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="grid over method, lambda, rho and seed")
    _add_run_flags(p, skip=("method", "lam", "rho", "seed"))
    p.add_argument("--methods", default="psst-mn")
    p.add_argument("--lams", default="0.99")
    p.add_argument("--rhos", default="0,0.25,0.5,0.75,1")
    p.add_argument("--seeds", default="0")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--cider-level", type=float, help="also report recall@1 interpolated at this CIDEr")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="beam-decode a split and report retrieval metrics")
    _add_run_flags(p)
    p.add_argument("--speaker", required=True)
    p.add_argument("--listener", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--references", action="store_true", help="score each scene's first reference instead")
    p.add_argument("--show", type=int, default=0, metavar="N", help="print the first N captions to stderr")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("oracle", help="exact-enumeration gradient checks (exit 3 if the gate fails)")
    p.add_argument("--instances", type=int, default=3)
    p.add_argument("--vocab", type=int, default=3)
    p.add_argument("--length", type=int, default=2)
    p.add_argument("--loss", choices=("table", "listener"), default="table")
    p.add_argument("--samples", type=int, default=200_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rho-sweep", action="store_true", help="also report PSST variance across rho")
    p.add_argument("--json", action="store_true", help="print a JSON summary instead of per-coordinate rows")
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"psst: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, CheckpointError, PsstError, UsageError) as exc:
        print(f"psst: {exc}", file=sys.stderr)
        return EXIT_USAGE
