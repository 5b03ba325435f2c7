"""``calonet`` command line: train, eval, graph, explain, synth.

stdout carries ``key=value`` lines only; progress and errors go to stderr.
Exit codes: 0 ok, 1 usage/parse/config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import causal, model as mdl
from .causal import CausalConfig
from .dataset import ConfigError, ParseError, SynthConfig, conform, load_dataset, planted_benchmark_config, synth_causal, to_ts
from .encoder import EncoderConfig
from .gnn import GinConfig

log = logging.getLogger("calonet")

DATA_DEFAULTS = {"norm": "z", "missing": "interp", "length_policy": "pad"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _add_causal_flags(p):
    g = p.add_argument_group("causal graph")
    g.add_argument("--bins", type=int, help="discretisation bins (default 8)")
    g.add_argument("--bin-strategy", choices=["equal-frequency", "equal-width"], help="default equal-frequency")
    g.add_argument("--k", type=int, help="target history length (default 1)")
    g.add_argument("--l", type=int, help="source history length (default 1)")
    g.add_argument("--threshold", type=float, help="causal score threshold c (default 0)")
    g.add_argument("--graph-scope", choices=["sample", "dataset-mean"], help="default sample")


def _add_data_flags(p):
    g = p.add_argument_group("data")
    g.add_argument("--missing", choices=["interp", "fail"], help="'?' handling (default interp)")
    g.add_argument("--length-policy", choices=["pad", "truncate"], help="unequal lengths (default pad)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="calonet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write model.json, report.csv, config.resolved.json")
    p.add_argument("--train", required=True, help="training split (.ts or .csv)")
    p.add_argument("--test", help="test split evaluated after each epoch")
    p.add_argument("--config", help="JSON config; every field optional")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="default 50")
    p.add_argument("--batch-size", type=int, help="default 16")
    p.add_argument("--lr", type=float, help="default 1e-3")
    p.add_argument("--norm", choices=["z", "none"], help="per-dimension normalisation (default z)")
    p.add_argument("--gnn-direction", choices=["in", "out", "sym"], help="default in")
    p.add_argument("--weighted-aggregation", action="store_true", default=None,
                   help="weight neighbour sums by causal scores")
    _add_causal_flags(p)
    _add_data_flags(p)

    p = sub.add_parser("eval", help="accuracy of a saved model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--confusion", help="write the confusion matrix as CSV here")
    _add_data_flags(p)

    p = sub.add_parser("graph", help="export one sample's causal graph")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="dataset file")
    src.add_argument("--from-json", help="re-export a JSON graph written by this command")
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--format", choices=["dot", "json"], default="dot")
    p.add_argument("--out", required=True)
    _add_causal_flags(p)
    _add_data_flags(p)

    p = sub.add_parser("explain", help="saliency map (D rows x L columns CSV) for one sample")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--method", choices=["gradient", "gradient-x-input"], default="gradient")
    p.add_argument("--out", required=True)
    _add_data_flags(p)

    p = sub.add_parser("synth", help="write a synthetic planted-structure dataset as .ts")
    p.add_argument("--config", help="SynthConfig JSON (default: the 4-class planted benchmark)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


# ---------------------------------------------------------------------------
# config resolution


def _section(d: dict, key: str) -> dict:
    value = d.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(f"config section {key!r} must be an object")
    return dict(value)


def resolve_config(args, n_dims: int) -> dict:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(raw) - {"data", "encoder", "gin", "causal", "train"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")

    data = {**DATA_DEFAULTS, **_section(raw, "data")}
    for key, flag in (("norm", "norm"), ("missing", "missing"), ("length_policy", "length_policy")):
        if getattr(args, flag, None) is not None:
            data[key] = getattr(args, flag)
    if data["norm"] not in ("z", "none"):
        raise ConfigError(f"unknown normalisation {data['norm']!r}")

    causal_d = _section(raw, "causal")
    for key, flag in (("n_bins", "bins"), ("bin_strategy", "bin_strategy"), ("k", "k"), ("l", "l"),
                      ("threshold", "threshold"), ("scope", "graph_scope")):
        if getattr(args, flag, None) is not None:
            causal_d[key] = getattr(args, flag)

    gin_d = _section(raw, "gin")
    if getattr(args, "gnn_direction", None) is not None:
        gin_d["direction"] = args.gnn_direction
    if getattr(args, "weighted_aggregation", None):
        gin_d["weighted"] = True

    train_d = _section(raw, "train")
    for key, flag in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr"), ("seed", "seed")):
        if getattr(args, flag, None) is not None:
            train_d[key] = getattr(args, flag)

    try:
        enc = EncoderConfig(**_section(raw, "encoder")).resolved(n_dims)
        gin_d.setdefault("node_dim", enc.node_dim)
        gin = GinConfig(**gin_d)
        gin.validate()
        cc = CausalConfig(**causal_d)
        tc = mdl.TrainConfig(**train_d, causal=cc)
        tc.validate()
    except TypeError as exc:
        raise ConfigError(f"invalid config field: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return {
        "data": data,
        "encoder": enc.to_dict(),
        "gin": gin.to_dict(),
        "causal": cc.to_dict(),
        "train": tc.to_dict(),
    }


def _causal_from_args(args) -> CausalConfig:
    d = CausalConfig().to_dict()
    for key, flag in (("n_bins", "bins"), ("bin_strategy", "bin_strategy"), ("k", "k"), ("l", "l"),
                      ("threshold", "threshold"), ("scope", "graph_scope")):
        if getattr(args, flag, None) is not None:
            d[key] = getattr(args, flag)
    try:
        return CausalConfig(**d)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _load(path, **kwargs):
    if not Path(path).exists():
        raise ConfigError(f"no such file: {path}")
    return load_dataset(path, **kwargs)


def _data_kwargs(args, class_names=None) -> dict:
    kw = {}
    if class_names is not None:
        kw["class_names"] = class_names
    if not str(getattr(args, "data", "") or "").lower().endswith(".csv"):
        kw["missing"] = args.missing or DATA_DEFAULTS["missing"]
        kw["length_policy"] = args.length_policy or DATA_DEFAULTS["length_policy"]
    return kw


def _prepare_for_model(model: mdl.CaLoNetModel, dataset):
    if dataset.n_dims != model.config.n_dims:
        raise ConfigError(f"dataset has {dataset.n_dims} dimensions, model expects {model.config.n_dims}")
    dataset = conform(dataset, model.config.length)
    if model.normalization is not None:
        dataset = model.normalization.apply(dataset)
    return dataset


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    ts_kwargs = lambda p: {} if str(p).lower().endswith(".csv") else {  # noqa: E731
        "missing": args.missing or DATA_DEFAULTS["missing"],
        "length_policy": args.length_policy or DATA_DEFAULTS["length_policy"]}
    train_set = _load(args.train, **ts_kwargs(args.train))
    resolved = resolve_config(args, train_set.n_dims)
    data = resolved["data"]
    if data["missing"] != (args.missing or DATA_DEFAULTS["missing"]) or \
            data["length_policy"] != (args.length_policy or DATA_DEFAULTS["length_policy"]):
        train_set = _load(args.train, missing=data["missing"], length_policy=data["length_policy"])
    test_set = None
    if args.test:
        kw = {"class_names": train_set.class_names}
        if not args.test.lower().endswith(".csv"):
            kw.update(missing=data["missing"], length_policy=data["length_policy"])
        test_set = _load(args.test, **kw)
        if test_set.n_dims != train_set.n_dims:
            raise ConfigError(f"test set has {test_set.n_dims} dimensions, train has {train_set.n_dims}")
        test_set = conform(test_set, train_set.length)

    stats = None
    if data["norm"] == "z":
        from .dataset import fit_normalization
        stats = fit_normalization(train_set)
        train_set = stats.apply(train_set)
        if test_set is not None:
            test_set = stats.apply(test_set)

    causal_cfg = CausalConfig(**resolved["causal"])
    tc = mdl.TrainConfig(**resolved["train"], causal=causal_cfg)
    enc = EncoderConfig(**resolved["encoder"])
    gin = GinConfig(**resolved["gin"])
    try:
        model, report = mdl.train(train_set, test_set, tc, enc, gin)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    model.normalization = stats

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mdl.save(model, out / "model.json")
    (out / "report.csv").write_text(report.to_csv())
    (out / "config.resolved.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    final = report.test_acc[-1] if test_set is not None else report.train_acc[-1]
    print(f"accuracy={final!r}")
    return 0


def _load_model(path):
    if not Path(path).exists():
        raise ConfigError(f"no such file: {path}")
    return mdl.load(path)


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    dataset = _prepare_for_model(model, _load(args.data, **_data_kwargs(args, model.config.class_names)))
    acc, cm = mdl.evaluate(model, dataset)
    if args.confusion:
        np.savetxt(args.confusion, cm, fmt="%d", delimiter=",")
    print(f"accuracy={acc!r}")
    return 0


def cmd_graph(args) -> int:
    if args.from_json:
        try:
            matrix = causal.parse_json(Path(args.from_json).read_text())
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read graph {args.from_json}: {exc}") from exc
    else:
        dataset = _load(args.data, **_data_kwargs(args))
        if not 0 <= args.sample < len(dataset):
            raise ConfigError(f"sample index {args.sample} out of range (dataset has {len(dataset)} samples)")
        cc = _causal_from_args(args)
        matrix = causal.build_causal_matrix(dataset[args.sample], cc.threshold, cc.order, cc.binning)
    graph = causal.to_graph(matrix)
    Path(args.out).write_text(causal.export(matrix, args.format))
    print(f"nodes={graph.n}")
    print(f"edges={len(graph.edges)}")
    return 0


def cmd_explain(args) -> int:
    model = _load_model(args.model)
    dataset = _prepare_for_model(model, _load(args.data, **_data_kwargs(args, model.config.class_names)))
    if not 0 <= args.sample < len(dataset):
        raise ConfigError(f"sample index {args.sample} out of range (dataset has {len(dataset)} samples)")
    sal = mdl.saliency(model, dataset[args.sample], method=args.method)
    np.savetxt(args.out, sal, fmt="%.10g", delimiter=",")
    print(f"rows={sal.shape[0]}")
    print(f"cols={sal.shape[1]}")
    return 0


def cmd_synth(args) -> int:
    if args.config:
        try:
            cfg = SynthConfig.from_dict(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"cannot read synth config {args.config}: {exc}") from exc
    else:
        cfg = planted_benchmark_config()
    dataset = synth_causal(cfg, args.seed)
    Path(args.out).write_text(to_ts(dataset))
    print(f"samples={len(dataset)}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "graph": cmd_graph, "explain": cmd_explain, "synth": cmd_synth}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except (ParseError, ConfigError, mdl.CorruptModelError, mdl.ModelVersionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
