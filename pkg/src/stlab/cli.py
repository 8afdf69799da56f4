"""Command-line pipeline: gen -> split -> sft -> grpo -> eval -> report.

Every command reads one YAML config (``--config``), applies command-line
overrides on top, and writes into ``--out``:

    <out>/data/            gen      items.jsonl, routes.jsonl, manifest.json
    <out>/split/{train,test}/  split
    <out>/sft/             sft      model.ckpt, curve.csv
    <out>/grpo/            grpo     model.ckpt, curve.csv
    <out>/eval/<label>/    eval     predictions.jsonl, report.json
    <out>/report.csv       report

Each output directory also gets ``config.yaml`` (the effective config) and
``run.json`` (command, seed, config hash and input file hashes). Outputs
carry no timestamps, so reruns with the same inputs are byte-identical.

Exit codes: 0 ok, 1 usage, 2 config, 3 data, 4 numeric.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import evalsuite as ev
from .gradcheck import run_gradcheck
from .routeworld import RouteError, dump_routes, load_routes, reverse_route
from .seqmodel import CheckpointError, VocabError, load_checkpoint, new_params, save_checkpoint
from .taskgen import (
    Dataset, DatasetError, GenConfig, Ratio, SceneKind, SceneOOD, attach_cot, build_dataset, config_hash, split,
)
from .trainer_grpo import GRPOConfig, GRPOError, NonFiniteError, train_grpo
from .trainer_sft import SFTConfig, TrainingError, build_cot_examples, train_sft

log = logging.getLogger("stlab")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration

def _section(cls) -> dict[str, Any]:
    return {f.name: _plain(getattr(cls(), f.name)) for f in dataclasses.fields(cls)}


def _plain(v: Any) -> Any:
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, SceneKind):
        return v.value
    return v


def default_config() -> dict[str, Any]:
    return {
        "seed": 0,
        "n_routes": 840,
        "gen": GenConfig().to_json(),
        "split": {
            "mode": "ratio",
            "ratio": [1, 6],
            "train_scenes": ["IndoorSingle", "IndoorMulti"],
            "test_scenes": ["Outdoor"],
            "n_train": 630,
            "mcq_only": True,
        },
        "model": {"d_model": 32, "hidden": 64},
        "sft": {**_section(SFTConfig), "with_cot": True},
        "grpo": _section(GRPOConfig),
        "eval": {"max_len": 160},
        "gradcheck": {"cases": 20, "step": 1e-5, "tol": 1e-4},
    }


def _coerce(default: Any, value: Any, where: str) -> Any:
    """Match ``value`` to the type of ``default`` (YAML reads ``1e-3`` as a string)."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where!r} must be true or false, got {value!r}")
        return value
    if isinstance(default, (int, float)) and not isinstance(value, bool):
        try:
            num = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where!r} must be a number, got {value!r}") from None
        if isinstance(default, int):
            if num != int(num):
                raise ConfigError(f"{where!r} must be an integer, got {value!r}")
            return int(num)
        return num
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where!r} must be a string, got {value!r}")
    return value


def merge(base: dict, override: dict, path: str = "") -> dict:
    """Recursive merge; keys absent from ``base`` are config errors."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[k] = merge(out[k], v, where + ".")
        elif out[k] is None:
            out[k] = v
        else:
            out[k] = _coerce(out[k], v, where)
    return out


def parse_set(expr: str) -> dict:
    """``a.b=value`` -> ``{"a": {"b": value}}`` with the value parsed as YAML."""
    if "=" not in expr:
        raise UsageError(f"--set expects KEY=VALUE, got {expr!r}")
    key, raw = expr.split("=", 1)
    value = yaml.safe_load(raw)
    tree: dict = value
    for part in reversed(key.strip().split(".")):
        tree = {part: tree}
    return tree


def _build(cls, section: dict, drop: Sequence[str] = ()):
    kwargs = {k: v for k, v in section.items() if k not in drop}
    for f in dataclasses.fields(cls):
        if isinstance(f.default, tuple) and f.name in kwargs:
            kwargs[f.name] = tuple(kwargs[f.name])
    try:
        obj = cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None
    if hasattr(obj, "check"):
        try:
            obj.check()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
    return obj


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Validated view of the config tree."""
    tree: dict
    out: Path

    @property
    def seed(self) -> int:
        return int(self.tree["seed"])

    @property
    def hash(self) -> str:
        return config_hash(self.tree)

    def gen(self) -> GenConfig:
        try:
            cfg = GenConfig.from_json(self.tree["gen"])
            for scene in cfg.scenes:
                cfg.route_config(scene).check()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"gen: {exc}") from None
        return cfg

    def sft(self) -> SFTConfig:
        return _build(SFTConfig, self.tree["sft"], drop=("with_cot",))

    def grpo(self) -> GRPOConfig:
        return _build(GRPOConfig, self.tree["grpo"])

    def split_mode(self) -> Ratio | SceneOOD:
        s = self.tree["split"]
        try:
            if s["mode"] == "ratio":
                a, b = s["ratio"]
                return Ratio(int(a), int(b))
            if s["mode"] == "ood":
                return SceneOOD(frozenset(SceneKind(x) for x in s["train_scenes"]),
                                frozenset(SceneKind(x) for x in s["test_scenes"]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"split: {exc}") from None
        raise ConfigError(f"split.mode must be 'ratio' or 'ood', got {s['mode']!r}")

    def check(self) -> None:
        if not isinstance(self.tree["seed"], int) or self.tree["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        if not isinstance(self.tree["n_routes"], int) or self.tree["n_routes"] < 1:
            raise ConfigError("n_routes must be a positive integer")
        m = self.tree["model"]
        if min(int(m["d_model"]), int(m["hidden"])) < 1:
            raise ConfigError("model sizes must be positive")
        self.gen()
        self.sft()
        self.grpo()
        self.split_mode()


def load_config(path: str | None, overrides: Sequence[dict]) -> dict:
    tree = default_config()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            doc = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        tree = merge(tree, doc)
    for o in overrides:
        tree = merge(tree, o)
    return tree


# ---------------------------------------------------------------------------
# manifests

def file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_files(directory: Path, command: str, rc: RunConfig, inputs: Sequence[Path] = (),
                    extra: dict | None = None) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "config.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(rc.tree, fh, sort_keys=True)
    run = {
        "command": command,
        "seed": rc.seed,
        "config_hash": rc.hash,
        "inputs": {str(p): file_hash(p) for p in inputs},
    }
    run.update(extra or {})
    with open(directory / "run.json", "w", encoding="utf-8") as fh:
        json.dump(run, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _dataset_files(d: Path) -> list[Path]:
    return [p for p in (d / "items.jsonl", d / "routes.jsonl") if p.exists()]


# ---------------------------------------------------------------------------
# commands

def cmd_gen(rc: RunConfig, args) -> int:
    ds = build_dataset(rc.gen(), int(rc.tree["n_routes"]), rc.seed)
    out = rc.out / "data"
    ds.save(out)
    write_run_files(out, "gen", rc, extra={"n_items": len(ds)})
    print(f"wrote {len(ds)} items over {len(ds.routes)} routes to {out}")
    return EXIT_OK


def cmd_split(rc: RunConfig, args) -> int:
    src = Path(args.data) if args.data else rc.out / "data"
    ds = Dataset.load(_require(src, "dataset") )
    train, test = split(ds, rc.split_mode(), np.random.default_rng(rc.seed))
    train = attach_cot(train)
    s = rc.tree["split"]
    if s["mcq_only"]:
        train = train.subset([it for it in train.items if it.kind.is_mcq], split=train.manifest.get("split"),
                             side="train")
    n_train = int(s["n_train"])
    if n_train:
        if len(train) < n_train:
            raise DatasetError(f"train side has {len(train)} items, need n_train={n_train}")
        train = train.subset(train.items[:n_train], split=train.manifest.get("split"), side="train")
    out = rc.out / "split"
    for name, part in (("train", train), ("test", test)):
        part.save(out / name)
    write_run_files(out, "split", rc, inputs=_dataset_files(src),
                    extra={"n_train": len(train), "n_test": len(test)})
    print(f"train {len(train)} items, test {len(test)} items -> {out}")
    return EXIT_OK


def _load_split(rc: RunConfig, args, side: str) -> tuple[Dataset, Path]:
    d = Path(args.data) if getattr(args, "data", None) else rc.out / "split" / side
    return Dataset.load(_require(d, f"{side} split")), d


def cmd_sft(rc: RunConfig, args) -> int:
    train, src = _load_split(rc, args, "train")
    cfg = rc.sft()
    m = rc.tree["model"]
    examples = build_cot_examples(train, with_cot=bool(rc.tree["sft"]["with_cot"]))
    params = new_params(rc.seed, d_model=int(m["d_model"]), hidden=int(m["hidden"]))
    out = rc.out / "sft"
    out.mkdir(parents=True, exist_ok=True)
    _, curve = train_sft(params, examples, dataclasses.replace(cfg, seed=rc.seed),
                         curve_path=out / "curve.csv", checkpoint_path=out / "model.ckpt")
    write_run_files(out, "sft", rc, inputs=_dataset_files(src),
                    extra={"steps": len(curve), "final_loss": curve[-1][2] if curve else None})
    print(f"sft: {len(curve)} steps, final loss {curve[-1][2]:.4f} -> {out / 'model.ckpt'}" if curve
          else f"sft: no steps -> {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_grpo(rc: RunConfig, args) -> int:
    train, src = _load_split(rc, args, "train")
    init_path = _require(Path(args.init) if args.init else rc.out / "sft" / "model.ckpt", "initial checkpoint")
    params, _ = load_checkpoint(init_path)
    ref = load_checkpoint(_require(Path(args.ref), "reference checkpoint"))[0] if args.ref else None
    cfg = dataclasses.replace(rc.grpo(), seed=rc.seed)
    out = rc.out / "grpo"
    out.mkdir(parents=True, exist_ok=True)
    _, hist = train_grpo(params, train.items, cfg, ref_params=ref, routes=train.routes,
                         curve_path=out / "curve.csv", checkpoint_path=out / "model.ckpt")
    inputs = _dataset_files(src) + [init_path] + ([Path(args.ref)] if args.ref else [])
    tail = [s.mean_reward for s in hist[-100:]]
    write_run_files(out, "grpo", rc, inputs=inputs,
                    extra={"steps": len(hist), "final_mean_reward": float(np.mean(tail)) if tail else None})
    print(f"grpo: {len(hist)} steps, mean reward (last {len(tail)}) "
          f"{np.mean(tail) if tail else float('nan'):.3f} -> {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(rc: RunConfig, args) -> int:
    test, src = _load_split(rc, args, "test")
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
    else:
        ckpt = rc.out / "grpo" / "model.ckpt"
        if not ckpt.exists():
            ckpt = rc.out / "sft" / "model.ckpt"
    params, _ = load_checkpoint(_require(ckpt, "checkpoint"))
    label = args.label or ckpt.parent.name
    out = rc.out / "eval" / label
    out.mkdir(parents=True, exist_ok=True)
    preds = ev.generate_predictions(params, test.items, int(rc.tree["eval"]["max_len"]))
    ev.dump_predictions(preds, out / "predictions.jsonl")
    rep = ev.report(ev.evaluate(preds, test), label)
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(rep.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_run_files(out, "eval", rc, inputs=_dataset_files(src) + [ckpt])
    sys.stdout.write(ev.reports_to_csv([rep]))
    return EXIT_OK


def _report_from_json(d: dict) -> ev.EvalReport:
    by_name = {ev.family_name(f): f for f in ev.FAMILIES}
    scores = {by_name[k]: v for k, v in d["scores"].items()}
    return ev.EvalReport(d["checkpoint"], scores, d["avg_st"], d["avg_total"], d["flags"])


def cmd_report(rc: RunConfig, args) -> int:
    paths = [Path(p) for p in args.reports] if args.reports else sorted((rc.out / "eval").glob("*/report.json"))
    if not paths:
        raise FileNotFoundError(f"no report.json files under {rc.out / 'eval'}")
    reports = [_report_from_json(json.loads(_require(p, "report").read_text(encoding="utf-8"))) for p in paths]
    text = ev.reports_to_csv(reports)
    rc.out.mkdir(parents=True, exist_ok=True)
    (rc.out / "report.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(rc: RunConfig, args) -> int:
    g = rc.tree["gradcheck"]
    results = run_gradcheck(int(g["cases"]), rc.seed, float(g["step"]))
    worst: dict[str, float] = {}
    for r in results:
        worst[r.target] = max(worst.get(r.target, 0.0), r.rel_error)
    for target, err in worst.items():
        print(f"{target:14s} max relative error {err:.3e}")
    overall = max(worst.values())
    print(f"max relative error {overall:.3e} (tol {float(g['tol']):.0e})")
    return EXIT_OK if overall <= float(g["tol"]) else EXIT_NUMERIC


def cmd_reverse(rc: RunConfig, args) -> int:
    routes = load_routes(_require(Path(args.routes), "route file"))
    reversed_ = [reverse_route(r) for r in routes]
    if args.output:
        dump_routes(reversed_, args.output)
    else:
        for r in reversed_:
            sys.stdout.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "split": cmd_split,
    "sft": cmd_sft,
    "grpo": cmd_grpo,
    "eval": cmd_eval,
    "report": cmd_report,
    "gradcheck": cmd_gradcheck,
    "reverse": cmd_reverse,
}


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML config file; flags override its values")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--out", default="runs/default", help="output directory (default: %(default)s)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set grpo.beta=0.05 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="stlab", description="Route-reversal QA: data generation, SFT, GRPO and evaluation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen", parents=[common], help="generate routes and QA items")
    s.add_argument("--n-routes", type=int, help="number of routes (config: n_routes)")

    s = sub.add_parser("split", parents=[common], help="split a dataset into train/test")
    s.add_argument("--data", help="dataset directory (default: <out>/data)")
    s.add_argument("--mode", choices=["ratio", "ood"], help="config: split.mode")
    s.add_argument("--n-train", type=int, help="truncate the train side (0 keeps all; config: split.n_train)")

    s = sub.add_parser("sft", parents=[common], help="supervised fine-tuning from random init")
    s.add_argument("--data", help="training split directory (default: <out>/split/train)")
    s.add_argument("--epochs", type=int, help="config: sft.epochs")
    s.add_argument("--lr", type=float, help="config: sft.lr")
    s.add_argument("--no-cot", action="store_true", help="answer-only targets (config: sft.with_cot=false)")

    s = sub.add_parser("grpo", parents=[common], help="GRPO from a checkpoint")
    s.add_argument("--data", help="training split directory (default: <out>/split/train)")
    s.add_argument("--init", help="initial checkpoint (default: <out>/sft/model.ckpt)")
    s.add_argument("--ref", help="reference checkpoint for the KL term (default: the initial checkpoint)")
    s.add_argument("--steps", type=int, help="config: grpo.steps")
    s.add_argument("--lr", type=float, help="config: grpo.lr")
    s.add_argument("--beta", type=float, help="config: grpo.beta")

    s = sub.add_parser("eval", parents=[common], help="greedy predictions and scores on the test split")
    s.add_argument("--data", help="test split directory (default: <out>/split/test)")
    s.add_argument("--checkpoint", help="checkpoint to evaluate (default: grpo, else sft)")
    s.add_argument("--label", help="row label (default: checkpoint directory name)")

    s = sub.add_parser("report", parents=[common], help="collect eval reports into one CSV table")
    s.add_argument("reports", nargs="*", help="report.json files (default: <out>/eval/*/report.json)")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    s.add_argument("--cases", type=int, help="config: gradcheck.cases")

    s = sub.add_parser("reverse", parents=[common], help="reverse every route in a routes JSONL file")
    s.add_argument("routes", help="routes JSONL file")
    s.add_argument("-o", "--output", help="write here instead of stdout")
    return p


def flag_overrides(args) -> list[dict]:
    """Named flags, then --set expressions (applied in order, later wins)."""
    named: dict[str, Any] = {}

    def put(path: str, value: Any) -> None:
        if value is None:
            return
        node = named
        *head, last = path.split(".")
        for k in head:
            node = node.setdefault(k, {})
        node[last] = value

    put("seed", args.seed)
    cmd = args.command
    if cmd == "gen":
        put("n_routes", args.n_routes)
    elif cmd == "split":
        put("split.mode", args.mode)
        put("split.n_train", args.n_train)
    elif cmd == "sft":
        put("sft.epochs", args.epochs)
        put("sft.lr", args.lr)
        if args.no_cot:
            put("sft.with_cot", False)
    elif cmd == "grpo":
        put("grpo.steps", args.steps)
        put("grpo.lr", args.lr)
        put("grpo.beta", args.beta)
    elif cmd == "gradcheck":
        put("gradcheck.cases", args.cases)
    return [named] + [parse_set(e) for e in args.set]


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        tree = load_config(args.config, flag_overrides(args))
        rc = RunConfig(tree, Path(args.out))
        rc.check()
        return COMMANDS[args.command](rc, args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, DatasetError, CheckpointError, VocabError, RouteError, ev.EvalError,
            json.JSONDecodeError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, NonFiniteError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GRPOError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
