"""Command-line entry point: ``ldpfl {verify,run,sweep,shuffle-demo,report,config}``.

Experiments are described by an INI file (see ``ldpfl config``). Every run
directory receives a snapshot of the exact configuration, so re-running it
reproduces the metrics byte for byte.

Exit codes: 0 success, 1 verification failure, 2 usage or config error,
3 I/O error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import analysis, shuffling
from .adaptive_range import RangeMode, RangePolicy
from .datasets import IdxFormatError, load_mnist, make_blobs, train_test_split
from .fl_core import FederationConfig, RoundState, run_federated
from .mechanism import BudgetTooSmallError
from .model import Dataset, SgdConfig, init_weights

log = logging.getLogger("ldpfl")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
OUTPUT_ENV = "LDPFL_OUTPUT_DIR"

__all__ = ["main", "load_mnist", "ExperimentConfig", "parse_config", "format_config"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    source: str = "blobs"
    samples: int = 6000
    features: int = 20
    classes: int = 10
    separation: float = 4.0
    test_samples: int = 1000
    seed: int = 0
    path: str = ""
    subset: int = 0

    def __post_init__(self):
        if self.source not in ("blobs", "mnist"):
            raise ConfigError(f"data.source must be 'blobs' or 'mnist', got {self.source!r}")
        if self.source == "mnist" and not self.path:
            raise ConfigError("data.path is required for mnist")
        if self.source == "blobs" and not 0 < self.test_samples < self.samples:
            raise ConfigError("data.test_samples must lie in (0, samples)")


@dataclass(frozen=True)
class VerifyConfig:
    seed: int = 0
    samples: int = 1_000_000
    repetitions: int = 10_000
    training: bool = False
    workers: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    federation: FederationConfig = field(default_factory=FederationConfig)
    hidden: tuple[int, ...] = (32,)
    data: DataConfig = field(default_factory=DataConfig)
    output: str = "runs"
    verify: VerifyConfig = field(default_factory=VerifyConfig)


# INI schema: section -> key -> value type
_FED_KEYS = {"total_clients": int, "fraction": float, "selected": int, "rounds": int,
             "epsilon": float, "shuffle_window": float, "seed": int, "perturb": bool,
             "delays": bool}
_SGD_KEYS = {"learning_rate": float, "batch_size": int, "local_epochs": int}
_RANGE_KEYS = {"mode": str, "center": float, "radius": float, "radius_floor": float,
               "init_from_weights": bool}
_DATA_KEYS = {f.name: f.type for f in fields(DataConfig)}
_VERIFY_KEYS = {f.name: f.type for f in fields(VerifyConfig)}

SCHEMA = {
    "federation": _FED_KEYS,
    "sgd": _SGD_KEYS,
    "range": _RANGE_KEYS,
    "model": {"hidden": "ints"},
    "data": _DATA_KEYS,
    "output": {"directory": str},
    "verify": _VERIFY_KEYS,
}


def _convert(section: str, key: str, raw: str, kind):
    try:
        if kind in (bool, "bool"):
            v = raw.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "ints":
            return tuple(int(x) for x in raw.replace(",", " ").split())
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {getattr(kind, '__name__', kind)}") from None


def parse_config(text: str) -> ExperimentConfig:
    """Parse INI text; unknown sections or keys are errors."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    values: dict[str, dict] = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        values[section] = {}
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[section][key] = _convert(section, key, raw, SCHEMA[section][key])
    try:
        fed = dict(values.get("federation", {}))
        fed["sgd"] = SgdConfig(**values.get("sgd", {}))
        fed["range_policy"] = RangePolicy(**values.get("range", {}))
        return ExperimentConfig(
            federation=FederationConfig(**fed),
            hidden=values.get("model", {}).get("hidden", (32,)),
            data=DataConfig(**values.get("data", {})),
            output=values.get("output", {}).get("directory", "runs"),
            verify=VerifyConfig(**values.get("verify", {})),
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, RangeMode):
        return v.value
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def format_config(cfg: ExperimentConfig) -> str:
    """Serialize to INI; ``parse_config(format_config(c)) == c``."""
    fed, pol = cfg.federation, cfg.federation.range_policy
    sections = {
        "federation": {k: getattr(fed, k) for k in _FED_KEYS if getattr(fed, k) is not None},
        "sgd": {k: getattr(fed.sgd, k) for k in _SGD_KEYS},
        "range": {k: getattr(pol, k) for k in _RANGE_KEYS},
        "model": {"hidden": cfg.hidden},
        "data": {k: getattr(cfg.data, k) for k in _DATA_KEYS},
        "output": {"directory": cfg.output},
        "verify": {k: getattr(cfg.verify, k) for k in _VERIFY_KEYS},
    }
    out = io.StringIO()
    for name, kv in sections.items():
        out.write(f"[{name}]\n")
        for k, v in kv.items():
            out.write(f"{k} = {_fmt(v)}\n")
        out.write("\n")
    return out.getvalue()


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text)


def load_data(cfg: DataConfig) -> tuple[Dataset, Dataset]:
    if cfg.source == "mnist":
        train = load_mnist(cfg.path, cfg.subset or None, "train", cfg.seed)
        try:
            test = load_mnist(cfg.path, None, "test")
        except FileNotFoundError:
            train, test = train_test_split(train, max(1, len(train) // 6))
        return train, test
    blobs = make_blobs(cfg.samples, cfg.features, cfg.classes, np.random.default_rng(cfg.seed),
                       separation=cfg.separation)
    return train_test_split(blobs, cfg.test_samples)


def _metric_rows(history: list[RoundState], fed: FederationConfig, dimension: int):
    layers = len(history[0].ranges) if history else 0
    header = ["round", "accuracy", "clip_rate"]
    for i in range(layers):
        header += [f"center_{i}", f"radius_{i}"]
    header += ["epsilon", "budget_parameter_shuffle", "budget_no_shuffle"]
    yield header
    for st in history:
        if fed.perturb:
            eps = fed.epsilon
            spent = shuffling.budget_composition(eps, st.round, dimension, "parameter")
            naive = shuffling.budget_composition(eps, st.round, dimension, "none")
        else:
            eps = spent = naive = float("inf")
        row = [st.round, repr(st.metrics.accuracy), repr(st.metrics.clip_rate)]
        for rg in st.ranges:
            row += [repr(rg.center), repr(rg.radius)]
        yield row + [repr(eps), repr(spent), repr(naive)]


def write_run(directory: Path, cfg: ExperimentConfig, history: list[RoundState]):
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.ini").write_text(format_config(cfg))
    dim = history[-1].global_weights.dimension
    with open(directory / "metrics.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(_metric_rows(history, cfg.federation, dim))
    last = history[-1]
    arrays = {"round": np.array(last.round), "centers": last.ranges.centers,
              "radii": last.ranges.radii}
    for i, (w, b) in enumerate(last.global_weights.layers):
        arrays[f"W{i}"] = w
        arrays[f"b{i}"] = b
    np.savez(directory / "state.npz", **arrays)


def execute(cfg: ExperimentConfig) -> list[RoundState]:
    train, test = load_data(cfg.data)
    sizes = [train.features.shape[1], *cfg.hidden, train.num_classes]
    initial = init_weights(sizes, np.random.default_rng([cfg.federation.seed, 99]))
    return run_federated(cfg.federation, train, initial, test)


def _output_dir(args, cfg: ExperimentConfig) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ENV, cfg.output))


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    fed = cfg.federation
    if args.seed is not None:
        fed = replace(fed, seed=args.seed)
    if args.no_noise:
        fed = replace(fed, perturb=False, delays=False)
    cfg = replace(cfg, federation=fed)
    out = _output_dir(args, cfg)
    history = execute(cfg)
    write_run(out, cfg, history)
    acc = history[-1].metrics.accuracy
    print(f"wrote {out}: {len(history)} rounds, final accuracy {acc:.4f}")
    return EXIT_OK


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}") from None


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    out = _output_dir(args, cfg)
    for eps in _floats(args.epsilons):
        run_cfg = replace(cfg, federation=replace(cfg.federation, epsilon=eps))
        history = execute(run_cfg)
        write_run(out / f"eps_{eps:g}", run_cfg, history)
        print(f"eps={eps:g}: final accuracy {history[-1].metrics.accuracy:.4f}")
    if args.include_noise_free:
        run_cfg = replace(cfg, federation=replace(cfg.federation, perturb=False, delays=False))
        history = execute(run_cfg)
        write_run(out / "noise_free", run_cfg, history)
        print(f"noise-free: final accuracy {history[-1].metrics.accuracy:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    v = cfg.verify
    suite = analysis.SuiteConfig(seed=v.seed if args.seed is None else args.seed,
                                 samples=v.samples, repetitions=v.repetitions,
                                 training=v.training or args.training,
                                 workers=args.workers or v.workers)
    if args.quick:
        suite = replace(analysis.quick_suite(suite.seed), training=suite.training,
                        workers=suite.workers)
    mechanism = analysis.MUTANTS[args.mutate] if args.mutate else analysis.DEFAULT_MECHANISM
    reports = analysis.run_suite(suite, mechanism)
    out = _output_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = out / ("verify.jsonl" if not args.mutate else f"verify_{args.mutate}.jsonl")
    with open(path, "w") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")
    print(analysis.summary_table(reports))
    print(f"reports written to {path}")
    if not args.mutate:
        return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL
    # a mutation is caught by a check if at least one of its reports fails
    kinds: dict[str, bool] = {}
    for r in reports:
        kinds[r.name] = kinds.get(r.name, False) or not r.passed
    for name, caught in kinds.items():
        print(f"mutation {'caught' if caught else 'MISSED'} by {name}")
    return EXIT_OK if all(kinds.values()) else EXIT_FAIL


def cmd_shuffle_demo(args) -> int:
    rng = np.random.default_rng(args.seed)
    profiles = shuffling.random_profiles(args.clients, rng)
    config = shuffling.ShuffleConfig.for_profiles(profiles, args.window)
    print(f"T_S = {config.slowest:.4f}, T = {config.window:g}")
    batches = []
    for i, p in enumerate(profiles):
        values = np.round(rng.normal(0.0, 1.0, args.weights), 4)
        batch = shuffling.schedule(shuffling.split([values]), p, config, rng)
        batches.append(batch)
        print(f"client {i}: t_local={p.t_local:.3f} t_comm={p.t_comm:.3f} "
              f"wait={config.slowest - p.response:.3f} values={values.tolist()}")
    print("arrival stream:")
    for rep in shuffling.merge(batches):
        print(f"  t={rep.arrival:.4f}  id=({rep.id.layer},{rep.id.offset})  value={rep.value:+.4f}")
    print("collected:")
    for wid, vals in sorted(shuffling.collect(batches).items()):
        print(f"  ({wid.layer},{wid.offset}): {vals}  mean={np.mean(vals):+.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    with open(run / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        print(f"{run}: no rounds recorded")
        return EXIT_FAIL
    cfg = parse_config((run / "config.ini").read_text())
    acc = [float(r["accuracy"]) for r in rows]
    clip = [float(r["clip_rate"]) for r in rows]
    fed = cfg.federation
    print(f"run        {run}")
    print(f"seed       {fed.seed}")
    print(f"noise      {'on, epsilon=%g' % fed.epsilon if fed.perturb else 'off'}")
    print(f"ranges     {fed.range_policy.mode.value}")
    print(f"rounds     {len(rows)}")
    print(f"accuracy   final {acc[-1]:.4f}, best {max(acc):.4f} (round {int(np.argmax(acc)) + 1})")
    print(f"clip rate  mean {np.mean(clip):.4f}, final {clip[-1]:.4f}")
    radii = [k for k in rows[-1] if k.startswith("radius_")]
    print("final (c, r) " + " ".join(
        f"({float(rows[-1]['center_' + k[7:]]):.4g}, {float(rows[-1][k]):.4g})" for k in radii))
    return EXIT_OK


def cmd_config(args) -> int:
    cfg = load_config(args.config)
    sys.stdout.write(format_config(cfg))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ldpfl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="INI experiment file (defaults if omitted)")
        sp.add_argument("--out", help=f"output directory (else ${OUTPUT_ENV}, else [output])")
        return sp

    v = with_config(sub.add_parser("verify", help="run the statistical verification suite"))
    v.add_argument("--mutate", choices=sorted(analysis.MUTANTS),
                   help="run against a corrupted mechanism; succeeds iff every check catches it")
    v.add_argument("--quick", action="store_true", help="reduced sample counts")
    v.add_argument("--training", action="store_true", help="include the adaptive-range runs")
    v.add_argument("--seed", type=int)
    v.add_argument("--workers", type=int)
    v.set_defaults(func=cmd_verify)

    r = with_config(sub.add_parser("run", help="train one federated model"))
    r.add_argument("--no-noise", action="store_true", help="disable perturbation and delays")
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_run)

    s = with_config(sub.add_parser("sweep", help="one run per epsilon"))
    s.add_argument("--epsilons", default="0.1,0.5,1,5,10")
    s.add_argument("--include-noise-free", action="store_true")
    s.set_defaults(func=cmd_sweep)

    d = sub.add_parser("shuffle-demo", help="print a split-and-shuffle trace")
    d.add_argument("--clients", type=int, default=3)
    d.add_argument("--weights", type=int, default=4)
    d.add_argument("--window", type=float, default=1.0)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_shuffle_demo)

    rep = sub.add_parser("report", help="summarize a run directory")
    rep.add_argument("run_dir")
    rep.set_defaults(func=cmd_report)

    c = sub.add_parser("config", help="print the (default or given) configuration as INI")
    c.add_argument("--config")
    c.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, BudgetTooSmallError, shuffling.SchedulingError) as e:
        print(f"ldpfl: config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, IdxFormatError) as e:
        print(f"ldpfl: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
