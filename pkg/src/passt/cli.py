"""Command-line entry point.

Every command reads an optional JSON config, applies ``--set key=value``
overrides (dotted keys reach nested tables), writes its results into a fresh
output directory and records a ``run_manifest.json`` there with content
hashes of all inputs and outputs.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import evaluation, flowgen, knode, loop, netcore, planner
from .errors import ConfigError, DegenerateData, DivergedError, FormatError, GapError, ShapeError
from .grid import GridSpec, read_flowpack, write_flowpack
from .reconstruct import GpConfig

log = logging.getLogger("passt")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
MANIFEST_NAME = "run_manifest.json"


# ---------------------------------------------------------------------------
# hashing and manifests


def content_hash(path) -> str:
    """sha256 over a file, or over every file of a directory (sorted relative paths plus bytes)."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_file():
        h.update(path.read_bytes())
        return h.hexdigest()
    if not path.is_dir():
        raise FileNotFoundError(f"no such file or directory: {path}")
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        rel = f.relative_to(path).as_posix()
        if rel == MANIFEST_NAME:
            continue
        h.update(rel.encode() + b"\0")
        h.update(f.read_bytes())
        h.update(b"\0")
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    config: dict
    seeds: dict
    inputs: dict = field(default_factory=dict)  # path -> sha256
    outputs: dict = field(default_factory=dict)  # path relative to the run dir -> sha256
    started: str = ""
    finished: str = ""
    version: int = 1

    def write(self, run_dir) -> Path:
        path = Path(run_dir) / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, run_dir) -> "RunManifest":
        return cls(**json.loads((Path(run_dir) / MANIFEST_NAME).read_text()))

    def verify_inputs(self) -> bool:
        return all(content_hash(p) == h for p, h in self.inputs.items())


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# config handling


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides) -> dict:
    cfg = json.loads(json.dumps(cfg))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = cfg
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"override {key!r} descends into a non-table value")
            node = nxt
        node[parts[-1]] = _parse_value(text)
    return cfg


def resolve_seed(cfg: dict, cli_seed=None) -> int:
    """Explicit flag, then config ``seed``, then ``PASST_SEED``, then 0."""
    if cli_seed is not None:
        return int(cli_seed)
    if "seed" in cfg:
        return int(cfg["seed"])
    env = os.environ.get("PASST_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"PASST_SEED={env!r} is not an integer") from exc
    return 0


def _build(cls, cfg: dict, ignore=()):
    known = {f.name for f in fields(cls)}
    unknown = set(cfg) - known - set(ignore)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**{k: v for k, v in cfg.items() if k in known})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _tuple_fields(cfg: dict, names) -> dict:
    return {k: (tuple(v) if k in names and isinstance(v, list) else v) for k, v in cfg.items()}


def _grid_from(cfg) -> GridSpec:
    try:
        return GridSpec(int(cfg["n_rows"]), int(cfg["n_cols"]), float(cfg.get("cell_size", 1.0)),
                        tuple(cfg.get("origin", (0.0, 0.0))))
    except KeyError as exc:
        raise ConfigError(f"grid config needs {exc}") from exc


def _fresh_dir(path) -> Path:
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        raise ConfigError(f"output directory {path} is not empty; run directories are never overwritten")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _outputs(run_dir: Path, names) -> dict:
    return {n: content_hash(run_dir / n) for n in names}


def _require_input(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input {path} does not exist")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: dict, out: Path, seed: int) -> list[str]:
    cfg = dict(cfg)
    preset = cfg.pop("preset", "stationary")
    grid = cfg.pop("window", None)
    cfg.pop("seed", None)
    if preset not in ("stationary", "oscillating"):
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = _tuple_fields(cfg, {"street_origin"})
    if grid is not None:
        cfg["window"] = _grid_from(grid)
    make = flowgen.stationary_config if preset == "stationary" else flowgen.oscillating_config
    try:
        vcfg = make(seed=seed, **cfg)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    write_flowpack(flowgen.generate_vortex_street(vcfg), out / "flow")
    return ["flow"]


def cmd_ingest(cfg: dict, out: Path, files) -> list[str]:
    if not files:
        raise ConfigError("ingest needs at least one CSV file")
    spec = _grid_from(cfg.get("grid", cfg))
    series = flowgen.ingest_csv_currents([_require_input(f) for f in files], spec, cfg.get("source", "csv currents"))
    write_flowpack(series, out / "flow")
    return ["flow"]


def _architecture(name: str, n_rows: int, n_cols: int):
    if name == "reference":
        return netcore.reference_architecture(n_rows, n_cols)
    if name == "paper":
        return netcore.paper_architecture(n_rows, n_cols)
    if name == "small":
        return netcore.small_architecture(n_rows, n_cols)
    raise ConfigError(f"unknown architecture preset {name!r}")


def cmd_train_model(cfg: dict, out: Path, pack, seed: int) -> list[str]:
    series = read_flowpack(_require_input(pack))
    first, last = cfg.get("window", (200, 300))
    train_series = series.window(int(first), int(last))
    arch = _architecture(cfg.get("architecture", "reference"), series.spec.n_rows, series.spec.n_cols)
    tcfg = _build(knode.TrainConfig, {**cfg.get("train", {}), "rng_seed": seed})
    model, history = knode.train(train_series, arch, tcfg)
    knode.save_model(out / "model", model, history, tcfg)
    return ["model"]


def cmd_train_policy(cfg: dict, out: Path, seed: int) -> list[str]:
    body = {k: v for k, v in cfg.items() if k not in ("evaluate", "seed")}
    body = _tuple_fields(body, {"gmm_components", "grid_shape", "std_range", "scales"})
    pcfg = _build(planner.PolicyTrainConfig, {**body, "seed": seed})
    policy = planner.train_policy(pcfg)
    planner.save_policy(out / "policy.json", policy, pcfg)
    names = ["policy.json"]
    if cfg.get("evaluate", False):
        greedy, walk = planner.evaluate_policy(policy, horizon=pcfg.horizon, grid_shape=pcfg.grid_shape,
                                               seed=seed + 12345)
        with open(out / "policy_eval.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["greedy_J", "random_walk_J", "ratio"])
            w.writerow([repr(greedy), repr(walk), repr(greedy / walk if walk > 0 else float("inf"))])
        names.append("policy_eval.csv")
    return names


def cmd_eval(cfg: dict, out: Path, model_path, pack) -> list[str]:
    model, _ = knode.load_model(_require_input(model_path))
    series = read_flowpack(_require_input(pack))
    first, last = cfg.get("window", (300, 400))
    window = series.window(int(first), int(last))
    lookaheads = tuple(int(x) for x in cfg.get("lookaheads", evaluation.DEFAULT_LOOKAHEADS))
    report = evaluation.lookahead_eval(model, window, lookaheads, dataset=cfg.get("dataset", "test"))
    evaluation.write_lookahead_csv([report], out / "lookahead.csv")
    evaluation.write_pod_csv(evaluation.pod(window), out / "pod_truth.csv")
    return ["lookahead.csv", "pod_truth.csv"]


POD_MODES = 4


def _pod_cumulative(data: np.ndarray, k: int = POD_MODES) -> list[float]:
    try:
        spec = evaluation.pod(data)
    except DegenerateData:
        return [float("nan")] * k
    return [spec.energy_of_first(i) for i in range(1, k + 1)]


def cmd_run(cfg: dict, out: Path, model_path, policy_path, pack, seed: int) -> list[str]:
    model, _ = knode.load_model(_require_input(model_path))
    policy = planner.load_policy(_require_input(policy_path))
    series = read_flowpack(_require_input(pack))
    if model.arch.input_shape != (series.spec.n_rows, series.spec.n_cols, 2):
        raise ShapeError("model grid does not match the flow pack grid")
    cfg = dict(cfg)
    n_trials = int(cfg.pop("n_trials", 30))
    truth_start = int(cfg.pop("truth_start", 100))
    pod_first, pod_last = cfg.pop("pod_steps", (250, 299))
    cfg.pop("seed", None)
    loop_dict = dict(cfg.pop("loop", {}))
    if cfg:
        raise ConfigError(f"unknown run keys: {sorted(cfg)}")
    if n_trials < 1:
        raise ConfigError("n_trials must be at least 1")
    if isinstance(loop_dict.get("gp"), dict):
        loop_dict["gp"] = _build(GpConfig, loop_dict["gp"])
    if loop_dict.get("start_cell") is not None:
        loop_dict["start_cell"] = tuple(loop_dict["start_cell"])
    base_cfg = _build(loop.LoopConfig, loop_dict)
    T = base_cfg.total_steps
    truth = series.window(truth_start, truth_start + T)
    pod_first, pod_last = int(pod_first), int(pod_last)
    if not 0 <= pod_first < pod_last <= T:
        raise ConfigError("pod_steps must lie within the run")

    baseline = loop.run_baseline(model, truth, T)
    baseline.write(out / "baseline", truth.spec)
    pod_truth = _pod_cumulative(truth.data[pod_first : pod_last + 1])
    pod_base = _pod_cumulative(baseline.estimates[pod_first : pod_last + 1])
    names = ["baseline"]
    rows = []
    for k in range(n_trials):
        trial_cfg = loop.LoopConfig.from_dict({**base_cfg.to_dict(), "seed": seed + k})
        trace = loop.run_passt(model, truth, policy, trial_cfg)
        name = f"trial_{k:03d}"
        trace.write(out / name, truth.spec)
        names.append(name)
        rows.append([k, seed + k, repr(trace.mean_rmse(100 if T >= 100 else 0, T)), repr(baseline.mean_rmse(
            100 if T >= 100 else 0, T))] + [repr(v) for v in _pod_cumulative(trace.estimates[pod_first : pod_last + 1])]
            + [repr(v) for v in pod_truth] + [repr(v) for v in pod_base])
    head = ["trial", "seed", "passt_mean_rmse", "baseline_mean_rmse"]
    for tag in ("passt", "truth", "baseline"):
        head += [f"{tag}_pod_energy_{i}" for i in range(1, POD_MODES + 1)]
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(head)
        w.writerows(rows)
    return names + ["summary.csv"]


def _read_trace_rmse(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([float(r["rmse_vs_truth"]) for r in csv.DictReader(fh)])


def cmd_export_plots(run_dir, out: Path, pod_steps=None) -> list[str]:
    """Tidy CSVs behind the RMSE, POD and lookahead plots of a finished run directory."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"{run_dir} is not a directory")
    trials = sorted(p for p in run_dir.glob("trial_*") if (p / "trace.csv").is_file())
    lookahead_files = sorted(run_dir.rglob("lookahead.csv"))
    if not trials and not lookahead_files:
        raise FileNotFoundError(f"{run_dir} holds no traces or lookahead reports")
    names = []
    if trials:
        curves = np.stack([_read_trace_rmse(p / "trace.csv") for p in trials])
        base = run_dir / "baseline" / "trace.csv"
        base_curve = _read_trace_rmse(base) if base.is_file() else None
        std = curves.std(axis=0, ddof=1) if len(trials) > 1 else np.zeros(curves.shape[1])
        with open(out / "rmse_vs_step.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "mean_rmse", "std_rmse", "n_trials", "baseline_rmse"])
            for t in range(curves.shape[1]):
                b = repr(float(base_curve[t])) if base_curve is not None else ""
                w.writerow([t, repr(float(curves[:, t].mean())), repr(float(std[t])), len(trials), b])
        names.append("rmse_vs_step.csv")

        first, last = pod_steps if pod_steps is not None else (max(0, curves.shape[1] - 51), curves.shape[1] - 2)
        with open(out / "pod_curves.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["source", "mode", "cumulative_energy"])
            sources = [(p.name, p / "estimates") for p in trials if (p / "estimates").is_dir()]
            if (run_dir / "baseline" / "estimates").is_dir():
                sources.append(("baseline", run_dir / "baseline" / "estimates"))
            for tag, pack in sources:
                data = read_flowpack(pack).data[first : last + 1]
                try:
                    cum = evaluation.pod(data).cumulative_energy
                except DegenerateData:
                    continue
                for i, v in enumerate(cum[:10], start=1):
                    w.writerow([tag, i, repr(float(v))])
        names.append("pod_curves.csv")

    if lookahead_files:
        with open(out / "lookahead_curves.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["report", "lookahead", "mse", "cosine_distance", "dataset"])
            for f in lookahead_files:
                with open(f, newline="") as src:
                    for r in csv.DictReader(src):
                        w.writerow([f.parent.relative_to(run_dir).as_posix() or ".", r["lookahead"], r["mse"],
                                    r["cosine_distance"], r["dataset"]])
        names.append("lookahead_curves.csv")
    return names


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="passt", description="Predictive adaptive sampling of gridded flow fields.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_seed=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry (dotted keys for nested tables)")
        sp.add_argument("--out", required=True, help="output run directory (must be new or empty)")
        if needs_seed:
            sp.add_argument("--seed", type=int, help="global seed (falls back to config, then PASST_SEED)")

    common(sub.add_parser("gen", help="generate a synthetic vortex street FlowPack"))
    sp = sub.add_parser("ingest", help="convert gridded current CSVs to a FlowPack")
    common(sp, needs_seed=False)
    sp.add_argument("files", nargs="+")
    sp = sub.add_parser("train-model", help="train the KNODE forecaster")
    common(sp)
    sp.add_argument("--pack", required=True)
    common(sub.add_parser("train-policy", help="train the sampling policy on random reward maps"))
    sp = sub.add_parser("eval", help="lookahead and POD reports")
    common(sp, needs_seed=False)
    sp.add_argument("--model", required=True)
    sp.add_argument("--pack", required=True)
    sp = sub.add_parser("run", help="closed-loop trials against the open-loop baseline")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--policy", required=True)
    sp.add_argument("--pack", required=True)
    sp.add_argument("--n-trials", type=int, help="overrides n_trials")
    sp = sub.add_parser("export-plots", help="tidy CSVs from a run directory")
    sp.add_argument("run_dir")
    sp.add_argument("--out", help="output directory (default: <run_dir>/plots)")
    return p


def _dispatch(args) -> int:
    if args.command == "export-plots":
        run_dir = Path(args.run_dir)
        if not run_dir.is_dir():
            raise FileNotFoundError(f"{run_dir} is not a directory")
        out = _fresh_dir(args.out or run_dir / "plots")
        started = _now()
        names = cmd_export_plots(run_dir, out)
        inputs = {str(run_dir): content_hash(run_dir)} if args.out else {}
        RunManifest("export-plots", None, {}, {}, inputs, _outputs(out, names), started, _now()).write(out)
        return EXIT_OK

    cfg = apply_overrides(load_config(args.config), args.set)
    seed = resolve_seed(cfg, getattr(args, "seed", None))
    out = _fresh_dir(args.out)
    started = _now()
    inputs: dict = {}

    def track(*paths):
        for p in paths:
            inputs[str(p)] = content_hash(_require_input(p))

    if args.config:
        track(args.config)
    if args.command == "gen":
        names = cmd_gen(cfg, out, seed)
    elif args.command == "ingest":
        track(*args.files)
        names = cmd_ingest(cfg, out, args.files)
    elif args.command == "train-model":
        track(args.pack)
        names = cmd_train_model(cfg, out, args.pack, seed)
    elif args.command == "train-policy":
        names = cmd_train_policy(cfg, out, seed)
    elif args.command == "eval":
        track(args.model, args.pack)
        names = cmd_eval(cfg, out, args.model, args.pack)
    elif args.command == "run":
        track(args.model, args.policy, args.pack)
        if args.n_trials is not None:
            cfg["n_trials"] = args.n_trials
        names = cmd_run(cfg, out, args.model, args.policy, args.pack, seed)
    else:  # pragma: no cover - argparse rejects unknown subcommands
        raise ConfigError(f"unknown command {args.command}")
    RunManifest(args.command, args.config, cfg, {"seed": seed}, inputs, _outputs(out, names), started,
                _now()).write(out)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, GapError, ShapeError, DegenerateData, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
