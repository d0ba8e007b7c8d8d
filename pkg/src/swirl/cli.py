"""Command-line pipelines: simulate, fit, evaluate, segment.

Every command reads one TOML config (``--config``). Top-level keys:

    seed    base seed (default 0); the SWIRL_SEED environment variable wins
    output  output directory (default "swirl-out"); --output wins over both

Sections: ``[gridworld]``, ``[data]``, ``[fit]`` (with ``[fit.config]``),
``[evaluate]`` and ``[segment]``; see the README for every key. Unknown keys
anywhere are a config error.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import tomli

from .em import FitConfig, FitResult, NumericalError, fit, solve_policies
from .envs import (
    GridworldSpec,
    GroundTruth,
    TrajectoryFormatError,
    build_gridworld,
    dumps_trajectories,
    feasible_histories,
    gridworld_kernel,
    ingest_trajectories,
    perturb_trajectories,
    sample_trajectories,
    train_test_split,
)
from .evaluation import (
    SweepPoint,
    compare_models,
    comparison_csv,
    evaluate_fits,
    infer,
    sweep_csv,
    sweep_trend,
)
from .inference import map_segments
from .model import DiscreteHmMdp, InvalidStateError, ModelError, Spaces, check_trajectories

log = logging.getLogger("swirl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
ENV_FORMAT = "swirl-env/1"
SEGMENT_FORMAT = "swirl-segments/1"
DEFAULT_MODELS = [{"variant": "I", "L": 1, "Z": 2}, {"variant": "I", "L": 2, "Z": 2},
                  {"variant": "S", "L": 1, "Z": 2}, {"variant": "S", "L": 2, "Z": 2},
                  {"variant": "S", "L": 1, "Z": 1}]
DEFAULT_FRACTIONS = [0.0, 0.05, 0.1, 0.2, 0.3, 0.5]


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config parsing

GRID_EXTRA = {"num_trajectories": 200, "length": 500, "train_fraction": 0.8}
SECTION_KEYS = {
    "data": {"train", "test", "truth", "env"},
    "fit": {"models", "num_seeds", "keep_top", "config"},
    "evaluate": {"robustness", "fractions", "robustness_model", "perturb_seed"},
    "segment": {"fit", "data", "output"},
}
TOP_KEYS = {"seed", "output", "gridworld", *SECTION_KEYS}
FIT_FIXED = {"variant", "history_len", "num_modes", "seed"}


def _reject_unknown(found, allowed, where):
    extra = sorted(set(found) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(extra)}")


@dataclass
class Experiment:
    seed: int
    output: Path
    base_dir: Path
    raw: dict
    digest: str

    def section(self, name: str, required: bool = False) -> dict:
        if name not in self.raw:
            if required:
                raise ConfigError(f"missing [{name}] section")
            return {}
        return self.raw[name]

    def path(self, value) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def gridworld(self) -> tuple[GridworldSpec, dict] | None:
        if "gridworld" not in self.raw:
            return None
        sec = dict(self.raw["gridworld"])
        extra = {k: sec.pop(k, v) for k, v in GRID_EXTRA.items()}
        try:
            return GridworldSpec(**sec), extra
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[gridworld]: {exc}") from exc

    def fit_config(self) -> FitConfig:
        overrides = dict(self.section("fit").get("config", {}))
        if FIT_FIXED & set(overrides):
            raise ConfigError(f"[fit.config] may not set {sorted(FIT_FIXED & set(overrides))}; use [fit].models and seed")
        try:
            return FitConfig(**overrides)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[fit.config]: {exc}") from exc

    def models(self) -> list[FitConfig]:
        base = self.fit_config()
        out = []
        for entry in self.section("fit").get("models", DEFAULT_MODELS):
            if not isinstance(entry, dict):
                raise ConfigError("[fit].models entries must be tables like {variant='S', L=2, Z=2}")
            _reject_unknown(entry, {"variant", "L", "Z"}, "[fit].models entry")
            try:
                out.append(replace(base, variant=entry.get("variant", "S"), history_len=int(entry.get("L", 1)),
                                   num_modes=int(entry.get("Z", 2))))
            except ValueError as exc:
                raise ConfigError(f"[fit].models: {exc}") from exc
        return out


def load_config(path, output: str | None = None) -> Experiment:
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = tomli.loads(text.decode("utf-8"))
    except (tomli.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    _reject_unknown(raw, TOP_KEYS, "top level")
    for name, allowed in SECTION_KEYS.items():
        if name in raw:
            if not isinstance(raw[name], dict):
                raise ConfigError(f"[{name}] must be a table")
            _reject_unknown(raw[name], allowed, f"[{name}]")
    if "gridworld" in raw:
        spec_keys = {f.name for f in fields(GridworldSpec)} | set(GRID_EXTRA)
        _reject_unknown(raw["gridworld"], spec_keys, "[gridworld]")
    if "config" in raw.get("fit", {}):
        _reject_unknown(raw["fit"]["config"], {f.name for f in fields(FitConfig)}, "[fit.config]")

    seed = raw.get("seed", 0)
    env_seed = os.environ.get("SWIRL_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"SWIRL_SEED must be an integer, got {env_seed!r}") from exc
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    out = Path(output) if output else Path(raw.get("output", "swirl-out"))
    base_dir = path.resolve().parent
    if not out.is_absolute():
        out = (Path.cwd() if output else base_dir) / out
    return Experiment(seed, out, base_dir, raw, hashlib.sha256(text).hexdigest())


# ---------------------------------------------------------------------------
# inputs and outputs


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        # write then rename, so a killed run never leaves a truncated file behind
        tmp = path.with_name(path.name + ".part")
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
    return path


def write_manifest(exp: Experiment, command: str, inputs: dict, outputs: list) -> Path:
    doc = {
        "command": command,
        "config_sha256": exp.digest,
        "seed": exp.seed,
        "inputs": {k: {"path": str(p), "sha256": _digest(p)} for k, p in sorted(inputs.items())},
        "outputs": sorted(str(Path(p).relative_to(exp.output)) for p in outputs),
    }
    return _write(exp.output / f"manifest-{command}.json", json.dumps(doc, indent=1) + "\n")


def _data_paths(exp: Experiment) -> dict:
    sec = exp.section("data")
    default = exp.output / "data"
    paths = {
        "train": exp.path(sec["train"]) if "train" in sec else default / "train.jsonl",
        "test": exp.path(sec["test"]) if "test" in sec else default / "test.jsonl",
    }
    if "truth" in sec:
        paths["truth"] = exp.path(sec["truth"])
    elif (default / "truth.json").exists():
        paths["truth"] = default / "truth.json"
    if "env" in sec:
        paths["env"] = exp.path(sec["env"])
    return paths


def _load_trajectories(path: Path):
    if not path.exists():
        raise DataError(f"missing input file {path}")
    return ingest_trajectories(path)


def estimate_env(trajs, num_states: int, num_actions: int) -> np.ndarray:
    """Empirical transition frequencies; unseen (state, action) pairs stay put."""
    counts = np.zeros((num_states, num_actions, num_states))
    for tr in trajs:
        np.add.at(counts, (tr.states[:-1], tr.actions[:-1], tr.states[1:]), 1.0)
    total = counts.sum(axis=2, keepdims=True)
    stay = np.broadcast_to(np.eye(num_states)[:, None, :], counts.shape)
    return np.where(total > 0, counts / np.maximum(total, 1.0), stay)


def resolve_env(exp: Experiment, paths: dict, train) -> np.ndarray:
    grid = exp.gridworld()
    if grid is not None:
        return gridworld_kernel(grid[0])
    if "env" in paths:
        if not paths["env"].exists():
            raise DataError(f"missing environment file {paths['env']}")
        doc = json.loads(paths["env"].read_text(encoding="utf-8"))
        if doc.get("format") != ENV_FORMAT:
            raise DataError(f"{paths['env']}: expected format {ENV_FORMAT!r}")
        return np.asarray(doc["kernel"], dtype=float)
    log.info("no environment given; estimating the transition kernel from the training data")
    return estimate_env(train.trajectories, train.num_states, train.num_actions)


def load_truth(path: Path) -> GroundTruth:
    try:
        model = DiscreteHmMdp.from_json(path.read_text(encoding="utf-8"))
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from exc
    return GroundTruth(model.rewards, model.mode_logits, feasible_histories(model.env, model.spaces))


def fit_filename(config: FitConfig, seed: int) -> str:
    return f"{config.variant}-{config.history_len}-Z{config.num_modes}-seed{seed}.json"


def _fit_one(data, env, config):
    return fit(data, env, config).to_json()


def fit_seeds(data, env, config: FitConfig, seeds, directory: Path, workers: int = 1) -> list[Path]:
    """Fit every seed whose result file is missing; existing files are reused untouched."""
    paths = [directory / fit_filename(config, s) for s in seeds]
    todo = [(p, s) for p, s in zip(paths, seeds) if not p.exists()]
    if len(todo) < len(paths):
        log.info("%s: %d of %d seeds already present", config.label, len(paths) - len(todo), len(paths))
    jobs = [replace(config, seed=s) for _, s in todo]
    # each result is written as soon as it arrives, so an interrupted run keeps finished seeds
    if workers > 1 and len(jobs) > 1:
        from joblib import Parallel, delayed

        texts = Parallel(n_jobs=workers, return_as="generator")(delayed(_fit_one)(data, env, c) for c in jobs)
    else:
        texts = (_fit_one(data, env, c) for c in jobs)
    for (p, _), text in zip(todo, texts):
        _write(p, text)
    return paths


def load_fits(paths, keep_top: int | None = None) -> list[FitResult]:
    results = []
    for p in paths:
        if not p.exists():
            raise DataError(f"missing fit result {p}")
        results.append(FitResult.from_json(p.read_text(encoding="utf-8")))
    results.sort(key=lambda r: (-r.train_ll, r.seed))
    return results if keep_top is None else results[:keep_top]


def _seeds(exp: Experiment) -> tuple[list[int], int]:
    sec = exp.section("fit")
    num_seeds, keep_top = sec.get("num_seeds", 20), sec.get("keep_top", 10)
    if not (isinstance(num_seeds, int) and isinstance(keep_top, int) and num_seeds >= keep_top >= 1):
        raise ConfigError("[fit] needs integers num_seeds >= keep_top >= 1")
    return [exp.seed + k for k in range(num_seeds)], keep_top


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(exp: Experiment, workers: int = 1) -> int:
    grid = exp.gridworld()
    if grid is None:
        raise ConfigError("missing [gridworld] section")
    spec, extra = grid
    try:
        model, truth = build_gridworld(spec)
    except ModelError as exc:
        raise ConfigError(f"[gridworld]: {exc}") from exc
    trajs, _ = sample_trajectories(model, truth, extra["num_trajectories"], extra["length"], exp.seed)
    train, test = train_test_split(trajs, extra["train_fraction"], exp.seed)
    S, A = spec.num_states, model.spaces.num_actions
    d = exp.output / "data"
    outputs = [
        _write(d / "train.jsonl", dumps_trajectories(train, S, A, "train")),
        _write(d / "test.jsonl", dumps_trajectories(test, S, A, "test")),
        _write(d / "truth.json", model.to_json() + "\n"),
    ]
    write_manifest(exp, "simulate", {}, outputs)
    print(f"simulated {len(trajs)} trajectories x {extra['length']} steps "
          f"({len(train)} train / {len(test)} test), seed {exp.seed}")
    return EXIT_OK


def cmd_fit(exp: Experiment, workers: int = 1) -> int:
    paths = _data_paths(exp)
    train = _load_trajectories(paths["train"])
    env = resolve_env(exp, paths, train)
    if env.shape[:2] != (train.num_states, train.num_actions):
        raise DataError(f"environment has shape {env.shape}, data declares "
                        f"{train.num_states} states and {train.num_actions} actions")
    seeds, keep_top = _seeds(exp)
    outputs = []
    for config in exp.models():
        check_trajectories(train.trajectories, Spaces(config.num_modes, train.num_states, train.num_actions, 1))
        files = fit_seeds(train.trajectories, env, config, seeds, exp.output / "fits", workers)
        outputs += files
        best = load_fits(files, 1)[0]
        print(f"{_display(config)}: best train LL {best.train_ll:.4f} (seed {best.seed})")
    write_manifest(exp, "fit", {"train": paths["train"]}, outputs)
    return EXIT_OK


def _display(config: FitConfig) -> str:
    return "MaxEnt" if config.num_modes == 1 and config.history_len == 1 else config.label


def _truth(paths) -> GroundTruth | None:
    return load_truth(paths["truth"]) if "truth" in paths else None


def cmd_evaluate(exp: Experiment, workers: int = 1) -> int:
    paths = _data_paths(exp)
    test = _load_trajectories(paths["test"])
    truth = _truth(paths)
    seeds, keep_top = _seeds(exp)
    reports, outputs = [], []
    rdir = exp.output / "reports"
    for config in exp.models():
        files = [exp.output / "fits" / fit_filename(config, s) for s in seeds]
        kept = load_fits(files, keep_top)
        report = evaluate_fits(kept, test.trajectories, truth)
        reports.append(report)
        stem = f"{config.variant}-{config.history_len}-Z{config.num_modes}"
        outputs.append(_write(rdir / f"{stem}.json", report.to_json() + "\n"))
        outputs.append(_write(rdir / f"{stem}.csv", report.to_csv(include_correlation=truth is not None)))
    outputs.append(_write(exp.output / "comparison.csv", comparison_csv(compare_models(reports))))

    sec = exp.section("evaluate")
    if sec.get("robustness", False):
        outputs += _robustness(exp, paths, test, truth, seeds, keep_top, workers)
    inputs = {"test": paths["test"], **({"truth": paths["truth"]} if truth is not None else {})}
    write_manifest(exp, "evaluate", inputs, outputs)
    for row in compare_models(reports):
        print(f"{row['model']}: median test LL {row['median_test_ll']:.4f} (IQR {row['iqr']:.4f})")
    return EXIT_OK


def _robustness(exp, paths, test, truth, seeds, keep_top, workers) -> list:
    sec = exp.section("evaluate")
    train = _load_trajectories(paths["train"])
    env = resolve_env(exp, paths, train)
    entry = sec.get("robustness_model", {"variant": "S", "L": 2, "Z": 2})
    _reject_unknown(entry, {"variant", "L", "Z"}, "[evaluate].robustness_model")
    config = replace(exp.fit_config(), variant=entry.get("variant", "S"), history_len=int(entry.get("L", 2)),
                     num_modes=int(entry.get("Z", 2)))
    fractions = [float(f) for f in sec.get("fractions", DEFAULT_FRACTIONS)]
    if any(not 0 <= f <= 0.5 for f in fractions):
        raise ConfigError("[evaluate].fractions must lie in [0, 0.5]")
    perturb_seed = int(sec.get("perturb_seed", exp.seed))
    points, outputs = [], []
    for frac in fractions:
        data = train.trajectories if frac == 0 else perturb_trajectories(
            train.trajectories, frac, perturb_seed, train.num_states, train.num_actions)
        # unperturbed data with a model from the main grid: reuse those fits
        reuse = frac == 0 and config in exp.models()
        directory = exp.output / "fits" / ("" if reuse else f"robustness-{frac:g}")
        files = fit_seeds(data, env, config, seeds, directory, workers)
        outputs += files
        points.append(SweepPoint(frac, evaluate_fits(load_fits(files, keep_top), test.trajectories, truth,
                                                     fraction=frac)))
    outputs.append(_write(exp.output / "robustness.csv", sweep_csv(points)))
    if truth is not None and len(points) > 1 and all(p.report.values("segmentation_accuracy") for p in points):
        print(f"robustness: Spearman(fraction, median accuracy) = {sweep_trend(points):.4f}")
    return outputs


def cmd_segment(exp: Experiment, workers: int = 1) -> int:
    paths = _data_paths(exp)
    sec = exp.section("segment")
    data_path = exp.path(sec["data"]) if "data" in sec else paths["test"]
    data = _load_trajectories(data_path)
    if "fit" in sec:
        fit_path = exp.path(sec["fit"])
        result = load_fits([fit_path])[0]
    else:
        config = exp.models()[0]
        seeds, _ = _seeds(exp)
        files = [exp.output / "fits" / fit_filename(config, s) for s in seeds]
        result = load_fits(files, 1)[0]
        fit_path = exp.output / "fits" / fit_filename(config, result.seed)
    model = result.model
    if (model.spaces.num_states, model.spaces.num_actions) != (data.num_states, data.num_actions):
        raise DataError(f"model spaces ({model.spaces.num_states} states, {model.spaces.num_actions} actions) "
                        f"do not match the data ({data.num_states}, {data.num_actions})")
    check_trajectories(data.trajectories, model.spaces)
    cfg = result.config
    _, policies = solve_policies(model, iters=cfg.softq_iters, tol=cfg.softq_tol, method=cfg.softq_method)
    posts = infer(model, policies, data.trajectories)
    lines = [json.dumps({"format": SEGMENT_FORMAT, "num_modes": model.spaces.num_modes,
                         "fit": str(fit_path)}, separators=(",", ":"))]
    for i, post in enumerate(posts):
        lines.append(json.dumps({
            "index": i,
            "labels": map_segments(post).tolist(),
            "posteriors": np.round(post.gamma_marginals, 12).tolist(),
            "log_likelihood": post.log_likelihood,
        }, separators=(",", ":")))
    out = exp.path(sec["output"]) if "output" in sec else exp.output / "segments.jsonl"
    written = _write(out, "\n".join(lines) + "\n")
    write_manifest(exp, "segment", {"data": data_path, "fit": fit_path},
                   [written] if exp.output in written.parents else [])
    print(f"segmented {len(posts)} trajectories with {_display(cfg)} (seed {result.seed}) -> {out}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "evaluate": cmd_evaluate, "segment": cmd_segment}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swirl", description="Switching inverse RL pipelines.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="TOML experiment config")
    parser.add_argument("--workers", type=int, default=1, help="parallel fits across seeds")
    parser.add_argument("--output", help="output directory (overrides the config)")
    parser.add_argument("--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        exp = load_config(args.config, args.output)
        return COMMANDS[args.command](exp, args.workers)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, TrajectoryFormatError, InvalidStateError, ModelError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
