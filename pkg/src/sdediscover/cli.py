"""Command-line front end: simulate, discover, reliability and pipeline.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .dictionary import DegenerateColumnError, DictionaryConfig
from .discovery import DiscoveryConfig, discover, load_discovered
from .kramers_moyal import InsufficientDataError
from .reliability import FailureCurve, LimitState, comparison_report, failure_probability
from .sde import BUILTINS, SdeModel, add_measurement_noise, builtin_system, load_model, read_ensemble, simulate_ensemble, steps_for, write_ensemble
from .spike_slab import SsHyperparams

log = logging.getLogger("sdediscover")

ENV_OUTPUT_DIR = "SDEDISCOVER_OUTPUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

# keys that change where or how fast things run, but not what is computed
_RUNTIME_KEYS = ("output_dir", "threads")

PRESETS = ("duffing", "cubic3dof", "tmd5dof")


class ConfigError(ValueError):
    pass


# -- configuration ------------------------------------------------------------

def _set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not a mapping")
    node[keys[-1]] = value


def preset_text(name: str) -> str:
    return resources.files("sdediscover").joinpath("presets", f"{name}.yaml").read_text()


def load_config(path: str | Path, overrides: list[str] | None = None) -> dict:
    """Read a YAML run configuration and apply ``key.path=value`` overrides.

    ``path`` may also be the name of a shipped preset; relative paths inside a
    preset resolve against the working directory.
    """
    p = Path(path)
    if p.is_file():
        text, base = p.read_text(), p.resolve().parent
    elif str(path) in PRESETS:
        text, base = preset_text(str(path)), Path.cwd()
    else:
        raise ConfigError(f"config file {p} does not exist (presets: {', '.join(PRESETS)})")
    try:
        cfg = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping at top level")
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        _set_path(cfg, key.strip(), yaml.safe_load(raw))
    cfg["_base_dir"] = str(base)
    return cfg


def config_hash(cfg: dict) -> str:
    core = {k: v for k, v in cfg.items() if k not in _RUNTIME_KEYS and not k.startswith("_")}
    return hashlib.sha256(json.dumps(core, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name)
    if not isinstance(sec, dict):
        raise ConfigError(f"missing section '{name}'")
    return sec


def _require(sec: dict, section: str, key: str):
    if sec.get(key) is None:
        raise ConfigError(f"{section}.{key} is required")
    return sec[key]


def _resolve(cfg: dict, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else Path(cfg.get("_base_dir", ".")) / q


def resolve_system(cfg: dict, spec=None) -> tuple[SdeModel, np.ndarray]:
    """Model and initial state for a builtin name or a model file."""
    spec = cfg.get("system") if spec is None else spec
    if spec is None:
        raise ConfigError("system is required")
    if spec in BUILTINS:
        model, x0 = builtin_system(spec)
    else:
        path = _resolve(cfg, str(spec))
        if not path.is_file():
            raise ConfigError(f"system {spec!r} is neither a builtin ({', '.join(BUILTINS)}) nor an existing model file")
        model, x0 = load_model(path), None
    if cfg.get("x0") is not None:
        x0 = np.asarray(cfg["x0"], dtype=float)
    if x0 is None:
        raise ConfigError("x0 is required when the system is loaded from a file")
    if x0.shape != (model.dim,):
        raise ConfigError(f"x0 has {x0.size} entries, the system has {model.dim} states")
    return model, x0


def output_dir(cfg: dict, flag: str | None = None) -> Path:
    out = flag or cfg.get("output_dir") or os.environ.get(ENV_OUTPUT_DIR) or "sdediscover-out"
    return Path(out)


def discovery_config(cfg: dict, m: int, threads: int = 1) -> DiscoveryConfig:
    try:
        dict_cfg = DictionaryConfig.from_dict(cfg.get("dictionary") or {})
        diff_cfg = cfg.get("diffusion_dictionary")
        diff_cfg = None if diff_cfg is None else DictionaryConfig.from_dict(diff_cfg)
        hyper = SsHyperparams(**(cfg.get("vb") or {}))
        d = dict(cfg.get("discovery") or {})
        pairs = {int(k): int(v) for k, v in (d.pop("kinematic_pairs", None) or {}).items()}
        dc = DiscoveryConfig(dict_cfg, hyper, kinematic_pairs=pairs, diffusion_dict_cfg=diff_cfg, threads=threads, **d)
        dc.validate(m)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"discovery configuration: {e}") from e
    return dc


def _header(cfg: dict, **seeds) -> str:
    s = " ".join(f"{k}={v}" for k, v in seeds.items() if v is not None)
    return f"config_hash={config_hash(cfg)}" + (f" {s}" if s else "")


# -- commands -----------------------------------------------------------------

def cmd_simulate(cfg: dict, out: Path) -> Path:
    model, x0 = resolve_system(cfg)
    sim = _section(cfg, "simulate")
    dt = float(_require(sim, "simulate", "dt"))
    horizon = float(_require(sim, "simulate", "horizon"))
    n_paths = int(_require(sim, "simulate", "n_paths"))
    seed = int(_require(sim, "simulate", "seed"))
    pct = float(sim.get("noise_percent", 0.0))
    noise_seed = int(sim.get("noise_seed", seed + 1))
    cols = sim.get("noise_columns")
    try:
        steps_for(horizon, dt)
    except ValueError as e:
        raise ConfigError(f"simulate.horizon: {e}") from e
    if n_paths < 1:
        raise ConfigError("simulate.n_paths must be >= 1")
    ens = simulate_ensemble(model, x0, dt, horizon, n_paths, seed)
    ens = add_measurement_noise(ens, pct, noise_seed, cols)
    meta = {"config_hash": config_hash(cfg), "system": str(cfg.get("system")), "noise_percent": pct,
            "noise_seed": noise_seed, "noise_columns": cols}
    d = out / "data"
    write_ensemble(ens, d, meta, comment=_header(cfg, seed=seed, noise_seed=noise_seed))
    log.info("wrote %d paths to %s", n_paths, d)
    return d


def cmd_discover(cfg: dict, out: Path, data_dir: Path | None = None, threads: int = 1) -> Path:
    data_dir = data_dir or out / "data"
    try:
        ens = read_ensemble(data_dir)
    except (OSError, ValueError, KeyError) as e:
        raise ConfigError(f"cannot read ensemble from {data_dir}: {e}") from e
    dc = discovery_config(cfg, ens.dim, threads)
    h = config_hash(cfg)
    res = discover(ens, dc, label=f"discovered:{cfg.get('system', 'data')}",
                   extra_provenance={"run_config_hash": h, "seeds": (cfg.get("simulate") or {}).get("seed")})
    out.mkdir(parents=True, exist_ok=True)
    head = _header(cfg, data_seed=ens.seed)
    for (kind, i), fit in sorted(res.per_equation.items()):
        fit.write_pip_csv(out / f"pip_{kind}_x{i + 1}.csv", header=f"# {head}")
        fit.posterior.write_elbo_csv(out / f"elbo_{kind}_x{i + 1}.csv", header=f"# {head}")
    res.save(out / "model.json")
    if not res.converged:
        log.warning("some regressions did not converge; see provenance in %s", out / "model.json")
    log.info("discovered model:\n%s", res.model)
    return out / "model.json"


def _limit_state(cfg: dict, m: int) -> tuple[LimitState, dict]:
    rel = _section(cfg, "reliability")
    thr = _require(rel, "reliability", "threshold")
    idx = int(_require(rel, "reliability", "state_index"))
    if not 0 <= idx < m:
        raise ConfigError(f"reliability.state_index {idx} out of range for {m} states")
    try:
        ls = LimitState(idx, float(thr), absolute=bool(rel.get("absolute", False)))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"reliability: {e}") from e
    return ls, rel


def _curve(cfg: dict, model: SdeModel, x0, threads: int) -> FailureCurve:
    ls, rel = _limit_state(cfg, model.dim)
    dt = float(rel.get("dt", (cfg.get("simulate") or {}).get("dt", 0.001)))
    T = float(_require(rel, "reliability", "T"))
    stride = float(rel.get("report_stride", 0.1))
    n_paths = int(rel.get("n_paths", 2000))
    if n_paths < 100:
        raise ConfigError("reliability.n_paths must be >= 100")
    try:
        steps_for(T, dt)
        steps_for(stride, dt)
    except ValueError as e:
        raise ConfigError(f"reliability.T / report_stride: {e}") from e
    substeps = int(rel.get("substeps", 1))
    if substeps < 1:
        raise ConfigError("reliability.substeps must be >= 1")
    return failure_probability(model, x0, dt, T, n_paths, ls, int(rel.get("seed", 0)), stride, threads, substeps)


def cmd_reliability(cfg: dict, out: Path, model_spec=None, reference_spec=None, threads: int = 1) -> list[Path]:
    """Failure curve for ``model_spec`` and, if given, a reference model plus a comparison report."""
    _, x0 = resolve_system(cfg)
    _limit_state(cfg, len(x0))
    specs = [("model", model_spec or str(out / "model.json"))]
    if reference_spec:
        specs.insert(0, ("reference", reference_spec))
    out.mkdir(parents=True, exist_ok=True)
    rel = cfg["reliability"]
    head = _header(cfg, seed=rel.get("seed", 0))
    curves, written = {}, []
    for name, spec in specs:
        if spec in BUILTINS:
            model = builtin_system(spec)[0]
        else:
            p = Path(spec)
            if not p.is_file():
                raise ConfigError(f"model file {p} does not exist")
            model = load_discovered(p)
        if model.dim != len(x0):
            raise ConfigError(f"{name} model has {model.dim} states, x0 has {len(x0)}")
        c = _curve(cfg, model, x0, threads)
        curves[name] = c
        f = out / f"pf_{name}.csv"
        c.to_csv(f, header=f"# {head} label={model.label}")
        written.append(f)
        log.info("%s: pf(T) = %.4f", name, c.pf[-1])
    if len(curves) == 2:
        rep = comparison_report(curves["reference"], curves["model"], ("reference", "model"), header=f"# {head}")
        f = out / "comparison.txt"
        f.write_text(rep)
        written.append(f)
        log.info("comparison:\n%s", rep)
    return written


def cmd_pipeline(cfg: dict, out: Path, threads: int = 1) -> None:
    cmd_simulate(cfg, out)
    model_file = cmd_discover(cfg, out, threads=threads)
    ref = cfg.get("system")
    ref = ref if ref in BUILTINS else str(_resolve(cfg, ref))
    cmd_reliability(cfg, out, str(model_file), ref, threads)


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", help=f"YAML run configuration or preset name ({', '.join(PRESETS)})")
    common.add_argument("-o", "--output-dir", help=f"output directory (default: config output_dir, then ${ENV_OUTPUT_DIR})")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. simulate.seed=3 (repeatable)")
    common.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sdediscover", description="Discover SDEs from trajectory data and estimate failure probabilities.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="generate a synthetic ensemble")
    d = sub.add_parser("discover", parents=[common], help="discover drift and diffusion from an ensemble")
    d.add_argument("--data", help="ensemble directory (default: <output-dir>/data)")
    r = sub.add_parser("reliability", parents=[common], help="first-passage failure curves")
    r.add_argument("model", nargs="?", help="model file or builtin name (default: <output-dir>/model.json)")
    r.add_argument("reference", nargs="?", help="second model to compare against")
    sub.add_parser("pipeline", parents=[common], help="simulate, discover and compare reliability")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        threads = args.threads if args.threads is not None else int(cfg.get("threads", 1))
        if threads < 1:
            raise ConfigError("threads must be >= 1")
        out = output_dir(cfg, args.output_dir)
        if args.command == "simulate":
            cmd_simulate(cfg, out)
        elif args.command == "discover":
            cmd_discover(cfg, out, Path(args.data) if args.data else None, threads)
        elif args.command == "reliability":
            cmd_reliability(cfg, out, args.model, args.reference, threads)
        else:
            cmd_pipeline(cfg, out, threads)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, np.linalg.LinAlgError, DegenerateColumnError, InsufficientDataError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
