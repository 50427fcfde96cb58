"""Command line experiment runner.

Every command reads an optional JSON config, applies flag overrides, and writes
``report.json`` (plus ``series.csv`` for tabular output) under ``--out``.  The
exit code is 0 exactly when every check in the report passes.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import click
import numpy as np

from .core_protocol import PrivacyParams, ScriptedAdversary, chain, compose_post, pair, query
from .mechanisms import (
    QSTAR,
    LeakyHistogram,
    NoiseSource,
    QUERIES,
    default_registry,
    hss_histogram,
    irr,
    m_delta,
    rr_with_secret,
)
from .privacy_analysis import (
    a_delta,
    adaptive_delta,
    check_structural_properties,
    composition_check,
    enumerate_views,
    histogram_child_relation,
    paired_runs,
    parallel_stack,
    reveals_bit,
    run_distinguishing_game,
    run_instrumented,
)
from .reduction import (
    build_tables,
    compute_mu,
    condition_residuals,
    end_to_end_gap,
    horizon_gap,
    random_table_mechanism,
)
from .verification import make_identifier, make_verifier

SEED_ENV = "CONTDP_SEED"
COMMANDS = ("counterexample", "composition", "histogram", "reduction", "structural", "enumerate")


@dataclass
class ExperimentConfig:
    command: str
    seed: int = 0
    trials: Optional[int] = None
    epsilon: Optional[float] = None
    delta: Optional[float] = None
    horizon: Optional[int] = None
    zero_noise: bool = False
    options: Dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        data = json.loads(text)
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if data.get("command") not in COMMANDS:
            raise ValueError(f"config command must be one of {COMMANDS}")
        return cls(**data)


class ConfigError(click.UsageError):
    pass


def _load_config(command: str, path: Optional[str], overrides: Dict[str, Any]) -> ExperimentConfig:
    if path:
        text = Path(path).read_text()
        try:
            cfg = ExperimentConfig.from_json(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if cfg.command != command:
            raise ConfigError(f"{path}: config is for {cfg.command!r}, not {command!r}")
    else:
        cfg = ExperimentConfig(command, seed=int(os.environ.get(SEED_ENV, "0")))
    for key, value in overrides.items():
        if value is not None and value is not False:
            setattr(cfg, key, value)
    return cfg


def _clean(value: Any) -> Any:
    if isinstance(value, Fraction):
        return str(value)
    if isinstance(value, float):
        return float(repr(value))
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    return value


def _emit(out: Optional[str], report: Dict[str, Any], rows: Optional[List[Dict[str, Any]]] = None) -> None:
    text = json.dumps(_clean(report), sort_keys=True, indent=2) + "\n"
    if out is None:
        click.echo(text, nl=False)
    else:
        target = Path(out)
        target.mkdir(parents=True, exist_ok=True)
        (target / "report.json").write_text(text)
        if rows:
            buf = io.StringIO()
            writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _clean(v) for k, v in row.items()})
            (target / "series.csv").write_text(buf.getvalue())
    if not report.get("passed", False):
        sys.exit(1)


def _common(fn):
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None),
        click.option("--seed", type=int, default=None),
        click.option("--trials", type=int, default=None),
        click.option("--epsilon", type=float, default=None),
        click.option("--delta", type=float, default=None),
        click.option("--horizon", type=int, default=None),
        click.option("--zero-noise", is_flag=True, default=False),
        click.option("--out", type=click.Path(file_okay=False), default=None),
    ]
    for opt in reversed(options):
        fn = opt(fn)
    return fn


def _setup(command, config_path, seed, trials, epsilon, delta, horizon, zero_noise):
    return _load_config(command, config_path, {"seed": seed, "trials": trials, "epsilon": epsilon,
                                               "delta": delta, "horizon": horizon, "zero_noise": zero_noise})


@click.group()
def main() -> None:
    """Experiments on continual and interactive differential privacy."""


@main.command()
@_common
@click.option("--ell", type=int, default=None, help="mechanism budget of the adversary")
def counterexample(config_path, seed, trials, epsilon, delta, horizon, zero_noise, out, ell):
    """Parallel composition of (0, delta) mechanisms leaks the secret."""
    cfg = _setup("counterexample", config_path, seed, trials, epsilon, delta, horizon, zero_noise)
    d = 0.5 if cfg.delta is None else cfg.delta
    if not 0 < d <= 1:
        raise click.UsageError("delta must lie in (0, 1]")
    ell = ell if ell is not None else int(cfg.options.get("ell", 3))
    n = cfg.trials or 10_000
    reg = default_registry()
    game = run_distinguishing_game(a_delta(d, ell), lambda b: parallel_stack(b, d, reg), n, cfg.seed)
    exposure = 1 - (1 - d) ** ell
    expected = 0.5 * (1 + exposure)
    lo, hi = game.ci
    rows = [{"ell": i, "exposure": 1 - (1 - d) ** i, "success": 0.5 * (1 + 1 - (1 - d) ** i)} for i in range(ell + 1)]
    report = {
        "command": "counterexample", "delta": d, "ell": ell, "trials": n, "seed": cfg.seed,
        "analytic_exposure": exposure, "analytic_success": expected,
        "success_rate": game.success_rate, "ci": [lo, hi],
        "checks": {"success_in_ci": lo <= expected <= hi},
    }
    if ell <= 8:
        exact_d = Fraction(repr(d))
        views = enumerate_views(a_delta(exact_d, ell), parallel_stack(0, exact_d, reg), 4 * ell + 2)
        report["enumerated_exposure"] = views.event(reveals_bit)
        report["checks"]["enumeration_exact"] = views.event(reveals_bit) == 1 - (1 - exact_d) ** ell
    report["passed"] = all(report["checks"].values())
    _emit(out, report, rows)


@main.command()
@_common
@click.option("--child", "children", multiple=True, type=(float, float), help="RR child (epsilon, delta)")
def composition(config_path, seed, trials, epsilon, delta, horizon, zero_noise, out, children):
    """Adaptive template search against concurrently composed randomized response children."""
    cfg = _setup("composition", config_path, seed, trials, epsilon, delta, horizon, zero_noise)
    pairs = children or tuple(tuple(c) for c in cfg.options.get("children", [(0.5, 0.1), (0.5, 0.1)]))
    params = [PrivacyParams(e, d) for e, d in pairs]
    limit = int(cfg.options.get("limit", 200))
    rep = composition_check(params, default_registry(), limit)
    report = {
        "command": "composition", "children": [list(p) for p in pairs], "epsilon": rep.epsilon,
        "delta_measured": rep.delta_measured, "bound": rep.bound, "margin": rep.margin,
        "strategies": rep.strategies, "truncated": rep.truncated,
        "checks": {"within_bound": rep.delta_measured <= rep.bound + 1e-12},
    }
    report["passed"] = all(report["checks"].values())
    _emit(out, report)


def _histogram_factory(cfg: ExperimentConfig, noise: NoiseSource, d: int, T: int, cls=None):
    eps = cfg.epsilon or 1.0
    opts = cfg.options
    make = cls or (lambda *a, **k: hss_histogram(*a, **k))
    return lambda replay=None: make(eps, opts.get("query", "max"), opts.get("beta", 0.1),
                                    opts.get("gamma", "default"), opts.get("xi", "half_default"), d, T,
                                    cfg.delta or 0.0, noise=noise, replay=replay)


@main.command()
@_common
@click.option("--dimension", type=int, default=None)
def histogram(config_path, seed, trials, epsilon, delta, horizon, zero_noise, out, dimension):
    """Run the monotone histogram mechanism on a seeded random stream."""
    cfg = _setup("histogram", config_path, seed, trials, epsilon, delta, horizon, zero_noise)
    d = dimension or int(cfg.options.get("dimension", 2))
    T = cfg.horizon or 64
    rng = np.random.default_rng(cfg.seed)
    rate = float(cfg.options.get("rate", 0.3))
    stream = [tuple(int(v) for v in (rng.random(d) < rate)) for _ in range(T)]
    q = QUERIES[cfg.options.get("query", "max")]
    noise = NoiseSource.zero() if cfg.zero_noise else NoiseSource.seeded()
    run = run_instrumented(_histogram_factory(cfg, noise, d, T)(), stream, cfg.seed)
    reference = run_instrumented(_histogram_factory(cfg, NoiseSource.zero(), d, T)(), stream, cfg.seed)
    hist = [0] * d
    rows = []
    for t, (x, out_t, ref_t) in enumerate(zip(stream, run.outputs, reference.outputs), start=1):
        hist = [a + b for a, b in zip(hist, x)]
        rows.append({"t": t, "output": out_t, "zero_noise_output": ref_t, "true_value": q.evaluate(tuple(hist)),
                     "error_vs_zero_noise": abs(out_t - ref_t), "error_vs_truth": abs(out_t - q.evaluate(tuple(hist)))})
    report = {
        "command": "histogram", "seed": cfg.seed, "dimension": d, "horizon": T, "zero_noise": cfg.zero_noise,
        "max_error_vs_zero_noise": max(r["error_vs_zero_noise"] for r in rows),
        "max_error_vs_truth": max(r["error_vs_truth"] for r in rows),
        "flushes": sum(1 for e in run.events if e.kind == "create" and e.creation.mech_id == "laplace_int"),
        "checks": {
            "integer_outputs": all(isinstance(v, int) for v in run.outputs),
            "zero_noise_monotone": all(a <= b for a, b in zip(reference.outputs, reference.outputs[1:])),
            "zero_noise_exact": (not cfg.zero_noise) or all(r["error_vs_zero_noise"] == 0 for r in rows),
        },
    }
    report["passed"] = all(report["checks"].values())
    _emit(out, report, rows)


def _reduction_instance(name: str, cfg: ExperimentConfig):
    if name == "rr":
        eps = cfg.epsilon or math.log(3)
        d = 0.1 if cfg.delta is None else cfg.delta
        p = PrivacyParams(eps, d)
        m0, m1 = rr_with_secret(p, 0), rr_with_secret(p, 1)
        return m0, m0.initial_state(), m1.initial_state(), 1, eps, d, None, None
    if name == "m_delta":
        d = 0.5 if cfg.delta is None else cfg.delta
        eps = cfg.epsilon or 0.5
        reg = default_registry()
        rel = reg.relation("two_bits_one_change")
        stacks = [compose_post(chain(make_verifier(rel), make_identifier(b)), m_delta(d)) for b in (0, 1)]
        queries = [pair(x, y) for x in (0, 1) for y in (0, 1)]
        return (stacks[0], stacks[0].initial_state(), stacks[1].initial_state(), 2, eps, d, queries,
                m_delta(d).answer_space)
    if name == "random":
        eps = cfg.epsilon or 0.5
        m0, m1 = random_table_mechanism(np.random.default_rng(cfg.seed))
        d = adaptive_delta(m0, m1, m0.query_space, m0.answer_space, 2, eps)
        return m0, m0.initial_state(), m1.initial_state(), 2, eps, d, None, None
    raise click.UsageError(f"unknown reduction instance {name!r}")


def _key_text(key) -> str:
    return "|".join(repr(m) for m in key)


@main.command()
@_common
@click.option("--instance", type=click.Choice(["rr", "m_delta", "random"]), default=None)
def reduction(config_path, seed, trials, epsilon, delta, horizon, zero_noise, out, instance):
    """Decompose a finite mechanism and rebuild it from interactive randomized response."""
    cfg = _setup("reduction", config_path, seed, trials, epsilon, delta, horizon, zero_noise)
    name = instance or cfg.options.get("instance", "rr")
    mech, s0, s1, T, eps, d, queries, answers = _reduction_instance(name, cfg)
    T = cfg.horizon or T
    mu = compute_mu(mech, s0, s1, T, queries, answers)
    tables = build_tables(mu, eps, d)
    residuals = condition_residuals(tables)
    drop, rise = horizon_gap(compute_mu(mech, s0, s1, T + 1, queries, answers), eps, T)
    e2e = end_to_end_gap(tables)
    rows = []
    for t in range(T + 1):
        for key, m in sorted(mu.mu[t].items(), key=lambda kv: _key_text(kv[0])):
            rows.append({"t": t, "transcript": _key_text(key), "mu0": m[0], "mu1": m[1],
                         "L0": tables.control.l[t].get(key, (0, 0))[0], "L1": tables.control.l[t].get(key, (0, 0))[1],
                         "phi0": tables.phi[t].get(key, (0, 0))[0], "phi1": tables.phi[t].get(key, (0, 0))[1],
                         "psi0": tables.psi[t].get(key, (0, 0))[0], "psi1": tables.psi[t].get(key, (0, 0))[1]})
    checks = {f"{k}_below_tol": v < 1e-9 for k, v in residuals.items()}
    checks["end_to_end_below_tol"] = e2e < 1e-9
    checks["horizon_monotone"] = drop <= 1e-12
    report = {"command": "reduction", "instance": name, "epsilon": eps, "delta": d, "horizon": T,
              "residuals": residuals, "end_to_end_gap": e2e, "horizon_gap": rise, "L0": list(tables.control.l[0][()]),
              "checks": checks}
    report["passed"] = all(checks.values())
    _emit(out, report, rows)


@main.command()
@_common
@click.option("--streams", type=int, default=None)
def structural(config_path, seed, trials, epsilon, delta, horizon, zero_noise, out, streams):
    """Paired runs on neighboring streams; checks destination, response and mapping properties."""
    cfg = _setup("structural", config_path, seed, trials, epsilon, delta, horizon, zero_noise)
    n = streams or cfg.trials or int(cfg.options.get("streams", 50))
    max_T = cfg.horizon or 64
    max_d = int(cfg.options.get("max_dimension", 4))
    reg = default_registry()
    relation = histogram_child_relation(reg)
    rng = np.random.default_rng(cfg.seed)
    rows, all_ok, confined = [], True, True
    for i in range(n):
        d, T = int(rng.integers(1, max_d + 1)), int(rng.integers(1, max_T + 1))
        s0, s1 = neighboring_streams(rng, d, T)
        factory = _histogram_factory(cfg, NoiseSource.seeded(), d, T)
        rep = check_structural_properties(paired_runs(factory, s0, s1, cfg.seed * 1_000_003 + i), relation, reg)
        touched = dict(rep.touched)
        confined &= touched.get("svt", 0) <= 1 and touched.get("laplace_int", 0) <= 1
        all_ok &= rep.ok
        rows.append({"stream": i, "d": d, "T": T, "destination_ok": rep.destination_ok,
                     "response_ok": rep.response_ok, "mapping_ok": rep.mapping_ok,
                     "touched": ";".join(f"{k}={v}" for k, v in rep.touched)})
    caught = find_violation(reg, relation, cfg.seed)
    report = {"command": "structural", "streams": n, "seed": cfg.seed,
              "violator_witness": None if caught is None else caught.as_dict(),
              "checks": {"all_ok": all_ok, "confined": confined, "violator_caught": caught is not None}}
    report["passed"] = all(report["checks"].values())
    _emit(out, report, rows)


def neighboring_streams(rng: np.random.Generator, d: int, T: int) -> Tuple[List[tuple], List[tuple]]:
    s0 = [tuple(int(v) for v in rng.integers(0, 2, d)) for _ in range(T)]
    s1 = list(s0)
    s1[int(rng.integers(T))] = tuple(int(v) for v in rng.integers(0, 2, d))
    return s0, s1


def find_violation(reg, relation, seed: int, attempts: int = 200):
    """Search seeded neighboring streams until the leaky histogram variant is caught."""
    rng = np.random.default_rng([seed, 1])
    for i in range(attempts):
        T = 24
        s0, s1 = neighboring_streams(rng, 1, T)
        if s0 == s1:
            continue

        def factory(replay=None):
            return LeakyHistogram(2.0, "max", 0.1, "default", "half_default", 1, T, registry=reg, replay=replay)

        rep = check_structural_properties(paired_runs(factory, s0, s1, seed * 7919 + i), relation, reg)
        if not rep.ok:
            return rep
    return None


MECHANISMS = {"rr": "randomized response", "irr": "interactive randomized response", "m_delta": "two-state leak"}


@main.command("enumerate")
@_common
@click.option("--mechanism", type=click.Choice(sorted(MECHANISMS)), default=None)
@click.option("--secret", type=int, default=None)
def enumerate_command(config_path, seed, trials, epsilon, delta, horizon, zero_noise, out, mechanism, secret):
    """Exact view distribution of a scripted adversary against a finite mechanism."""
    cfg = _setup("enumerate", config_path, seed, trials, epsilon, delta, horizon, zero_noise)
    name = mechanism or cfg.options.get("mechanism", "rr")
    b = secret if secret is not None else int(cfg.options.get("secret", 0))
    eps = math.log(3) if cfg.epsilon is None else cfg.epsilon
    d = 0.1 if cfg.delta is None else cfg.delta
    if name == "rr":
        mech, script = rr_with_secret(PrivacyParams(eps, d), b), [QSTAR]
    elif name == "irr":
        mech, script = irr(PrivacyParams(eps, d), b), [QSTAR, QSTAR, QSTAR]
    else:
        mech, script = m_delta(d), [query(v) for v in cfg.options.get("bits", [0, 0])]
    views = enumerate_views(ScriptedAdversary(script), mech, cfg.horizon or len(script) + 1)
    rows = [{"transcript": _key_text(k), "probability": float(p)}
            for k, p in sorted(views.mass.items(), key=lambda kv: _key_text(kv[0]))]
    total = float(views.total())
    report = {"command": "enumerate", "mechanism": name, "secret": b, "epsilon": eps, "delta": d,
              "outcomes": len(rows), "total": total, "nodes": views.stats.get("nodes"),
              "checks": {"sums_to_one": abs(total - 1) <= 1e-12}}
    report["passed"] = all(report["checks"].values())
    _emit(out, report, rows)


if __name__ == "__main__":  # pragma: no cover
    main()
