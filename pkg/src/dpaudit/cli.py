"""Command-line harness: ``dpaudit audit | coverage | inspect``.

Configuration is a YAML file; see README.md for the layout. Every
effective value is echoed into the report header.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import datetime
import json
import math
import os
import sys
import time

import numpy as np
import yaml

from dpaudit.attacks import AttackSpec, LRParams, run_attack, select_k
from dpaudit.core import (
    AuditConfig,
    IntervalMethod,
    KPolicy,
    NeighborDef,
    Phase,
    PrivacySpec,
    coverage_simulate,
    derive_rng,
    derive_uint64,
    katz_lower_supremum,
    max_detectable_eps,
)
from dpaudit.data import PreprocessSpec, load_csv, load_dataset, preprocess, synth_blobs
from dpaudit.estimator import AuditError, audit_pair
from dpaudit.mechanisms import Mechanism, MechanismKind

REPORT_SCHEMA = "dpaudit-report/1"
DEFAULT_EPS_GRID = (0.1, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 50.0)
COVERAGE_P1 = (0.01, 0.015, 0.02, 0.03, 0.04, 0.05)
COVERAGE_N = (1000, 10000, 50000)

EXIT_OK, EXIT_AUDIT_ERROR, EXIT_CONFIG_ERROR = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class DatasetSource:
    kind: str = "synth"  # synth | csv | snapshot
    path: str | None = None
    label_column: str = "label"
    synth: dict = dataclasses.field(default_factory=lambda: {"n": 400, "d": 4, "separation": 2.0, "seed": 0})
    preprocess: PreprocessSpec | None = dataclasses.field(default_factory=PreprocessSpec)


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """One sweep: dataset x mechanism x attacks x epsilon grid x replicates."""

    dataset: DatasetSource
    mechanism: Mechanism
    attacks: tuple[AttackSpec, ...]
    eps_grid: tuple[float, ...] = DEFAULT_EPS_GRID
    replicates: int = 3
    samples_n: int = 10_000
    alpha: float = 0.05
    min_prob_r: float | None = None
    k_policy: KPolicy = dataclasses.field(default_factory=KPolicy.default)
    neighbor_def: NeighborDef = NeighborDef.REPLACE_ONE
    hidden_units: int = 0
    posterior_ridge: float = 1e-4
    delta: float = 0.0
    lr_c: float | None = None
    seed: int = 0
    out: str = "dpaudit-out"

    def __post_init__(self):
        if not self.eps_grid:
            raise ConfigError("eps_grid must not be empty")
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        if not self.attacks:
            raise ConfigError("at least one attack is required")
        for e in self.eps_grid:
            self.audit_config(e, 0)

    def audit_config(self, epsilon: float, master_seed: int) -> AuditConfig:
        return AuditConfig(
            spec=PrivacySpec(float(epsilon), self.delta),
            samples_n=self.samples_n,
            alpha=self.alpha,
            min_prob_r=self.min_prob_r,
            k_policy=self.k_policy,
            master_seed=master_seed,
            neighbor_def=self.neighbor_def,
            hidden_units=self.hidden_units,
            posterior_ridge=self.posterior_ridge,
        )

    def lr_params(self) -> LRParams:
        return LRParams(self.lr_c if self.lr_c is not None else self.mechanism.reg_c)

    def to_json_dict(self) -> dict:
        pre = self.dataset.preprocess
        return {
            "dataset": {
                "kind": self.dataset.kind,
                "path": self.dataset.path,
                "label_column": self.dataset.label_column,
                "synth": self.dataset.synth if self.dataset.kind == "synth" else None,
                "preprocess": None if pre is None else {
                    "max_rows": pre.max_rows, "normalize": pre.normalize.value,
                    "drop_categorical_for_rf": pre.drop_categorical_for_rf,
                    "subsample_seed": pre.subsample_seed},
            },
            "mechanism": self.mechanism.to_json_dict(),
            "attacks": [{"kind": a.kind.value, "pga_steps": a.pga_steps,
                         "pga_step_size": a.pga_step_size} for a in self.attacks],
            "eps_grid": list(self.eps_grid),
            "replicates": self.replicates,
            "samples_n": self.samples_n,
            "alpha": self.alpha,
            "min_prob_r": self.audit_config(self.eps_grid[0], 0).min_prob_r,
            "k_policy": self.k_policy.to_json(),
            "neighbor_def": self.neighbor_def.value,
            "hidden_units": self.hidden_units,
            "posterior_ridge": self.posterior_ridge,
            "delta": self.delta,
            "lr_c": self.lr_params().c,
            "seed": self.seed,
        }


_TOP_KEYS = {"dataset", "mechanism", "attacks", "eps_grid", "replicates", "audit", "seed", "out"}
_AUDIT_KEYS = {"samples_n", "alpha", "min_prob_r", "k_policy", "neighbor_def", "hidden_units",
               "posterior_ridge", "delta", "lr_c", "delta_split"}


def _check_keys(section: dict, allowed: set, where: str):
    extra = set(section) - allowed
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(extra)}")


def parse_run_config(raw: dict, base_dir: str = ".") -> RunConfig:
    """Builds a RunConfig from a parsed YAML mapping."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    _check_keys(raw, _TOP_KEYS, "config")
    try:
        ds = dict(raw.get("dataset") or {})
        _check_keys(ds, {"kind", "path", "label_column", "synth", "preprocess"}, "dataset")
        pre_raw = ds.get("preprocess", {})
        pre = None if pre_raw is None else PreprocessSpec(**pre_raw)
        path = ds.get("path")
        if path is not None and not os.path.isabs(path):
            path = os.path.normpath(os.path.join(base_dir, path))
        synth = dict(DatasetSource().synth, **(ds.get("synth") or {}))
        source = DatasetSource(ds.get("kind", "synth"), path, ds.get("label_column", "label"), synth, pre)
        if source.kind not in ("synth", "csv", "snapshot"):
            raise ConfigError(f"unknown dataset kind {source.kind!r}")
        if source.kind != "synth" and not path:
            raise ConfigError(f"dataset kind {source.kind!r} needs a path")
        mech_raw = raw.get("mechanism")
        if isinstance(mech_raw, str):
            mech_raw = {"kind": mech_raw}
        if not mech_raw:
            raise ConfigError("mechanism is required")
        mech = Mechanism(**mech_raw)
        attacks = []
        for a in raw.get("attacks") or []:
            attacks.append(AttackSpec(a) if isinstance(a, str) else AttackSpec(**a))
        audit = dict(raw.get("audit") or {})
        _check_keys(audit, _AUDIT_KEYS, "audit")
        if audit.get("delta_split"):
            raise ConfigError("delta_split (delta > 0 estimation) is not supported")
        kp = audit.get("k_policy", "default")
        if kp == "default":
            k_policy = KPolicy.default()
        elif isinstance(kp, int):
            k_policy = KPolicy.constant(kp)
        else:
            k_policy = KPolicy.from_json(kp)
        return RunConfig(
            dataset=source,
            mechanism=mech,
            attacks=tuple(attacks),
            eps_grid=tuple(float(e) for e in raw.get("eps_grid", DEFAULT_EPS_GRID)),
            replicates=int(raw.get("replicates", 3)),
            samples_n=int(audit.get("samples_n", 10_000)),
            alpha=float(audit.get("alpha", 0.05)),
            min_prob_r=audit.get("min_prob_r"),
            k_policy=k_policy,
            neighbor_def=NeighborDef(audit.get("neighbor_def", "replace_one")),
            hidden_units=int(audit.get("hidden_units", 0)),
            posterior_ridge=float(audit.get("posterior_ridge", 1e-4)),
            delta=float(audit.get("delta", 0.0)),
            lr_c=audit.get("lr_c"),
            seed=int(raw.get("seed", 0)),
            out=str(raw.get("out", "dpaudit-out")),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return parse_run_config(raw, os.path.dirname(os.path.abspath(path)))


def load_source(source: DatasetSource, mechanism: Mechanism):
    """Loads and preprocesses the configured dataset; failures are config errors."""
    try:
        return _load_source(source, mechanism)
    except (OSError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"dataset: {exc}") from exc


def _load_source(source: DatasetSource, mechanism: Mechanism):
    if source.kind == "synth":
        s = source.synth
        data = synth_blobs(int(s["n"]), int(s["d"]), float(s["separation"]), int(s.get("seed", 0)),
                           s.get("scales"))
    elif source.kind == "csv":
        data = load_csv(source.path, source.label_column)
    else:
        data = load_dataset(source.path)
    pre = source.preprocess
    if pre is None:
        if source.kind == "csv":
            raise ConfigError("csv datasets need a preprocess section")
        return data
    if mechanism.kind is MechanismKind.RANDOM_FOREST and pre.drop_categorical_for_rf is False:
        pre = dataclasses.replace(pre, drop_categorical_for_rf=True)
    return preprocess(data, pre)


# ---------------------------------------------------------------------------
# Grid execution
# ---------------------------------------------------------------------------


def _audit_seed(run_seed: int, attack_idx: int, eps_idx: int, replicate: int) -> int:
    return derive_uint64(run_seed, attack_idx, eps_idx, replicate)


def _run_one(cfg: RunConfig, data, attack_idx: int, eps_idx: int, replicate: int):
    attack = cfg.attacks[attack_idx]
    eps = cfg.eps_grid[eps_idx]
    seed = _audit_seed(cfg.seed, attack_idx, eps_idx, replicate)
    acfg = cfg.audit_config(eps, seed)
    row = {
        "mechanism": cfg.mechanism.kind.value,
        "attack": attack.kind.value,
        "epsilon": eps,
        "k": select_k(eps, cfg.k_policy),
        "replicate": replicate,
        "seed": seed,
    }
    start = time.perf_counter()
    try:
        res = audit_pair(data, cfg.mechanism, attack, acfg, cfg.lr_params())
    except AuditError as exc:
        row.update(status="error", stage=exc.stage, error=str(exc), eps_lb=None, n1=None, n0=None,
                   N=cfg.samples_n, used_complement=None, threshold=None)
        return row, time.perf_counter() - start
    ceiling = katz_lower_supremum(cfg.samples_n, cfg.alpha)
    if res.eps_lb * res.k > ceiling + 1e-9:
        raise AssertionError(f"eps_lb {res.eps_lb} * k exceeds the detectable ceiling {ceiling}")
    row.update(status="ok", eps_lb=_num(res.eps_lb), n1=res.n1, n0=res.n0, N=res.samples_n,
               used_complement=res.used_complement, threshold=res.threshold_t,
               search_eps_lb=_num(res.search_eps_lb),
               interval=[_num(res.interval.lower), _num(res.interval.upper)],
               witness=res.witness)
    return row, time.perf_counter() - start


def _num(v):
    if v is None:
        return None
    if math.isinf(v):
        return "-inf" if v < 0 else "inf"
    return float(v)


def _as_float(v) -> float:
    if v is None:
        return math.nan
    if isinstance(v, str):
        return float(v)
    return float(v)


def run_grid(cfg: RunConfig, workers: int = 1, data=None):
    """Runs every (attack, epsilon, replicate) audit.

    Returns (rows, timings) ordered by (attack, epsilon, replicate) no
    matter how the audits were scheduled.
    """
    if data is None:
        data = load_source(cfg.dataset, cfg.mechanism)
    jobs = [(a, e, r) for a in range(len(cfg.attacks)) for e in range(len(cfg.eps_grid))
            for r in range(cfg.replicates)]
    if workers <= 1:
        outs = [_run_one(cfg, data, *j) for j in jobs]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_one, cfg, data, *j) for j in jobs]
            outs = [f.result() for f in futures]
    return [o[0] for o in outs], [o[1] for o in outs]


def summarize_rows(rows, cfg: RunConfig):
    """Median eps_lb per (attack, epsilon) plus the plotting reference."""
    out = []
    for attack in cfg.attacks:
        for eps in cfg.eps_grid:
            vals = [_as_float(r["eps_lb"]) for r in rows
                    if r["attack"] == attack.kind.value and r["epsilon"] == eps and r["status"] == "ok"]
            k = select_k(eps, cfg.k_policy)
            ceiling = max_detectable_eps(cfg.samples_n, cfg.alpha) / k
            out.append({
                "attack": attack.kind.value,
                "epsilon": eps,
                "k": k,
                "replicates_ok": len(vals),
                "median_eps_lb": float(np.median(vals)) if vals else math.nan,
                "max_detectable": ceiling,
                "reference": min(eps, ceiling),
            })
    return out


def write_report(rows, timings, cfg: RunConfig, out_dir: str, workers: int) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    header = {
        "type": "header",
        "schema": REPORT_SCHEMA,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
        "config": cfg.to_json_dict(),
    }
    paths = {k: os.path.join(out_dir, f) for k, f in
             (("report", "report.jsonl"), ("summary", "summary.csv"), ("timings", "timings.csv"))}
    with open(paths["report"], "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps(dict(row, type="row"), sort_keys=True) + "\n")
    summary = summarize_rows(rows, cfg)
    with open(paths["summary"], "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary[0]))
        w.writeheader()
        w.writerows(summary)
    with open(paths["timings"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["attack", "epsilon", "replicate", "wall_time_s", "workers"])
        for row, t in zip(rows, timings):
            w.writerow([row["attack"], row["epsilon"], row["replicate"], f"{t:.3f}", workers])
    return paths


def coverage_report(p1_grid=COVERAGE_P1, n_grid=COVERAGE_N, alpha: float = 0.05,
                    trials: int = 10_000, seed: int = 0):
    """Coverage of both interval methods at p0 = p1 for every grid point."""
    rows = []
    methods = (IntervalMethod.KATZ_LOG, IntervalMethod.CLOPPER_PEARSON_RATIO)
    for i, p1 in enumerate(p1_grid):
        for j, n in enumerate(n_grid):
            for mi, method in enumerate(methods):
                cov = coverage_simulate(p1, p1, int(n), alpha, trials, method,
                                        derive_rng(seed, i, j, mi))
                rows.append({"p1": p1, "p0": p1, "N": int(n), "alpha": alpha, "trials": trials,
                             "method": method.value, "coverage": cov})
    return rows


def write_coverage_csv(rows, path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpaudit", description="Audit differentially private learners.")
    sub = p.add_subparsers(dest="command", required=True)
    a = sub.add_parser("audit", help="run the audit grid from a config file")
    a.add_argument("config")
    c = sub.add_parser("coverage", help="interval coverage simulation")
    c.add_argument("--alpha", type=float, default=0.05)
    c.add_argument("--trials", type=int, default=10_000)
    c.add_argument("--p1", type=float, nargs="+", default=list(COVERAGE_P1))
    c.add_argument("--n", type=int, nargs="+", default=list(COVERAGE_N))
    i = sub.add_parser("inspect", help="print the attack witness for one pair")
    i.add_argument("config")
    i.add_argument("--attack", default=None, help="attack kind (default: first in config)")
    i.add_argument("--epsilon", type=float, default=None, help="epsilon (default: first in grid)")
    for s in (a, c, i):
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--workers", type=int, default=1)
        s.add_argument("--out", default=None)
    return p


def _cmd_audit(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = args.out or cfg.out
    rows, timings = run_grid(cfg, args.workers)
    paths = write_report(rows, timings, cfg, out, args.workers)
    n_err = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} audits, {n_err} errors; report: {paths['report']}")
    return EXIT_AUDIT_ERROR if n_err else EXIT_OK


def _cmd_coverage(args) -> int:
    if args.trials < 1000:
        raise ConfigError("--trials must be >= 1000")
    if not 0 < args.alpha <= 0.5:
        raise ConfigError("--alpha must lie in (0, 0.5]")
    rows = coverage_report(args.p1, args.n, args.alpha, args.trials, args.seed or 0)
    path = os.path.join(args.out or ".", "coverage.csv")
    write_coverage_csv(rows, path)
    for r in rows:
        print(f"p1={r['p1']:<6} N={r['N']:<6} {r['method']:<22} {r['coverage']:.4f}")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    cfg = load_run_config(args.config)
    attack = cfg.attacks[0] if args.attack is None else AttackSpec(args.attack)
    eps = cfg.eps_grid[0] if args.epsilon is None else args.epsilon
    seed = cfg.seed if args.seed is None else args.seed
    data = load_source(cfg.dataset, cfg.mechanism)
    k = select_k(eps, cfg.k_policy)
    pair = run_attack(data, dataclasses.replace(attack, k=k), cfg.neighbor_def,
                      derive_rng(_audit_seed(seed, 0, 0, 0), Phase.ATTACK), cfg.lr_params())
    print(json.dumps({"epsilon": eps, "k": k, "n_original": pair.original.n,
                      "n_poisoned": pair.poisoned.n, "witness": pair.witness}, indent=2, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {"audit": _cmd_audit, "coverage": _cmd_coverage, "inspect": _cmd_inspect}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except AuditError as exc:
        print(f"audit error: {exc}", file=sys.stderr)
        return EXIT_AUDIT_ERROR
    except Exception as exc:  # data problems surface as audit failures
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_AUDIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
