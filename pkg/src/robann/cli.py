"""``robann`` command line: run experiments from a YAML config, print beta curves.

Exit codes: 0 success, 1 the experiment failed, 2 the config is invalid.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import math
import os
import sys
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np
import yaml
from scipy.stats import binomtest

from .fair import FairLSH
from .forall import ForAllHammingANN
from .harness import (
    ADVERSARIES,
    GameConfig,
    NullSearcher,
    OracleSearcher,
    failure_rate,
    fairness_test,
    planted_instance,
    run_game,
)
from .lsh import RHO_FUNCTIONS, ClassicLSH
from .metric import Dataset, Metric, ProblemParams, read_dataset
from .rng import derive_seed, stream
from .robust import AnnuliANN, BucketedANN, RelaxedFairANN, RobustDecider, exponent_optimize

KINDS = ("game", "fairness", "beta-curve", "forall-exhaustive", "decider-accuracy")
TOP_KEYS = {"kind", "seed", "params", "dataset", "searcher", "adversary", "games", "trials", "query",
            "beta", "forall", "schedule", "constants", "output"}

SEARCHERS = {
    "classic": ClassicLSH,
    "fair": FairLSH,
    "robust-decider": RobustDecider,
    "bucketed": BucketedANN,
    "annuli": AnnuliANN,
    "relaxed": RelaxedFairANN,
    "forall": ForAllHammingANN,
    "oracle": OracleSearcher,
    "null": NullSearcher,
}

# constant name -> (default, searcher names, estimator parameter)
CONSTANTS = {
    "fair_table_const": (1.0, ("fair",), "boost_const"),
    "fair_reject_const": (100.0, ("fair", "annuli", "relaxed"), "reject_const"),
    "decider_copies": (None, ("robust-decider", "bucketed"), "n_copies"),
    "decider_k_sub": (None, ("robust-decider", "bucketed"), "k_sub"),
    "decider_copy_success": (0.95, ("robust-decider", "bucketed"), "copy_success"),
    "annuli_eta": (0.001, ("annuli",), "eta"),
    "annuli_good_threshold": (0.999, ("annuli",), "good_threshold"),
    "annuli_pool_size": (None, ("annuli",), "pool_size"),
    "annuli_samples": (None, ("annuli",), "n_samples"),
    "annuli_trunc_const": (4.0, ("annuli",), "trunc_const"),
    "relaxed_budget_const": (100.0, ("relaxed",), "budget_const"),
    "forall_table_const": (1.0, ("forall",), "table_const"),
    "forall_sample_const": (1.0, ("forall",), "sample_const"),
}

SCHEMA = {
    "beta.csv": [
        ("rho", "exponent function: hamming_opt, l2_opt or bit_sampling"),
        ("c", "approximation factor"),
        ("k_star", "integer number of annuli minimizing the exponent"),
        ("beta", "max(rho(c^(1/k_star)), 1/k_star)"),
        ("k_continuous", "real k where rho(c^(1/k)) = 1/k"),
    ],
    "fairness.csv": [
        ("id", "point id in the r-ball"),
        ("count", "times the id was returned"),
    ],
    "forall.csv": [
        ("d", "dimension"),
        ("build", "build index"),
        ("seed", "setup seed of the build"),
        ("queries", "queries with a nonempty r-ball"),
        ("errors", "of those, queries answered wrongly"),
    ],
    "games.csv": [
        ("game", "game index"),
        ("seed", "game seed"),
        ("rounds", "rounds played"),
        ("errors", "rounds judged wrong"),
        ("won", "1 when the adversary made the searcher fail"),
        ("charge_total", "sum of per-round work charges"),
    ],
}


class ConfigError(Exception):
    pass


def _version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


# -- config -------------------------------------------------------------------


def load_config(path, seed: int | None = None) -> dict:
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping")
    unknown = sorted(set(cfg) - TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    kind = cfg.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"kind: expected one of {', '.join(KINDS)}, got {kind!r}")
    if seed is not None:
        cfg["seed"] = seed
    cfg.setdefault("seed", 0)
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed: must be an integer")
    consts = cfg.get("constants") or {}
    if not isinstance(consts, dict):
        raise ConfigError("constants: must be a mapping")
    for key in consts:
        if key not in CONSTANTS:
            raise ConfigError(f"constants: unknown override key {key!r}")
    cfg["constants"] = {k: consts.get(k, v[0]) for k, v in CONSTANTS.items()}
    return cfg


def _section(cfg, key, default=None) -> dict:
    sec = cfg.get(key, default)
    if sec is None:
        return {}
    if not isinstance(sec, dict):
        raise ConfigError(f"{key}: must be a mapping")
    return dict(sec)


def _params(cfg) -> ProblemParams:
    p = _section(cfg, "params")
    extra = sorted(set(p) - {"c", "r", "Q", "delta"})
    if extra:
        raise ConfigError(f"params: unknown key {extra[0]!r}")
    try:
        return ProblemParams(float(p.get("c", 2.0)), float(p.get("r", 1.0)), int(p.get("Q", 1)),
                             float(p.get("delta", 0.0025)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"params: {exc}") from exc


def _dataset(cfg, params: ProblemParams):
    """``(X, query or None)`` from ``dataset: {path | random | planted}``."""
    sec = _section(cfg, "dataset")
    if len(sec) != 1:
        raise ConfigError("dataset: give exactly one of path, random, planted")
    (how, source), = sec.items()
    seed = derive_seed(cfg["seed"], "dataset")
    if how == "path":
        try:
            ds = read_dataset(source)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"dataset.path: {exc}") from exc
        if not ds.metric.is_hamming:
            raise ConfigError("dataset.path: experiments run on Hamming data")
        return ds.points, None
    if how not in ("random", "planted") or not isinstance(source, dict) or set(source) - {"n", "d"}:
        raise ConfigError(f"dataset.{how}: expected a mapping with n and d")
    n, d = int(source.get("n", 0)), int(source.get("d", 0))
    if n < 1 or d < 1:
        raise ConfigError(f"dataset.{how}: n and d must be positive")
    if how == "random":
        return stream(seed, "random").integers(0, 2, size=(n, d), dtype=np.uint8), None
    inst = planted_instance(n, d, int(params.r), params.c, seed)
    return inst.X, inst.q


def _searcher(cfg, params: ProblemParams, default: str):
    sec = _section(cfg, "searcher")
    name = sec.pop("name", default)
    if name not in SEARCHERS:
        raise ConfigError(f"searcher.name: unknown searcher {name!r}")
    cls = SEARCHERS[name]
    est = cls()
    valid = est.get_params()
    kwargs = {k: v for k, v in {"c": params.c, "r": params.r, "Q": params.Q, "delta": params.delta}.items()
              if k in valid}
    for const, (default_val, owners, pname) in CONSTANTS.items():
        if name in owners:
            kwargs[pname] = cfg["constants"][const]
    for k, v in sec.items():
        if k not in valid or k == "seed":
            raise ConfigError(f"searcher: unknown key {k!r} for {name}")
        kwargs[k] = v
    return est.set_params(**kwargs), name


def _adversary(cfg):
    sec = _section(cfg, "adversary")
    name = sec.pop("name", "oblivious-random")
    if name not in ADVERSARIES:
        raise ConfigError(f"adversary.name: unknown strategy {name!r}")
    try:
        return ADVERSARIES[name](**sec)
    except TypeError as exc:
        raise ConfigError(f"adversary: {exc}") from exc


def _schedule(cfg, d: int) -> dict:
    out: dict = {}
    for i, op in enumerate(cfg.get("schedule") or []):
        if not isinstance(op, dict) or set(op) - {"round", "op", "point", "id"}:
            raise ConfigError(f"schedule[{i}]: expected round, op and point or id")
        kind = op.get("op")
        if kind == "insert":
            pt = str(op.get("point", ""))
            if len(pt) != d or set(pt) - {"0", "1"}:
                raise ConfigError(f"schedule[{i}].point: need a {d}-bit string")
            arg = np.array([int(ch) for ch in pt], dtype=np.uint8)
        elif kind == "delete":
            arg = int(op.get("id", -1))
        else:
            raise ConfigError(f"schedule[{i}].op: expected insert or delete")
        out.setdefault(int(op.get("round", 0)), []).append((kind, arg))
    return out


def _int(cfg, key, default) -> int:
    v = cfg.get(key, default)
    if not isinstance(v, int) or v < 1:
        raise ConfigError(f"{key}: must be a positive integer")
    return v


# -- outputs -------------------------------------------------------------------


class Outputs:
    """Files are written to a temporary name and renamed when complete."""

    def __init__(self, out_dir, meta: dict):
        self.dir = Path(out_dir)
        self.meta = meta
        self.dir.mkdir(parents=True, exist_ok=True)
        marker = self.dir / "FAILED"
        if marker.exists():
            marker.unlink()

    def _write(self, name: str, text: str) -> None:
        tmp = self.dir / (name + ".tmp")
        tmp.write_text(text)
        os.replace(tmp, self.dir / name)

    def csv(self, name: str, header: list[str], rows) -> None:
        buf = io.StringIO()
        buf.write(f"# robann {self.meta['version']}\n")
        buf.write(f"# seed={self.meta['seed']}\n")
        buf.write(f"# constants={json.dumps(self.meta['constants'], sort_keys=True)}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
        self._write(name, buf.getvalue())

    def json(self, name: str, obj: dict) -> None:
        self._write(name, json.dumps({"meta": self.meta, **obj}, indent=2, sort_keys=True) + "\n")

    def text(self, name: str, text: str) -> None:
        self._write(name, text)

    def fail(self, msg: str) -> None:
        (self.dir / "FAILED").write_text(msg + "\n")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


# -- experiments ---------------------------------------------------------------


def _beta_rows(c_min: float, c_max: float, step: float, rhos):
    if not (c_min > 1 and c_max >= c_min and step > 0):
        raise ConfigError("beta: need 1 < c_min <= c_max and step > 0")
    n_steps = int(math.floor((c_max - c_min) / step + 1e-9))
    for rho in rhos:
        if rho not in RHO_FUNCTIONS:
            raise ConfigError(f"beta.rho: unknown exponent {rho!r}")
        for i in range(n_steps + 1):
            c = c_min + i * step
            rep = exponent_optimize(c, rho)
            yield [rho, c, rep.k_star, rep.beta, rep.k_continuous]


def run_beta_curve(cfg, out: Outputs) -> dict:
    sec = _section(cfg, "beta")
    if set(sec) - {"c_min", "c_max", "step", "rho", "c_values"}:
        raise ConfigError(f"beta: unknown key {sorted(set(sec) - {'c_min', 'c_max', 'step', 'rho', 'c_values'})[0]!r}")
    rhos = sec.get("rho", ["hamming_opt", "l2_opt"])
    rhos = [rhos] if isinstance(rhos, str) else list(rhos)
    if "c_values" in sec:
        rows = []
        for rho in rhos:
            if rho not in RHO_FUNCTIONS:
                raise ConfigError(f"beta.rho: unknown exponent {rho!r}")
            for c in sec["c_values"]:
                rep = exponent_optimize(float(c), rho)
                rows.append([rho, float(c), rep.k_star, rep.beta, rep.k_continuous])
    else:
        rows = list(_beta_rows(float(sec.get("c_min", 1.5)), float(sec.get("c_max", 10.0)),
                               float(sec.get("step", 0.5)), rhos))
    out.csv("beta.csv", [h for h, _ in SCHEMA["beta.csv"]], rows)
    summary = {"rows": len(rows)}
    out.json("summary.json", summary)
    return summary


def run_games(cfg, out: Outputs, default_searcher="fair", task="ann") -> dict:
    params = _params(cfg)
    X, _ = _dataset(cfg, params)
    est, name = _searcher(cfg, params, default_searcher)
    adv = _adversary(cfg)
    games = _int(cfg, "games", 1)
    schedule = _schedule(cfg, X.shape[1])
    rows, lines, charges = [], [], []
    wins = 0
    for g in range(games):
        seed = derive_seed(cfg["seed"], "game", g)
        gc = GameConfig(X, est, adv, params, params.Q, seed, schedule, task)
        tr = run_game(gc)
        wins += tr.adversary_won
        ch = sum(rd.charge for rd in tr.rounds)
        charges.extend(rd.charge for rd in tr.rounds)
        rows.append([g, seed, len(tr.rounds), tr.n_errors, tr.adversary_won, ch])
        for rec in tr.to_jsonl().splitlines():
            lines.append(json.dumps({"game": g, **json.loads(rec)}, sort_keys=True))
    ci = binomtest(wins, games).proportion_ci(confidence_level=0.95, method="wilson")
    out.csv("games.csv", [h for h, _ in SCHEMA["games.csv"]], rows)
    out.text("transcripts.jsonl", "".join(ln + "\n" for ln in lines))
    summary = {
        "searcher": name,
        "adversary": adv.name,
        "task": task,
        "games": games,
        "wins": wins,
        "win_rate": wins / games,
        "ci_low": float(ci.low),
        "ci_high": float(ci.high),
        "charge_mean": float(np.mean(charges)) if charges else 0.0,
        "charge_max": int(max(charges)) if charges else 0,
    }
    out.json("summary.json", summary)
    return summary


def run_fairness(cfg, out: Outputs) -> dict:
    params = _params(cfg)
    X, q = _dataset(cfg, params)
    if "query" in cfg:
        qs = str(cfg["query"])
        if len(qs) != X.shape[1] or set(qs) - {"0", "1"}:
            raise ConfigError(f"query: need a {X.shape[1]}-bit string")
        q = np.array([int(ch) for ch in qs], dtype=np.uint8)
    if q is None:
        raise ConfigError("query: required unless the dataset is planted")
    est, _ = _searcher(cfg, params, "fair")
    est.set_params(seed=derive_seed(cfg["seed"], "searcher")).fit(X)
    trials = _int(cfg, "trials", 10_000)
    ds = Dataset(Metric.hamming(X.shape[1]), X)
    try:
        rep = fairness_test(est, ds, q, params.r, trials, stream(cfg["seed"], "fairness"))
    except ValueError as exc:
        raise ConfigError(f"trials: {exc}") from exc
    out.csv("fairness.csv", ["id", "count"], zip(rep.ball, rep.counts))
    summary = {"ball": list(rep.ball), "statistic": rep.statistic, "p_value": rep.p_value,
               "invalid": rep.invalid, "skipped": rep.skipped, "trials": trials}
    out.json("summary.json", summary)
    return summary


def run_forall(cfg, out: Outputs) -> dict:
    params = _params(cfg)
    sec = _section(cfg, "forall")
    if set(sec) - {"d", "n", "builds"}:
        raise ConfigError("forall: keys are d, n, builds")
    dims = sec.get("d", [6, 8])
    dims = [dims] if isinstance(dims, int) else list(dims)
    n = int(sec.get("n", 32))
    builds = int(sec.get("builds", 100))
    rows = []
    ok = {}
    for d in dims:
        Qs = np.array(list(itertools.product((0, 1), repeat=d)), dtype=np.uint8)
        good = 0
        for b in range(builds):
            seed = derive_seed(cfg["seed"], "forall", d, b)
            X = stream(seed, "data").integers(0, 2, size=(n, d), dtype=np.uint8)
            est = ForAllHammingANN(c=params.c, r=params.r, table_const=cfg["constants"]["forall_table_const"],
                                   seed=seed).fit(X)
            errors = 0
            need = 0
            ds = est.dataset_
            for q in Qs:
                _, dist = ds.distances(q)
                if not (dist <= params.r).any():
                    continue
                need += 1
                ans = est.query(q)
                if ans is None or dist[ans] > params.cr:
                    errors += 1
            good += errors == 0
            rows.append([d, b, seed, need, errors])
        ok[str(d)] = good
    out.csv("forall.csv", [h for h, _ in SCHEMA["forall.csv"]], rows)
    summary = {"builds": builds, "n": n, "all_correct_builds": ok}
    out.json("summary.json", summary)
    return summary


def run_decider_accuracy(cfg, out: Outputs) -> dict:
    cfg = dict(cfg)
    cfg.setdefault("adversary", {"name": "replay-worst"})
    return run_games(cfg, out, default_searcher="robust-decider", task="decision")


RUNNERS = {
    "game": run_games,
    "fairness": run_fairness,
    "beta-curve": run_beta_curve,
    "forall-exhaustive": run_forall,
    "decider-accuracy": run_decider_accuracy,
}


def run(config, seed=None, out_dir=None) -> int:
    try:
        cfg = load_config(config, seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out_sec = _section(cfg, "output") if isinstance(cfg.get("output"), dict) else {}
    target = out_dir or out_sec.get("dir") or "robann-out"
    meta = {"version": _version(), "seed": cfg["seed"], "kind": cfg["kind"], "constants": cfg["constants"]}
    out = Outputs(target, meta)
    try:
        summary = RUNNERS[cfg["kind"]](cfg, out)
    except ConfigError as exc:
        out.fail(f"config error: {exc}")
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure must leave a marker
        out.fail(f"{type(exc).__name__}: {exc}")
        print(f"experiment failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="robann", description="Adversarially robust ANN experiments")
    sub = ap.add_subparsers(dest="cmd", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_beta = sub.add_parser("beta", help="print the beta(c) curve as CSV")
    p_beta.add_argument("--c-min", type=float, required=True)
    p_beta.add_argument("--c-max", type=float, required=True)
    p_beta.add_argument("--step", type=float, required=True)
    p_beta.add_argument("--rho", choices=sorted(RHO_FUNCTIONS), default="hamming_opt")
    sub.add_parser("schema", help="describe the CSV columns")
    args = ap.parse_args(argv)
    if args.cmd == "run":
        return run(args.config, args.seed, args.out)
    if args.cmd == "beta":
        try:
            rows = list(_beta_rows(args.c_min, args.c_max, args.step, [args.rho]))
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow([h for h, _ in SCHEMA["beta.csv"]])
        for row in rows:
            w.writerow([_fmt(v) for v in row])
        return 0
    for name, cols in SCHEMA.items():
        print(name)
        for col, desc in cols:
            print(f"  {col}: {desc}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
