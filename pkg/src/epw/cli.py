"""Command-line harness: train, verify, sweep, hardness-demo, oracle-eval, export.

Exit codes: 0 success, 2 config error, 3 refusal (non-enumerable input or a
value over its cap), 4 internal-consistency failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import itertools
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    SCHEMA_VERSION,
    ConfigError,
    ExperimentConfig,
    apply_axes,
    experiment_from_dict,
    read_toml,
    sweep_from_dict,
    tomllib,
)
from .environments import TreeHardConfig, build_environment, make_tree_hard
from .learner import ASTRONOMICAL, Algorithm1Error, ErmConfig, run_algorithm1, theorem1_sample_size
from .mdp import StateKind, _stream_uniforms, derive_seed, sample_batch, simulate_tabular, uniform_policy
from .oracle import (
    ConsistencyError,
    check_generic_game,
    max_safe_set,
    min_epw_constant,
    occupancies,
    policy_value,
    population_loss,
    safe_occupancies,
    validate_certificate,
)
from .policies import ContractError, PolicyVector, make_family

log = logging.getLogger("epw")

EXIT_OK, EXIT_CONFIG, EXIT_REFUSAL, EXIT_CONSISTENCY = 0, 2, 3, 4
HARDNESS_MAX_H = 20
MC_EPISODES = 20_000
SUMMARY_COLUMNS = ["seed", "final_value_oracle", "success@eps", "value_source", "value_se"]
TIMING_COLUMNS = ["seed", "wall_time_ms"]
LEVEL_COLUMNS = [
    "level",
    "loss_before",
    "loss_after",
    "population_loss",
    "restart_chosen",
    "iterate_chosen",
    "failing",
    "safe_occupancy",
    "wall_time_ms",
]
_TAG_HARDNESS = 3


class Refusal(RuntimeError):
    """The request is well formed but outside what the tool will do."""


# ---------------------------------------------------------------------------
# helpers


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(path: Path, kind: str, config_hash: str, columns: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    buf.write(f"# epw-{kind} schema={SCHEMA_VERSION} config={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(x) for x in row])
    path.write_text(buf.getvalue())


def write_json(path: Path, kind: str, config_hash: str, payload: dict) -> None:
    body = {"schema": f"epw-{kind}/{SCHEMA_VERSION}", "config_hash": config_hash, **payload}
    path.write_text(json.dumps(body, indent=1, sort_keys=False, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if obj == ASTRONOMICAL:
        return "astronomical"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _env_spec(args) -> dict:
    if getattr(args, "instance", None):
        return {"name": "file", "path": args.instance}
    if getattr(args, "env", None):
        spec = {"name": args.env}
        for item in args.set or []:
            if "=" not in item:
                raise ConfigError(f"--set {item!r}: expected key=value")
            k, v = item.split("=", 1)
            spec[k.strip()] = _parse_value(v.strip())
        return spec
    if getattr(args, "config", None):
        data = read_toml(args.config)
        if "environment" not in data:
            raise ConfigError(f"{args.config}: missing [environment] table")
        return dict(data["environment"])
    raise ConfigError("give --config, --env or --instance")


def build_mdp(spec: dict):
    try:
        return build_environment(spec)
    except (TypeError, ValueError, KeyError, OSError) as exc:
        raise ConfigError(f"[environment]: {exc}") from exc


def _family_for(cfg_policy: dict, mdp):
    try:
        return make_family(cfg_policy, mdp.n_actions, mdp.state_dim)
    except (ContractError, ValueError) as exc:
        raise ConfigError(f"[policy]: {exc}") from exc


def _load_experiment(args) -> ExperimentConfig:
    data = read_toml(args.config) if args.config else {}
    if getattr(args, "env", None) or getattr(args, "instance", None):
        data["environment"] = _env_spec(args)
    cfg = experiment_from_dict(data)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.repeats is not None:
        if args.repeats < 0:
            raise ConfigError("--repeats must be >= 0")
        cfg.repeats = args.repeats
    if args.out is not None:
        cfg.out = args.out
    if args.cap_n is not None:
        cfg.learner.cap_n = args.cap_n
    return cfg


def resolve_n(cfg: ExperimentConfig, mdp, family, n_override: int | None, echo=print) -> int:
    """Per-level sample size: direct n, or the guaranteed sample-size formula under a cap."""
    lc = cfg.learner
    if lc.eps is None:
        if n_override is not None:
            log.warning("n override %d replaces configured n=%s", n_override, lc.n)
            return n_override
        return int(lc.n)
    rho = family.certified_lipschitz(mdp.state_norm_bound())
    n = theorem1_sample_size(lc.eps, lc.delta, mdp.horizon, mdp.n_actions, lc.window, family.dim, rho, family.bound)
    echo(f"n = {n if n != ASTRONOMICAL else 'astronomical (beyond int64)'}")
    if n_override is not None:
        if n_override != n:
            log.warning("using n=%d instead of the guaranteed n=%s; the guarantee no longer applies", n_override, n)
        return n_override
    if n > lc.cap_n:
        raise Refusal(f"guaranteed n={n} exceeds cap {lc.cap_n}; pass --n-override to run anyway")
    return int(n)


def monte_carlo_value(mdp, family, thetas, seed: int, episodes: int = MC_EPISODES) -> tuple[float, float]:
    wins = sample_batch(mdp, family, thetas, episodes, derive_seed(seed, 9)).returns()
    mean = float(wins.mean())
    return mean, float(math.sqrt(mean * (1 - mean) / episodes))


def _run_payload(payload):
    """One seeded run; module level so process pools can pickle it."""
    env_spec, policy, learner, seed, n, threads, eps = payload
    mdp = build_environment(env_spec)
    family = make_family(policy, mdp.n_actions, mdp.state_dim)
    erm = ErmConfig(**learner["erm"])
    try:
        thetas, record = run_algorithm1(
            mdp, family, n, learner["window"], seed, erm, workers=threads, diagnostics=mdp.enumerable
        )
    except Algorithm1Error as exc:
        if isinstance(exc.__cause__, ConsistencyError):
            raise exc.__cause__
        raise
    if mdp.enumerable:
        value, source, se = record.final_value, "oracle", 0.0
    else:
        value, se = monte_carlo_value(mdp, family, thetas, seed)
        source = "monte-carlo"
    return {
        "seed": seed,
        "value": value,
        "source": source,
        "se": se,
        "success": int(value >= 1.0 - eps),
        "record": record.to_dict(timings=True),
        "levels": [asdict(lv) for lv in record.levels],
        "policy": thetas,
        "wall_time_ms": record.wall_time_ms,
    }


def run_repeats(cfg: ExperimentConfig, n: int, workers: int = 1, threads: int = 1) -> list[dict]:
    """All repeats of one experiment, merged in seed order whatever the schedule."""
    learner = asdict(cfg.learner)
    payloads = [
        (cfg.environment, cfg.policy, learner, cfg.seed + k, n, threads, cfg.success_eps()) for k in range(cfg.repeats)
    ]
    if workers > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(min(workers, len(payloads))) as pool:
            results = list(pool.map(_run_payload, payloads))
    else:
        results = [_run_payload(p) for p in payloads]
    return sorted(results, key=lambda r: r["seed"])


def _workers(args) -> int:
    w = getattr(args, "workers", None) or 1
    if w == -1:
        return os.cpu_count() or 1
    return max(1, w)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = _load_experiment(args)
    mdp = build_mdp(cfg.environment)
    family = _family_for(cfg.policy, mdp)
    n = resolve_n(cfg, mdp, family, args.n_override)
    cfg.learner.n = n  # the hash covers the n actually used
    h = cfg.config_hash()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    results = run_repeats(cfg, n, _workers(args), args.threads)
    write_json(out / "config.json", "config", h, {"config": cfg.identity_dict(), "n": n})
    summary = [[r["seed"], r["value"], r["success"], r["source"], r["se"]] for r in results]
    write_csv(out / "summary.csv", "summary", h, SUMMARY_COLUMNS, summary)
    write_csv(out / "timings.csv", "timings", h, TIMING_COLUMNS, [[r["seed"], r["wall_time_ms"]] for r in results])
    for r in results:
        run_dir = out / "runs" / f"seed-{r['seed']}"
        run_dir.mkdir(parents=True, exist_ok=True)
        write_json(run_dir / "record.json", "run-record", h, r["record"])
        rows = [[lv[c] for c in LEVEL_COLUMNS] for lv in r["levels"]]
        write_csv(run_dir / "levels.csv", "levels", h, LEVEL_COLUMNS, rows)
        (run_dir / "policy.txt").write_text(r["policy"].dumps(config=h))
    if results:
        rate = sum(r["success"] for r in results) / len(results)
        print(f"{len(results)} runs, n={n}, success@{cfg.success_eps():g} = {rate:.3f}, wrote {out}")
    else:
        print(f"0 runs, wrote header-only summary to {out}")
    return EXIT_OK


def verify_report(mdp) -> dict:
    if not getattr(mdp, "enumerable", False):
        raise Refusal("verify needs an enumerable (tabular) instance")
    game = check_generic_game(mdp)
    safe = max_safe_set(mdp)
    cert = min_epw_constant(mdp, safe)
    return {
        "instance": {"name": mdp.name, "horizon": mdp.horizon, "n_actions": mdp.n_actions, "n_states": mdp.n_states},
        "generic_game": game.to_dict(),
        "epw": cert.to_dict(),
        "certificate_valid": validate_certificate(mdp, cert),
    }


def cmd_verify(args) -> int:
    spec = _env_spec(args)
    mdp = build_mdp(spec)
    report = verify_report(mdp)
    h = _hash_of({"verify": spec})
    g, e = report["generic_game"], report["epw"]
    if g["trivial_game"]:
        print("warning: failure set is empty, the game is trivial")
    print(f"generic game: passed={g['passed']} best_failure_prob={g['best_failure_prob']:.3g}")
    print(f"safe-set sizes per level: {e['safe_set_sizes']}")
    print(f"EPW: min_C = {e['min_c']} (certificate valid: {report['certificate_valid']})")
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_json(path, "verify", h, report)
    return EXIT_OK


def _hash_of(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def sweep_points(axes: dict, mode: str) -> list[dict]:
    names = list(axes)
    if not names:
        return [{}]
    combos = itertools.product(*axes.values()) if mode == "grid" else zip(*axes.values())
    return [dict(zip(names, c)) for c in combos]


def cmd_sweep(args) -> int:
    if not args.config:
        raise ConfigError("sweep needs --config with a [sweep] table")
    data = read_toml(args.config)
    sweep = sweep_from_dict(data)
    base = sweep.base
    if args.seed is not None:
        base.seed = args.seed
    if args.repeats is not None:
        base.repeats = args.repeats
    if args.out is not None:
        base.out = args.out
    if args.cap_n is not None:
        base.learner.cap_n = args.cap_n
    h = _hash_of({"base": base.identity_dict(), "axes": sweep.axes, "mode": sweep.mode})
    names = list(sweep.axes)
    rows, timing_rows = [], []
    for point in sweep_points(sweep.axes, sweep.mode):
        cfg = apply_axes(base, point)
        mdp = build_mdp(cfg.environment)
        family = _family_for(cfg.policy, mdp)
        n = resolve_n(cfg, mdp, family, args.n_override)
        results = run_repeats(cfg, n, _workers(args), args.threads)
        vals = [r["value"] for r in results]
        rate = float(np.mean([r["success"] for r in results])) if results else float("nan")
        mean_v = float(np.mean(vals)) if vals else float("nan")
        rows.append([point[k] for k in names] + [n, len(results), rate, mean_v])
        timing_rows.append([point[k] for k in names] + [float(np.mean([r["wall_time_ms"] for r in results])) if results else 0.0])
        print(" ".join(f"{k}={v}" for k, v in point.items()) + f" n={n} success_rate={rate:.3f} mean_value={mean_v:.4f}")
    out = Path(base.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "sweep.csv", "sweep", h, names + ["n", "runs", "success_rate", "mean_final_value"], rows)
    write_csv(out / "sweep_timings.csv", "sweep-timings", h, names + ["mean_wall_time_ms"], timing_rows)
    return EXIT_OK


def hardness_demo(horizon: int, budget: int, trials: int, seed: int = 0) -> dict:
    """Uniform random search on tree-hard: does any of ``budget`` episodes win?"""
    if horizon > HARDNESS_MAX_H:
        raise Refusal(f"H={horizon} is over the tractability cap {HARDNESS_MAX_H}")
    if budget < 0 or trials < 1:
        raise ConfigError("budget must be >= 0 and trials >= 1")
    mdp = make_tree_hard(TreeHardConfig(depth=horizon, seed=seed))
    pi = uniform_policy(mdp.n_actions)
    hits = []
    for k in range(trials):
        if budget == 0:
            hits.append(False)
            continue
        u = _stream_uniforms(derive_seed(seed, _TAG_HARDNESS, k), 0, budget, mdp.horizon)
        _, _, kinds = simulate_tabular(mdp, pi, u)
        hits.append(bool((kinds[:, -1] == StateKind.ORDINARY).any()))
    p = 2.0 ** -(horizon - 1)
    return {
        "horizon": horizon,
        "budget": budget,
        "trials": trials,
        "empirical_success_rate": float(np.mean(hits)),
        "analytic_success_prob": 1.0 - (1.0 - p) ** budget,
        "uniform_policy_value": policy_value(mdp, None, None),
        "episode_success_prob": p,
    }


def cmd_hardness_demo(args) -> int:
    seed = args.seed or 0
    rep = hardness_demo(args.horizon, args.budget, args.trials, seed)
    print(
        f"tree-hard H={rep['horizon']}: empirical success {rep['empirical_success_rate']:.3f} over {rep['trials']} "
        f"trials of {rep['budget']} episodes; analytic {rep['analytic_success_prob']:.4f}"
    )
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_json(path, "hardness", _hash_of({"hardness": [args.horizon, args.budget, args.trials, seed]}), rep)
    return EXIT_OK


def oracle_eval(mdp, family, what: str, policy: PolicyVector | None, t: int = 0, window: int = 0) -> dict:
    if not getattr(mdp, "enumerable", False):
        raise Refusal("oracle operations need an enumerable instance")
    fam = None if policy is None else family
    if policy is not None and policy.horizon != mdp.horizon:
        raise ConfigError(f"policy has {policy.horizon} slots, instance has horizon {mdp.horizon}")
    if what == "value":
        return {"policy_value": policy_value(mdp, fam, policy)}
    if what == "safe-set":
        safe = max_safe_set(mdp)
        return {"safe_set_sizes": safe.sizes(), "safe_occupancies": safe_occupancies(mdp, fam, policy, safe)}
    if what == "occupancy":
        dists, absorbed = occupancies(mdp, fam, policy)
        return {"absorbed_mass": absorbed, "level_mass": [float(d.sum()) for d in dists]}
    if what == "epw":
        return min_epw_constant(mdp).to_dict()
    if what == "generic":
        return check_generic_game(mdp).to_dict()
    if what == "loss":
        behavior = PolicyVector.uniform(family, mdp.horizon)
        theta = family.theta_rand() if policy is None else policy.slots[t]
        if policy is not None:
            behavior = PolicyVector(family.tag, policy.slots[:t] + behavior.slots[t:])
        return {"t": t, "window": window, "population_loss": population_loss(mdp, family, behavior, theta, t, window)}
    raise ConfigError(f"unknown oracle operation {what!r}")


def cmd_oracle_eval(args) -> int:
    spec = _env_spec(args)
    mdp = build_mdp(spec)
    policy_spec = {"family": "softmax-linear", "bound": 20.0}
    if args.config:
        policy_spec.update(read_toml(args.config).get("policy", {}))
    family = _family_for(policy_spec, mdp)
    policy = None
    if args.policy:
        try:
            policy = PolicyVector.loads(Path(args.policy).read_text())
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"--policy {args.policy}: {exc}") from exc
    result = oracle_eval(mdp, family, args.what, policy, args.t, args.window)
    text = json.dumps(result, indent=1, default=_json_default)
    print(text)
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_json(path, "oracle", _hash_of({"spec": spec, "what": args.what}), result)
    return EXIT_OK


def cmd_export(args) -> int:
    mdp = build_mdp(_env_spec(args))
    if not args.out:
        raise ConfigError("export needs --out <file>")
    mdp.save(args.out)
    print(f"wrote {mdp.name} instance ({mdp.n_states} states) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="epw", description="Effective-planning-window learning toolkit")
    p.add_argument("--version", action="version", version=f"epw {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def env_flags(sp):
        sp.add_argument("--config", help="TOML experiment config")
        sp.add_argument("--env", help="generator name (paddle, gates, tree-hard, random-epw)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="generator parameter")
        sp.add_argument("--instance", help="instance file written by 'export'")

    def run_flags(sp):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--repeats", type=int)
        sp.add_argument("--n-override", type=int, dest="n_override")
        sp.add_argument("--cap-n", type=int, dest="cap_n")
        sp.add_argument("--out")
        sp.add_argument("--workers", type=int, default=1, help="parallel repeats; -1 uses every core")
        sp.add_argument("--threads", type=int, default=1, help="sampling threads per run")

    sp = sub.add_parser("train", help="run the level-by-level learner")
    env_flags(sp)
    run_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("verify", help="check the game conditions and the minimal EPW constant")
    env_flags(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("sweep", help="run a grid or paired sweep")
    sp.add_argument("--config")
    run_flags(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("hardness-demo", help="uniform search on the hard tree")
    sp.add_argument("--horizon", type=int, default=12)
    sp.add_argument("--budget", type=int, default=200)
    sp.add_argument("--trials", type=int, default=20)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_hardness_demo)

    sp = sub.add_parser("oracle-eval", help="exact oracle quantities for an instance")
    env_flags(sp)
    sp.add_argument("--what", default="value", choices=["value", "safe-set", "occupancy", "epw", "generic", "loss"])
    sp.add_argument("--policy", help="policy file written by 'train'")
    sp.add_argument("--t", type=int, default=0)
    sp.add_argument("--window", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_oracle_eval)

    sp = sub.add_parser("export", help="write an instance file")
    env_flags(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Refusal as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_REFUSAL
    except ConsistencyError as exc:
        print(f"consistency failure: {exc}", file=sys.stderr)
        return EXIT_CONSISTENCY
    except ContractError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
