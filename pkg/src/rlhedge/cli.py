"""Command-line entry points: simulate, build-chain, pretrain, train-cs, train-cu, evaluate."""
from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from .benchmarks import (
    BSDeltaHedger,
    GarchDeltaHedger,
    PredVolDeltaHedger,
    quote_groups,
    run_benchmark,
)
from .chain import (
    BANDS,
    BSPricer,
    HNPricer,
    TradingCalendar,
    bs_episode_batch,
    build_chain,
    garch_episode_batch,
    list_strikes,
    load_option_csv,
    split_dataset,
    write_option_csv,
)
from .env import CostSpec, RewardSpec, rollout_batch
from .episode import EpisodeBatch, OptionEpisode
from .estimators import SmileCalibrator
from .exceptions import HedgeError, NumericError, ValidationError
from .market import GarchParams, GbmParams, garch_simulate_physical, gbm_simulate, write_paths_csv
from .risk import build_report
from .rl.agent import Agent
from .rl.train import (
    ContractSampler,
    EpochStats,
    MixtureSampler,
    PoolSampler,
    PretrainConfig,
    TrainConfig,
    epoch_seed,
    pretrain_initializer,
    train,
    write_curve,
)

log = logging.getLogger("rlhedge")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3

DEFAULTS: dict = {
    "seed": None,
    "model": "gbm",
    "experiment": "cs",
    "market": {
        "s0": 100.0,
        "gbm": {"mu": 0.1 / 252, "sigma": 0.2 / math.sqrt(252), "r": 0.03 / 365},
        "garch": {"lambda_rp": 0.2981, "omega_g": 3.4105e-07, "alpha_g": 9.6154e-06, "beta_g": 0.8168,
                  "gamma_g": 0.1497, "r": 0.03 / 365, "sigma1_sq": 0.006652 ** 2},
    },
    "contract": {"strike": 105.0, "maturity": 30, "is_call": True},
    "contracts": None,
    "data": {"option_csv": None, "split": None},
    "simulate": {"n_paths": 100, "n_steps": 30},
    "chain": {"start_date": "2008-01-02", "n_days": 2520, "is_call": True, "split": None},
    "reward": {"variant": "asymmetric", "lambda1": 1.0, "lambda2": 0.0, "alpha": 0.975},
    "cost": {"rate": 0.0},
    "network": {"hidden": 3, "width": 32},
    "train": {},
    "init": None,
    "pretrain": {"epochs": 200, "minibatch": 512, "lr": 1e-3, "n_paths": 2000, "teacher": "bs-delta"},
    "evaluate": {"n_paths": 100000, "seed": None, "checkpoint": None, "strategies": ["rl", "bs-delta"],
                 "reference": None, "bootstrap": 1000, "stochastic": False},
}

TEACHERS = ("bs-delta", "predvol-delta", "garch-delta")
BENCHMARKS = ("bs-delta", "predvol-delta", "garch-delta", "lvf-delta", "sabr-delta")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in base:
            raise ValidationError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and key != "train" and isinstance(val, dict):
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def load_config(path: Optional[str], seed: Optional[int] = None, out: Optional[str] = None) -> dict:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ValidationError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ValidationError(f"cannot parse config: {exc}") from None
        if not isinstance(raw, dict):
            raise ValidationError("config must be a mapping")
    cfg = _merge(DEFAULTS, raw)
    if seed is not None:
        cfg["seed"] = seed
    if cfg["seed"] is None:
        raise ValidationError("a seed is required (config key 'seed' or --seed)")
    cfg["seed"] = int(cfg["seed"])
    if out is not None:
        cfg["out"] = str(out)
    cfg.setdefault("out", "out")
    if cfg["model"] not in ("gbm", "garch"):
        raise ValidationError(f"model must be gbm or garch, got {cfg['model']!r}")
    if cfg["experiment"] not in ("cs", "cu", "benchmark-only"):
        raise ValidationError(f"unknown experiment {cfg['experiment']!r}")
    for key in ("option_csv",):
        f = cfg["data"][key]
        if f is not None and not Path(f).is_file():
            raise ValidationError(f"data file not found: {f}")
    if cfg["init"] is not None and not Path(cfg["init"]).is_file():
        raise ValidationError(f"initializer checkpoint not found: {cfg['init']}")
    # construct once so that bad parameters surface as validation errors
    try:
        train_config(cfg)
        reward_spec(cfg)
        cost_spec(cfg)
        market_params(cfg)
    except TypeError as exc:
        raise ValidationError(f"bad parameter set: {exc}") from None
    return cfg


def market_params(cfg):
    m = cfg["market"]
    if cfg["model"] == "gbm":
        return GbmParams(**m["gbm"])
    g = {k: v for k, v in m["garch"].items() if k != "sigma1_sq"}
    return GarchParams(**g)


def train_config(cfg) -> TrainConfig:
    return TrainConfig.from_dict({"seed": cfg["seed"], **cfg["train"]})


def reward_spec(cfg) -> RewardSpec:
    return RewardSpec(**cfg["reward"])


def cost_spec(cfg) -> CostSpec:
    return CostSpec(cfg["cost"]["rate"])


def _contracts(cfg) -> List[dict]:
    if cfg["experiment"] == "cu" and cfg["contracts"]:
        return [{"is_call": True, **c} for c in cfg["contracts"]]
    return [cfg["contract"]]


def _sim_batch(cfg, contract: dict, n_paths: int, seed: int) -> EpisodeBatch:
    params = market_params(cfg)
    s0 = cfg["market"]["s0"]
    k, T, call = float(contract["strike"]), int(contract["maturity"]), bool(contract.get("is_call", True))
    if cfg["model"] == "gbm":
        return bs_episode_batch(params, s0, k, T, n_paths, seed, call)
    return garch_episode_batch(params, s0, cfg["market"]["garch"]["sigma1_sq"], k, T, n_paths, seed, call)


def _sim_universe(cfg, n_paths: int, seed: int) -> EpisodeBatch:
    parts = [_sim_batch(cfg, c, n_paths, epoch_seed(seed, i, 7)) for i, c in enumerate(_contracts(cfg))]
    return EpisodeBatch.concat(parts)


def _split_by_date(episodes: List[OptionEpisode], split) -> Dict[str, List[OptionEpisode]]:
    """Chronological split with ISO dates mapped into the episodes' own date index."""
    if not split:
        return {"train": episodes, "validation": [], "test": episodes}
    lookup = {}
    for e in episodes:
        if e.dates is not None:
            for j, d in enumerate(e.dates):
                lookup[d] = e.today + j
    keys = np.array(sorted(lookup))
    idx = [int(lookup[keys[i]]) if i < len(keys) else int(max(lookup.values())) + 1
           for i in (int(np.searchsorted(keys, np.datetime64(split[n], "D"))) for n in ("d1", "d2", "d3"))]
    s = split_dataset(episodes, *idx)
    return {"train": s.train, "validation": s.validation, "test": s.test}


def _csv_episodes(cfg, part: str) -> List[OptionEpisode]:
    eps = load_option_csv(cfg["data"]["option_csv"])
    chosen = _split_by_date(eps, cfg["data"]["split"])[part]
    if not chosen:
        raise ValidationError(f"no episodes in the {part} split of {cfg['data']['option_csv']}")
    return chosen


def _is_call(cfg) -> bool:
    return bool(_contracts(cfg)[0].get("is_call", True))


def _teacher(cfg, name):
    if name == "bs-delta":
        return BSDeltaHedger()
    if name == "predvol-delta":
        return PredVolDeltaHedger()
    if name == "garch-delta":
        return GarchDeltaHedger(market_params(cfg))
    raise ValidationError(f"unknown teacher {name!r}; expected one of {TEACHERS}")


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _outdir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg) -> Path:
    out = _outdir(cfg)
    n, T, s0, seed = cfg["simulate"]["n_paths"], cfg["simulate"]["n_steps"], cfg["market"]["s0"], cfg["seed"]
    params = market_params(cfg)
    if cfg["model"] == "gbm":
        paths = gbm_simulate(params, s0, T, n, seed)
    else:
        paths = garch_simulate_physical(params, s0, cfg["market"]["garch"]["sigma1_sq"], T, n, seed)
    target = out / "paths.csv"
    write_paths_csv(paths, target)
    return target


def _quote_rows(records: List[OptionEpisode]) -> List[dict]:
    rows = []
    for e in records:
        cp = "C" if e.contract.is_call else "P"
        expiry = str(e.dates[-1])
        for j in range(len(e.underlying)):
            price = repr(float(e.option_price[j]))
            rows.append({
                "date": str(e.dates[j]), "expiry": expiry, "option_id": e.contract.option_id, "cp_flag": cp,
                "strike": repr(float(e.contract.strike)), "best_bid": price, "best_ask": price,
                "underlying_close": repr(float(e.underlying[j])), "implied_vol": repr(float(e.implied_vol[j])),
                "delta": repr(float(e.delta[j])), "gamma": repr(float(e.gamma[j])),
                "vega": repr(float(e.vega[j])), "theta": repr(float(e.theta[j])), "rate": repr(float(e.rate[j])),
            })
    rows.sort(key=lambda r: (r["date"], r["option_id"]))
    return rows


def cmd_build_chain(cfg) -> Path:
    out = _outdir(cfg)
    ch = cfg["chain"]
    calendar = TradingCalendar(ch["start_date"], n_days=int(ch["n_days"]))
    params = market_params(cfg)
    s0 = cfg["market"]["s0"]
    n_steps = len(calendar) - 1
    if cfg["model"] == "gbm":
        path = gbm_simulate(params, s0, n_steps, 1, cfg["seed"])[0]
        pricer = BSPricer(params.sigma, params.r)
    else:
        path = garch_simulate_physical(params, s0, cfg["market"]["garch"]["sigma1_sq"], n_steps, 1, cfg["seed"])[0]
        pricer = HNPricer(params)
    records = build_chain(path, calendar, pricer, bool(ch["is_call"]), params.r)
    records.sort(key=lambda e: e.contract.option_id)
    write_option_csv(out / "options.csv", _quote_rows(records))
    subpaths = sum(e.n_steps for e in records)
    split = ch["split"]
    manifest = {"contracts": len(records), "episodes": subpaths,
                "first_listing_strikes": {b: list_strikes(float(path.prices[0]), b).tolist() for b in BANDS}}
    if split:
        eps = [sub for e in records for sub in _subpaths(e)]
        parts = _split_by_date(eps, split)
        counts = {k: len(v) for k, v in parts.items()}
        counts["dropped"] = subpaths - sum(counts.values())
        manifest["split"] = {"dates": split, "counts": counts}
    _write_json(out / "manifest.json", manifest)
    return out / "options.csv"


def _subpaths(e: OptionEpisode) -> List[OptionEpisode]:
    from .chain import extract_subpaths
    return extract_subpaths(e)


def _new_agent(cfg) -> Agent:
    mode = "cu" if cfg["experiment"] == "cu" else "cs"
    net = cfg["network"]
    return Agent.build(mode, _is_call(cfg), int(net["hidden"]), int(net["width"]), var_network=mode == "cu",
                       seed=cfg["seed"])


def _training_pool(cfg, n_paths: int, seed: int) -> EpisodeBatch:
    if cfg["data"]["option_csv"] is not None:
        return EpisodeBatch.from_episodes(_csv_episodes(cfg, "train"))
    return _sim_universe(cfg, n_paths, seed)


def cmd_pretrain(cfg) -> Path:
    out = _outdir(cfg)
    p = cfg["pretrain"]
    agent = _new_agent(cfg)
    pool = _training_pool(cfg, int(p["n_paths"]), epoch_seed(cfg["seed"], 0, 11))
    pcfg = PretrainConfig(int(p["epochs"]), int(p["minibatch"]), float(p["lr"]), cfg["seed"])
    report = pretrain_initializer(pool, _teacher(cfg, p["teacher"]), agent, pcfg, reward_spec(cfg),
                                  train_config(cfg).gamma)
    agent.meta["pretrained"] = p["teacher"]
    agent.save(out / "agent.json")
    _write_json(out / "pretrain_report.json", report)
    return out / "agent.json"


def _sampler(cfg, tcfg: TrainConfig):
    if cfg["data"]["option_csv"] is not None:
        return PoolSampler(EpisodeBatch.from_episodes(_csv_episodes(cfg, "train")), tcfg.buffer_size, cfg["seed"])
    contracts = _contracts(cfg)
    share = max(1, tcfg.buffer_size // len(contracts))
    params = market_params(cfg)
    s0 = cfg["market"]["s0"]
    sig1 = cfg["market"]["garch"]["sigma1_sq"] if cfg["model"] == "garch" else None
    samplers = [ContractSampler.for_buffer(params, s0, float(c["strike"]), int(c["maturity"]), share,
                                           seed=epoch_seed(cfg["seed"], i, 3), is_call=bool(c.get("is_call", True)),
                                           sigma1_sq=sig1)
                for i, c in enumerate(contracts)]
    return samplers[0] if len(samplers) == 1 else MixtureSampler(samplers)


def _train_command(cfg, mode: str, resume: bool) -> Path:
    if (mode == "cu") != (cfg["experiment"] == "cu"):
        raise ValidationError(f"train-{mode} needs experiment: {mode}")
    out = _outdir(cfg)
    tcfg = train_config(cfg)
    ckpt_path = out / "checkpoint.json"
    start, opt_state, prior = 0, None, []
    if resume and ckpt_path.is_file():
        ck = json.loads(ckpt_path.read_text())
        agent = Agent.from_dict(ck["agent"])
        start, opt_state = ck["epoch"] + 1, ck["optimizer"]
        prior = [EpochStats(**row) for row in ck["curve"]]
    elif cfg["init"] is not None:
        agent = Agent.load(cfg["init"])
    else:
        if cost_spec(cfg).proportional_rate > 0 and mode == "cu":
            log.warning("no initializer given for a transaction-cost run; using random initialization")
        agent = _new_agent(cfg)
    expected = "network" if mode == "cu" else "scalar"
    if agent.var_head.mode != expected:
        raise ValidationError(f"initializer has a {agent.var_head.mode} VaR head; train-{mode} needs {expected}")
    every = max(1, tcfg.epochs // 10)

    def on_epoch(k, ag, res):
        if (k + 1) % every == 0 or k + 1 == tcfg.epochs:
            _write_json(ckpt_path, {"agent": ag.to_dict(), "epoch": k, "optimizer": res.optimizer_state,
                                    "curve": [asdict(s) for s in prior + res.curve], "config": tcfg.to_dict()})

    result = train(agent, _sampler(cfg, tcfg), tcfg, reward_spec(cfg), cost_spec(cfg), start_epoch=start,
                   optimizer_state=opt_state, on_epoch=on_epoch)
    agent.meta["train_config"] = tcfg.to_dict()
    agent.save(out / "agent.json")
    write_curve(out / "curve.csv", prior + result.curve)
    return out / "agent.json"


def _test_data(cfg):
    ev = cfg["evaluate"]
    if cfg["data"]["option_csv"] is not None:
        eps = _csv_episodes(cfg, "test")
        return EpisodeBatch.from_episodes(eps), eps
    seed = ev["seed"] if ev["seed"] is not None else epoch_seed(cfg["seed"], 0, 99)
    return _sim_universe(cfg, int(ev["n_paths"]), int(seed)), None


def cmd_evaluate(cfg, checkpoint: Optional[str] = None) -> Path:
    out = _outdir(cfg)
    ev = cfg["evaluate"]
    batch, episodes = _test_data(cfg)
    cost = cost_spec(cfg)
    pnls: Dict[str, np.ndarray] = {}
    groups = None
    for name in ev["strategies"]:
        if name == "rl":
            if cfg["experiment"] == "benchmark-only":
                continue
            path = checkpoint or ev["checkpoint"]
            if path is None or not Path(path).is_file():
                raise ValidationError("evaluating the RL agent needs an existing checkpoint")
            agent = Agent.load(path)
            if ev["stochastic"]:
                policy = agent.stochastic_policy(update_normalizer=False)
                rng = np.random.default_rng([cfg["seed"], 5])
            else:
                policy, rng = agent.deterministic_policy(), None
            pnls["rl"] = rollout_batch(batch, policy, cost, RewardSpec(), rng, agent.state_kind).final_wealth
        elif name in ("lvf-delta", "sabr-delta"):
            if groups is None:
                recs = episodes if episodes is not None else [batch.episode(i) for i in range(len(batch))]
                groups = quote_groups(recs)
            cal = SmileCalibrator("lvf" if name == "lvf-delta" else "sabr").fit(groups)
            cal.to_csv(out / f"calibration_{name}.csv")
            pnls[name] = run_benchmark(batch, cal.hedger(), cost)
        elif name in BENCHMARKS:
            pnls[name] = run_benchmark(batch, _teacher(cfg, name), cost)
        else:
            raise ValidationError(f"unknown strategy {name!r}")
    if not pnls:
        raise ValidationError("no strategies to evaluate")
    ref = ev["reference"] if ev["reference"] is not None else ("bs-delta" if "bs-delta" in pnls else None)
    report = build_report(pnls, ref, B=int(ev["bootstrap"]), seed=cfg["seed"])
    report.to_csv(out / "report.csv")
    (out / "report.txt").write_text(report.to_text() + "\n")
    with (out / "pnl.csv").open("w") as fh:
        names = list(pnls)
        fh.write(",".join(names) + "\n")
        for row in zip(*(pnls[n] for n in names)):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    return out / "report.csv"


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

COMMANDS = ("simulate", "build-chain", "pretrain", "train-cs", "train-cu", "evaluate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rlhedge", description="Risk-averse RL option hedging experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--threads", type=int, default=1, help="cap on numerical library threads")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name.startswith("train"):
            p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.json")
        if name == "evaluate":
            p.add_argument("--checkpoint", help="agent checkpoint to evaluate")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise ValidationError("--threads must be >= 1")
        cfg = load_config(args.config, args.seed, args.out)
        with threadpool_limits(limits=args.threads):
            if args.command == "simulate":
                result = cmd_simulate(cfg)
            elif args.command == "build-chain":
                result = cmd_build_chain(cfg)
            elif args.command == "pretrain":
                result = cmd_pretrain(cfg)
            elif args.command in ("train-cs", "train-cu"):
                result = _train_command(cfg, args.command[-2:], args.resume)
            else:
                result = cmd_evaluate(cfg, args.checkpoint)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except HedgeError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(result)
    return EXIT_OK


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
