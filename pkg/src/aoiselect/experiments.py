"""Config-driven experiment runner writing CSV/JSON artifacts.

Each (policy, seed) cell is computed independently (optionally in worker
processes); rows are then sorted by (policy, seed, round) and written by a
single writer, so file bodies do not depend on execution order.
"""
from __future__ import annotations

import csv
import datetime as _dt
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import ExperimentConfig, resolved
from .core import (
    STREAM_POPULATION,
    STREAM_SELECTION,
    STREAM_TASK,
    ClientPopulation,
    RngSeed,
    zipf_dataset_sizes,
)
from .fedsim import LRSchedule, TrainingConfig, make_synthetic_task, run_federated
from .markov import (
    MarkovChainSpec,
    optimal_markov_chain,
    peak_age_distribution,
    stationary_distribution,
)
from .metrics import (
    EXACT_ENUMERATION_MAX_N,
    inter_selection_histogram,
    running_sigma,
    sigma_markov_exact,
    sigma_probabilistic_exact,
    sigma_random_uniform,
    sigma_random_weighted_exact,
    windowed_selection_stability,
)
from .policies import PolicyKind, PolicySpec, run_selection

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CSV_HEADERS = {
    "sigma.csv": ["round", "policy", "seed", "sigma_running", "sigma_exact"],
    "intervals.csv": ["policy", "gap", "count", "censored_count"],
    "stability.csv": ["policy", "T_window", "metric"],
    "train.csv": ["round", "policy", "seed", "loss_gap", "dist2", "selected_count"],
}


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def build_population(cfg: ExperimentConfig, seed: int) -> ClientPopulation:
    sm = cfg.population.size_model
    n = cfg.population.n
    if sm.kind == "zipf":
        d = zipf_dataset_sizes(n, sm.a, sm.d_min, RngSeed(seed, STREAM_POPULATION))
    else:
        d = np.full(n, sm.size, dtype=np.int64)
    return ClientPopulation.from_sizes(d, cfg.population.importance)


def build_policy(cfg: ExperimentConfig, index: int) -> PolicySpec:
    p = cfg.policies[index]
    return PolicySpec.build(p.kind, cfg.population.n, p.m, cfg.markov.m_prime, p.exact_m)


def exact_sigma(policy: PolicySpec, pop: ClientPopulation) -> Optional[float]:
    if policy.kind is PolicyKind.RANDOM_WEIGHTED:
        if np.all(pop.d == pop.d[0]):
            return sigma_random_uniform(pop.n, policy.m)
        if pop.n <= EXACT_ENUMERATION_MAX_N:
            return sigma_random_weighted_exact(pop.d, policy.m)
        return None
    if policy.kind is PolicyKind.PROBABILISTIC:
        return sigma_probabilistic_exact(pop.d / pop.d.sum(), policy.m)
    if policy.exact_m != "off":
        return None
    return sigma_markov_exact(pop.n, policy.chain)


def _selection_trace(cfg: ExperimentConfig, index: int, seed: int):
    pop = build_population(cfg, seed)
    policy = build_policy(cfg, index)
    trace = run_selection(pop, policy, cfg.rounds, cfg.resolved_burn_in(), RngSeed(seed, STREAM_SELECTION))
    return pop, policy, trace


def _cell(args):
    """Compute one (policy, seed) cell; returns plain data for the writer."""
    cfg_data, index, seed = args
    cfg = ExperimentConfig.model_validate(cfg_data)
    label = cfg.policies[index].kind.value
    kind = cfg.experiment
    if kind == "sigma":
        pop, policy, trace = _selection_trace(cfg, index, seed)
        exact = exact_sigma(policy, pop)
        return [(t, label, seed, float(s), exact) for t, s in enumerate(running_sigma(trace))]
    if kind == "intervals":
        _, _, trace = _selection_trace(cfg, index, seed)
        h = inter_selection_histogram(trace)
        return {"gaps": h.as_dict(), "censored": h.censored_count}
    if kind == "stability":
        _, _, trace = _selection_trace(cfg, index, seed)
        return {w: windowed_selection_stability(trace, w) for w in cfg.windows}
    if kind == "train":
        pop = build_population(cfg, seed)
        policy = build_policy(cfg, index)
        tc = cfg.task
        q = pop.q
        task = make_synthetic_task(
            pop.n, tc.dim, tc.heterogeneity, tc.spread, RngSeed(seed, STREAM_TASK),
            alpha=tc.alpha, curvature=tuple(tc.curvature), q=q,
        )
        tr = cfg.training
        if tr.schedule.kind == "decay":
            sched = LRSchedule.decay(tr.schedule.eta0, tr.schedule.rate)
        elif tr.schedule.shift is None:
            sched = LRSchedule.for_bound(task, tr.K)
        else:
            sched = LRSchedule.inverse(task.mu, tr.schedule.shift)
        tcfg = TrainingConfig(
            K=tr.K, batch_size=tr.batch_size, T=cfg.rounds, lr_schedule=sched,
            noise_sigma=tr.noise_sigma, seed=RngSeed(seed), target=tr.target,
        )
        trace = run_federated(task, policy, tcfg, population=pop, burn_in=cfg.resolved_burn_in())
        counts = trace.selected_counts
        return [
            (t, label, seed, float(trace.loss_gap[t]), float(trace.dist2[t]), int(counts[t]))
            for t in range(trace.T)
        ]
    raise ValueError(f"experiment {kind!r} has no per-cell work")


def markov_report(chain: MarkovChainSpec, regime: str, c: Optional[float] = None, n: Optional[int] = None) -> dict:
    pad = peak_age_distribution(chain)
    out = {
        "chain": chain.to_dict(),
        "pi": stationary_distribution(chain).pi.tolist(),
        "peak_age_head": pad.head.tolist(),
        "peak_age_tail_rate": pad.tail_rate,
        "mean": pad.mean,
        "variance": pad.variance,
        "regime": regime,
    }
    if c is not None and c == c:
        out["c"] = c
    if n is not None:
        out["sigma_exact"] = sigma_markov_exact(n, chain)
    return out


def analyze_policy_chain(cfg: ExperimentConfig, index: int) -> dict:
    p = cfg.policies[index]
    n, mp = cfg.population.n, cfg.markov.m_prime
    if p.kind is PolicyKind.MARKOV_MONOTONE:
        chain = build_policy(cfg, index).chain
        entry = markov_report(chain, "monotone", n=n)
    else:
        res = optimal_markov_chain(n, p.m, mp)
        entry = markov_report(res.chain, res.regime, res.c, n=n)
        entry["min_variance"] = res.min_variance
    return {"policy": p.kind.value, "n": n, "m": p.m, **entry}


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(x) for x in row])


def run_experiment(
    cfg: ExperimentConfig,
    out_dir=None,
    threads: int = 1,
    seed_override: Optional[int] = None,
) -> list[Path]:
    """Run ``cfg`` and return the paths written."""
    if seed_override is not None:
        cfg = cfg.model_copy(update={"seeds": [seed_override]})
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    labels = [p.kind.value for p in cfg.policies]
    order = sorted(range(len(cfg.policies)), key=lambda i: (labels[i], i))

    if cfg.experiment == "markov-analyze":
        entries = [analyze_policy_chain(cfg, i) for i in order if cfg.policies[i].kind.is_markov]
        if not entries:
            res = optimal_markov_chain(cfg.population.n, cfg.policies[0].m, cfg.markov.m_prime)
            entries = [{"policy": "markov_optimal", "n": cfg.population.n, "m": cfg.policies[0].m,
                        **markov_report(res.chain, res.regime, res.c, n=cfg.population.n),
                        "min_variance": res.min_variance}]
        path = out / "markov.json"
        path.write_text(json.dumps(entries, indent=2) + "\n")
        written.append(path)
    else:
        seeds = sorted(cfg.seeds)
        data = cfg.model_dump(mode="json")
        jobs = [(data, i, s) for i in order for s in seeds]
        if threads > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(_cell, jobs))
        else:
            results = [_cell(j) for j in jobs]
        by_cell = {(j[1], j[2]): r for j, r in zip(jobs, results)}
        written.append(_write_experiment(cfg, out, order, seeds, by_cell))

    manifest = {
        "tool": "aoiselect",
        "version": __version__,
        "schema_version": SCHEMA_VERSION,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "config": resolved(cfg),
        "files": [p.name for p in written],
        "csv_headers": {p.name: CSV_HEADERS[p.name] for p in written if p.name in CSV_HEADERS},
    }
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2) + "\n")
    written.append(mpath)
    logger.info("wrote %s", ", ".join(str(p) for p in written))
    return written


def _write_experiment(cfg: ExperimentConfig, out: Path, order, seeds, by_cell) -> Path:
    labels = [p.kind.value for p in cfg.policies]
    kind = cfg.experiment
    if kind in ("sigma", "train"):
        name = f"{kind}.csv"
        rows = [row for i in order for s in seeds for row in by_cell[(i, s)]]
        rows.sort(key=lambda r: (r[1], r[2], r[0]))
        _write_csv(out / name, CSV_HEADERS[name], rows)
        return out / name
    if kind == "intervals":
        rows = []
        for i in order:
            pooled: dict[int, int] = {}
            censored = 0
            for s in seeds:
                cell = by_cell[(i, s)]
                censored += cell["censored"]
                for g, c in cell["gaps"].items():
                    pooled[g] = pooled.get(g, 0) + c
            rows.extend((labels[i], g, pooled[g], censored) for g in sorted(pooled))
        _write_csv(out / "intervals.csv", CSV_HEADERS["intervals.csv"], rows)
        return out / "intervals.csv"
    if kind == "stability":
        rows = []
        for i in order:
            for w in cfg.windows:
                vals = [by_cell[(i, s)][w] for s in seeds]
                rows.append((labels[i], w, float(np.mean(vals))))
        _write_csv(out / "stability.csv", CSV_HEADERS["stability.csv"], rows)
        return out / "stability.csv"
    raise ValueError(kind)
