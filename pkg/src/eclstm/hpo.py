"""BOHB: Hyperband brackets of successive halving with KDE-guided proposals.

Configurations are flat ``{name: value}`` dicts whose keys mirror the dotted
ModelConfig text form; inactive conditional parameters are simply absent.
"""
from __future__ import annotations

import fnmatch
import json
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .data import DatasetCache, split_cv
from .network import SEARCH_ACTIVATIONS, InfeasibleConfigError, ModelConfig, assemble_model
from .training import (TrainSpec, TrainState, TrainingDiverged, estimate_step_memory, eval_rmse, predict,
                       train_model)

log = logging.getLogger(__name__)

HISTORY_FORMAT = "eclstm-trial-history"
HISTORY_VERSION = 1
FAILED_PENALTY = 10.0
DEFAULT_MEMORY_MB = 2048  # per-trial cap on one training step; larger configs are marked failed


class NoResultError(RuntimeError):
    """A search finished without a single completed trial."""


# -- configuration space ------------------------------------------------------------------

@dataclass(frozen=True)
class Condition:
    """Child is active when ``parent`` is active and either ``parent >= min_value`` or ``parent in values``."""

    parent: str
    min_value: float | None = None
    values: tuple | None = None

    def holds(self, v) -> bool:
        if self.values is not None:
            return v in self.values
        return v >= self.min_value


@dataclass(frozen=True)
class Param:
    name: str
    kind: str                       # "int" | "float" | "cat"
    low: float = 0.0
    high: float = 1.0
    choices: tuple = ()
    log: bool = False
    condition: Condition | None = None

    def __post_init__(self):
        if self.kind not in ("int", "float", "cat"):
            raise ValueError(f"{self.name}: unknown kind {self.kind!r}")
        if self.kind == "cat" and not self.choices:
            raise ValueError(f"{self.name}: categorical parameter without choices")
        if self.kind != "cat" and not self.low <= self.high:
            raise ValueError(f"{self.name}: empty range")
        if self.log and self.low <= 0:
            raise ValueError(f"{self.name}: log scale needs a positive lower bound")

    # unit-interval encoding used by the KDE; categoricals encode as their index
    def encode(self, v) -> float:
        if self.kind == "cat":
            return float(self.choices.index(v))
        lo, hi = self.low, self.high
        if self.log:
            v, lo, hi = math.log(v), math.log(lo), math.log(hi)
        if self.kind == "int" and not self.log:
            return (v - lo + 0.5) / (hi - lo + 1)
        return 0.5 if hi == lo else (v - lo) / (hi - lo)

    def decode(self, u: float):
        if self.kind == "cat":
            return self.choices[int(round(u)) % len(self.choices)]
        u = min(max(float(u), 0.0), 1.0)
        if self.kind == "int" and not self.log:
            n = int(self.high - self.low + 1)
            return int(self.low + min(n - 1, math.floor(u * n)))
        lo, hi = (math.log(self.low), math.log(self.high)) if self.log else (self.low, self.high)
        v = lo + u * (hi - lo)
        v = math.exp(v) if self.log else v
        if self.kind == "int":
            return int(min(max(round(v), self.low), self.high))
        return float(min(max(v, self.low), self.high))

    def sample(self, rng: np.random.Generator):
        if self.kind == "cat":
            return self.choices[int(rng.integers(len(self.choices)))]
        if self.kind == "int" and not self.log:
            return int(rng.integers(int(self.low), int(self.high) + 1))
        return self.decode(rng.uniform())

    def contains(self, v) -> bool:
        if self.kind == "cat":
            return v in self.choices
        if self.kind == "int" and (isinstance(v, bool) or int(v) != v):
            return False
        return self.low <= v <= self.high


class ConfigSpace:
    """Ordered parameters; every condition refers to an earlier parameter, so the graph is acyclic."""

    def __init__(self, params: Sequence[Param]):
        self.params: list[Param] = []
        self._by_name: dict[str, Param] = {}
        for p in params:
            if p.name in self._by_name:
                raise ValueError(f"duplicate parameter {p.name}")
            if p.condition is not None and p.condition.parent not in self._by_name:
                raise ValueError(f"{p.name}: parent {p.condition.parent} must be declared first")
            self.params.append(p)
            self._by_name[p.name] = p

    def __len__(self) -> int:
        return len(self.params)

    def __getitem__(self, name: str) -> Param:
        return self._by_name[name]

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.params]

    def restrict(self, overrides: dict[str, dict]) -> "ConfigSpace":
        """Narrowed copy; keys are names or fnmatch patterns, values give low/high or choices.

        Ranges may only shrink, so every restricted config is valid in the full space.
        """
        params = []
        for p in self.params:
            for pattern, ov in overrides.items():
                if not fnmatch.fnmatchcase(p.name, pattern):
                    continue
                if p.kind == "cat":
                    choices = tuple(c for c in p.choices if c in ov.get("choices", p.choices))
                    if not choices:
                        raise ValueError(f"{p.name}: no allowed choice left in {ov}")
                    p = replace(p, choices=choices)
                else:
                    lo, hi = ov.get("low", p.low), ov.get("high", p.high)
                    if lo < p.low or hi > p.high:
                        raise ValueError(f"{p.name}: [{lo}, {hi}] lies outside [{p.low}, {p.high}]")
                    p = replace(p, low=lo, high=hi)
            params.append(p)
        unknown = [k for k in overrides if not any(fnmatch.fnmatchcase(n, k) for n in self.names)]
        if unknown:
            raise ValueError(f"no parameter matches {unknown}")
        return ConfigSpace(params)

    def _active(self, p: Param, cfg: dict) -> bool:
        c = p.condition
        return c is None or (c.parent in cfg and c.holds(cfg[c.parent]))

    def sample(self, rng: np.random.Generator) -> dict:
        cfg: dict[str, Any] = {}
        for p in self.params:
            if self._active(p, cfg):
                cfg[p.name] = p.sample(rng)
        return cfg

    def validate(self, cfg: dict) -> None:
        seen: dict[str, Any] = {}
        for p in self.params:
            active = self._active(p, seen)
            if active and p.name not in cfg:
                raise ValueError(f"active parameter {p.name} missing")
            if not active and p.name in cfg:
                raise ValueError(f"inactive parameter {p.name} present")
            if active:
                if not p.contains(cfg[p.name]):
                    raise ValueError(f"{p.name}={cfg[p.name]!r} outside its range")
                seen[p.name] = cfg[p.name]
        extra = set(cfg) - set(self._by_name)
        if extra:
            raise ValueError(f"unknown parameters {sorted(extra)}")

    def to_vector(self, cfg: dict) -> np.ndarray:
        return np.array([p.encode(cfg[p.name]) if p.name in cfg else np.nan for p in self.params])

    def from_vector(self, vec: np.ndarray) -> dict:
        cfg: dict[str, Any] = {}
        for p, u in zip(self.params, vec):
            if self._active(p, cfg):
                cfg[p.name] = p.decode(u)
        return cfg

    def to_dict(self) -> list[dict]:
        return [asdict(p) for p in self.params]


def _act(name: str, cond: Condition | None = None) -> Param:
    return Param(name, "cat", choices=SEARCH_ACTIVATIONS, condition=cond)


def model_space(max_backbone: int = 3, max_depth: int = 4, max_head: int = 4) -> ConfigSpace:
    """The searchable architecture ranges plus sequence length, window size and batch size."""
    ps = [Param("sequence_length", "int", 5, 50), Param("window_size", "int", 1, 30),
          Param("batch_size", "int", 16, 512, log=True),
          Param("pre.n_layers", "int", 0, 5)]
    on_pre = Condition("pre.n_layers", 1)
    ps += [Param("pre.kernel_width", "int", 2, 1024, condition=on_pre),
           Param("pre.stride", "int", 1, 20, condition=on_pre),
           Param("pre.dilation", "int", 1, 10, condition=on_pre),
           _act("pre.activation", on_pre),
           Param("pre.n_filters", "int", 1, 20, condition=on_pre),
           Param("pre.max_pool", "cat", choices=(True, False), condition=on_pre)]
    ps.append(Param("backbone.n_layers", "int", 1, max_backbone))
    for i in range(1, max_backbone + 1):
        on_layer = Condition("backbone.n_layers", i)
        ps += [Param(f"backbone.{i}.dropout", "float", 0.0, 0.99, condition=on_layer),
               Param(f"backbone.{i}.depth", "int", 1, max_depth, condition=on_layer)]
        for j in range(1, max_depth + 1):
            on_depth = Condition(f"backbone.{i}.depth", j)
            ps += [_act(f"backbone.{i}.{j}.activation", on_depth),
                   Param(f"backbone.{i}.{j}.fusion", "cat", choices=("early", "hybrid", "late"), condition=on_depth),
                   Param(f"backbone.{i}.{j}.filters", "int", 4, 64, condition=on_depth),
                   Param(f"backbone.{i}.{j}.kernel_width", "int", 2, 32, condition=on_depth)]
    ps.append(Param("head.n_layers", "int", 1, max_head))
    for i in range(1, max_head + 1):
        on_layer = Condition("head.n_layers", i)
        ps += [Param(f"head.{i}.units", "int", 8, 1024, condition=on_layer),
               _act(f"head.{i}.activation", on_layer),
               Param(f"head.{i}.dropout", "float", 0.0, 0.99, condition=on_layer)]
    return ConfigSpace(ps)


def load_space_overrides(path: str | Path) -> dict[str, dict]:
    """The optional ``space`` block of a search settings file."""
    return json.loads(Path(path).read_text()).get("space", {})


def to_model_config(cfg: dict) -> ModelConfig:
    flat = {k: str(v) if not isinstance(v, float) else repr(v) for k, v in cfg.items()}
    return ModelConfig.from_flat(flat)


def from_model_config(model_cfg: ModelConfig, space: ConfigSpace) -> dict:
    flat = model_cfg.to_flat()
    out = {}
    for p in space.params:
        if p.name in flat:
            raw = flat[p.name]
            out[p.name] = (int(raw) if p.kind == "int" else float(raw) if p.kind == "float"
                           else next(c for c in p.choices if str(c) == raw))
    return out


def sample_random_config(space: ConfigSpace, seed) -> dict:
    return space.sample(np.random.default_rng(seed))


# -- hyperband layout ---------------------------------------------------------------------

@dataclass(frozen=True)
class Bracket:
    s: int
    n_configs: tuple[int, ...]       # rung populations
    budgets: tuple[float, ...]

    @property
    def total_budget(self) -> float:
        return float(sum(n * b for n, b in zip(self.n_configs, self.budgets)))


def hyperband_schedule(min_budget: float, max_budget: float, eta: int = 3) -> list[Bracket]:
    if not 1 <= min_budget <= max_budget:
        raise ValueError("need max_budget >= min_budget >= 1")
    if eta < 2:
        raise ValueError("eta must be >= 2")
    # a tiny slack so exact powers survive floating-point logs
    s_max = int(math.floor(math.log(max_budget / min_budget) / math.log(eta) + 1e-9))
    out = []
    for s in range(s_max, -1, -1):
        # floor, not ceil: this is what yields the (27, 9, 6, 4) populations for (1, 27, 3)
        n = ((s_max + 1) // (s + 1)) * eta**s
        out.append(Bracket(s, tuple(n // eta**r for r in range(s + 1)),
                           tuple(max_budget * float(eta) ** (r - s) for r in range(s + 1))))
    return out


# -- trial records ----------------------------------------------------------------------------

@dataclass
class TrialResult:
    loss: float | None
    status: str = "ok"               # ok | failed | infeasible
    info: dict = field(default_factory=dict)


@dataclass
class TrialRecord:
    config_id: str
    config: dict
    budget: float
    loss: float | None
    status: str
    seed: int
    wall_time: float
    iteration: int = 0
    bracket: int = 0
    rung: int = 0
    info: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrialRecord":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def read_history(path: str | Path) -> list[TrialRecord]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            if "format" in d:
                if d["format"] != HISTORY_FORMAT:
                    raise ValueError(f"{path}: not a trial history")
                continue
            out.append(TrialRecord.from_dict(d))
    return out


class HistoryWriter:
    """Append-only JSONL; each record is flushed as soon as it is known."""

    def __init__(self, path: str | Path | None, tool_version: str = ""):
        self.path = Path(path) if path else None
        if self.path is not None and not self.path.exists():
            with open(self.path, "w") as fh:
                fh.write(json.dumps({"format": HISTORY_FORMAT, "version": HISTORY_VERSION,
                                     "tool_version": tool_version}) + "\n")

    def append(self, rec: TrialRecord) -> None:
        if self.path is None:
            return
        with open(self.path, "a") as fh:
            fh.write(rec.to_json() + "\n")
            fh.flush()


def incumbent(records: Sequence[TrialRecord]) -> TrialRecord:
    """Lowest ok loss at the highest budget any ok record reached (ties: earliest)."""
    ok = [r for r in records if r.status == "ok"]
    if not ok:
        raise NoResultError("no completed trial")
    top = max(r.budget for r in ok)
    return min((r for r in ok if r.budget == top), key=lambda r: r.loss)


def incumbent_trajectory(records: Sequence[TrialRecord], budget: float | None = None) -> list[dict]:
    """Best loss so far at ``budget`` (default: the largest seen), one row per improvement."""
    ok = [r for r in records if r.status == "ok"]
    if not ok:
        return []
    budget = max(r.budget for r in ok) if budget is None else budget
    rows, best, clock = [], math.inf, 0.0
    for r in records:
        clock += r.wall_time
        if r.status == "ok" and r.budget == budget and r.loss < best:
            best = r.loss
            rows.append({"config_id": r.config_id, "budget": budget, "loss": best, "elapsed": clock})
    return rows


def ranking_loss(rec: TrialRecord, worst: float) -> float:
    if rec.status == "ok":
        return rec.loss
    return worst * FAILED_PENALTY if math.isfinite(worst) and worst > 0 else math.inf


# -- KDE model ------------------------------------------------------------------------------------

@dataclass
class SearchSettings:
    min_budget: float = 1.0
    max_budget: float = 27.0
    eta: int = 3
    rho: float = 1.0 / 3.0
    gamma: float = 0.15
    n_candidates: int = 64
    bandwidth_factor: float = 3.0
    min_bandwidth: float = 1e-3
    cat_smoothing: float = 0.1
    workers: int = 1
    wall_clock_limit: float | None = None      # seconds
    n_iterations: int | None = None            # Hyperband iterations (each runs every bracket once)

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0 or not 0.0 < self.gamma < 1.0:
            raise ValueError("rho must lie in [0, 1] and gamma in (0, 1)")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.wall_clock_limit is not None and self.wall_clock_limit <= 0:
            raise ValueError("wall-clock limit must be positive")
        if self.n_iterations is not None and self.n_iterations < 1:
            raise ValueError("iteration limit must be positive")
        hyperband_schedule(self.min_budget, self.max_budget, self.eta)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"format": "eclstm-search-config", "version": 1,
                                          "settings": asdict(self)}, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "SearchSettings":
        raw = json.loads(Path(path).read_text())
        raw.pop("space", None)
        return cls(**raw.get("settings", raw))


class _ProductKDE:
    """Gaussian kernels on numeric dims and a smoothed categorical kernel on choice dims."""

    def __init__(self, data: np.ndarray, cat_sizes: np.ndarray, min_bw: float, smoothing: float):
        self.data = data
        self.cat = cat_sizes > 0
        self.cat_sizes = cat_sizes
        n, d = data.shape
        sd = data.std(axis=0) if n > 1 else np.zeros(d)
        self.bw = np.maximum(sd * max(n, 1) ** (-1.0 / (d + 4)), min_bw)
        self.smoothing = smoothing

    def pdf(self, x: np.ndarray) -> np.ndarray:
        """Density at each row of ``x`` (m, d); an empty sample is the uniform density."""
        if len(self.data) == 0:
            return np.ones(len(x))
        dens = np.ones((len(x), len(self.data)))
        for j in range(self.data.shape[1]):
            a, b = x[:, j][:, None], self.data[:, j][None, :]
            if self.cat[j]:
                c = self.cat_sizes[j]
                lam = self.smoothing if c > 1 else 0.0
                k = np.where(a == b, 1.0 - lam, lam / max(c - 1, 1))
            else:
                z = (a - b) / self.bw[j]
                k = np.exp(-0.5 * z * z) / (self.bw[j] * math.sqrt(2 * math.pi))
            dens *= k
        return np.maximum(dens.mean(axis=1), 1e-300)


@dataclass
class KDEModel:
    budget: float
    good: _ProductKDE
    bad: _ProductKDE
    n_good: int
    n_bad: int
    active_dims: np.ndarray          # indices into space.params

    def ratio(self, vecs: np.ndarray) -> np.ndarray:
        v = vecs[:, self.active_dims]
        return self.good.pdf(v) / self.bad.pdf(v)


def _cat_sizes(space: ConfigSpace) -> np.ndarray:
    return np.array([len(p.choices) if p.kind == "cat" else 0 for p in space.params])


def _impute(vecs: np.ndarray, space: ConfigSpace, rng: np.random.Generator) -> np.ndarray:
    out = vecs.copy()
    sizes = _cat_sizes(space)
    for j in range(out.shape[1]):
        miss = np.isnan(out[:, j])
        if miss.any():
            out[miss, j] = (rng.integers(sizes[j], size=miss.sum()) if sizes[j]
                            else rng.uniform(size=miss.sum()))
    return out


def fit_kde(records: Sequence[TrialRecord], space: ConfigSpace, settings: SearchSettings | None = None,
            seed: int = 0) -> KDEModel | None:
    """Good/bad densities from the records at one budget, or None when there are too few."""
    settings = settings or SearchSettings()
    budgets = {r.budget for r in records}
    if len(budgets) > 1:
        raise ValueError("records span several budgets")
    usable = [r for r in records if r.status in ("ok", "failed")]
    n_ok = sum(r.status == "ok" for r in usable)
    if not usable:
        return None
    vecs = np.array([space.to_vector(r.config) for r in usable])
    active = np.flatnonzero(~np.all(np.isnan(vecs), axis=0))
    d = len(active)
    if n_ok < d + 1:
        return None
    worst = max((r.loss for r in usable if r.status == "ok"), default=math.inf)
    losses = np.array([ranking_loss(r, worst) for r in usable])
    order = np.argsort(losses, kind="stable")
    n_good = max(d + 1, int(math.ceil(settings.gamma * len(usable))))
    n_good = min(n_good, len(usable))
    vecs = _impute(vecs, space, np.random.default_rng(seed))[:, active]
    sizes = _cat_sizes(space)[active]
    good = _ProductKDE(vecs[order[:n_good]], sizes, settings.min_bandwidth, settings.cat_smoothing)
    bad = _ProductKDE(vecs[order[n_good:]], sizes, settings.min_bandwidth, settings.cat_smoothing)
    return KDEModel(records[0].budget, good, bad, n_good, len(usable) - n_good, active)


@dataclass
class Proposal:
    config: dict
    random: bool
    candidates: list[dict] = field(default_factory=list)
    scores: np.ndarray | None = None
    vectors: np.ndarray | None = None        # encoded candidates exactly as scored


def propose_config(kde: KDEModel | None, space: ConfigSpace, seed, settings: SearchSettings | None = None,
                   with_info: bool = False):
    """Random with probability rho (or without a model); otherwise argmax l/g over widened-l samples."""
    settings = settings or SearchSettings()
    rng = np.random.default_rng(seed)
    coin = rng.uniform()
    if kde is None or coin < settings.rho:
        prop = Proposal(space.sample(rng), True)
        return prop if with_info else prop.config
    sizes = _cat_sizes(space)[kde.active_dims]
    good = kde.good
    cands = []
    for _ in range(settings.n_candidates):
        base = good.data[rng.integers(len(good.data))]
        v = np.empty_like(base)
        for j, (b, c) in enumerate(zip(base, sizes)):
            if c:
                lam = min(settings.cat_smoothing * settings.bandwidth_factor, (c - 1) / c)
                v[j] = b if rng.uniform() >= lam else rng.integers(c)
            else:
                bw = good.bw[j] * settings.bandwidth_factor
                draw = rng.normal(b, bw)
                while not 0.0 <= draw <= 1.0:          # truncated to the unit interval
                    draw = rng.normal(b, bw)
                v[j] = draw
        full = rng.uniform(size=len(space))
        full[kde.active_dims] = v
        cfg = space.from_vector(full)
        cands.append(cfg)
    # score the decoded configurations so the ratio matches what is actually evaluated
    vecs = _impute(np.array([space.to_vector(c) for c in cands]), space, rng)
    scores = kde.ratio(vecs)
    best = int(np.argmax(scores))
    prop = Proposal(cands[best], False, cands, scores, vecs)
    return prop if with_info else prop.config


# -- successive halving ---------------------------------------------------------------------------

Evaluator = Callable[[dict, float, str, int], TrialResult]


def _evaluate(evaluator: Evaluator, cfg: dict, budget: float, cid: str, seed: int) -> tuple[TrialResult, float]:
    t0 = time.perf_counter()
    try:
        res = evaluator(cfg, budget, cid, seed)
    except (KeyboardInterrupt, SystemExit):
        raise
    except Exception as err:                      # noqa: BLE001 - any evaluator crash marks the trial failed
        log.warning("trial %s at budget %s failed: %s", cid, budget, err)
        res = TrialResult(None, "failed", {"error": repr(err)})
    if res.status == "ok" and (res.loss is None or not math.isfinite(res.loss)):
        res = TrialResult(None, "failed", dict(res.info, error="non-finite loss"))
    return res, time.perf_counter() - t0


def successive_halving(bracket: Bracket, configs: Sequence[dict], evaluator: Evaluator, eta: int,
                       seed: int = 0, iteration: int = 0, ids: Sequence[str] | None = None,
                       done: dict | None = None, on_record: Callable[[TrialRecord], None] | None = None,
                       workers: int = 1, deadline: float | None = None,
                       worst: Callable[[], float] | None = None) -> list[TrialRecord]:
    """Run one bracket; ``done`` maps (config_id, budget) to already persisted records (resume)."""
    if len(configs) != bracket.n_configs[0]:
        raise ValueError(f"bracket needs {bracket.n_configs[0]} configs, got {len(configs)}")
    ids = list(ids) if ids is not None else [f"{iteration}-{bracket.s}-{j}" for j in range(len(configs))]
    done = done if done is not None else {}
    alive = list(range(len(configs)))
    out: list[TrialRecord] = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for rung, budget in enumerate(bracket.budgets):
            if deadline is not None and time.monotonic() > deadline:
                break
            todo = [j for j in alive if (ids[j], budget) not in done]
            jobs = {}
            for j in todo:
                args = (evaluator, configs[j], budget, ids[j], seed)
                jobs[j] = pool.submit(_evaluate, *args) if pool else None
            recs = []
            for j in alive:
                if (ids[j], budget) in done:
                    rec = done[(ids[j], budget)]
                    if on_record is not None:
                        on_record(rec)
                    recs.append(rec)
                    continue
                res, wall = jobs[j].result() if pool else _evaluate(evaluator, configs[j], budget, ids[j], seed)
                rec = TrialRecord(ids[j], configs[j], budget, res.loss, res.status, seed, wall,
                                  iteration, bracket.s, rung, res.info)
                if on_record is not None:
                    on_record(rec)
                recs.append(rec)
            out.extend(recs)
            if rung == len(bracket.budgets) - 1:
                break
            keep = bracket.n_configs[rung + 1]
            ranked = [(rec.loss, pos) for pos, rec in enumerate(recs) if rec.status == "ok"]
            ranked.sort()                              # ties fall back to submission order
            alive = [alive[pos] for _, pos in ranked[:keep]]
            if not alive:
                break
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
    release = getattr(evaluator, "release", None)
    if release is not None:
        for cid in ids:
            release(cid)
    return out


# -- BOHB driver ------------------------------------------------------------------------------------

@dataclass
class SearchResult:
    incumbent: TrialRecord
    history: list[TrialRecord]
    iterations: int


def _kde_for(records: Sequence[TrialRecord], space: ConfigSpace, settings: SearchSettings, seed) -> KDEModel | None:
    by_budget: dict[float, list[TrialRecord]] = {}
    for r in records:
        by_budget.setdefault(r.budget, []).append(r)
    for budget in sorted(by_budget, reverse=True):
        kde = fit_kde(by_budget[budget], space, settings, seed)
        if kde is not None:
            return kde
    return None


def bohb_run(space: ConfigSpace, evaluator: Evaluator, settings: SearchSettings | None = None, seed: int = 0,
             history_path: str | Path | None = None, resume: bool = False,
             tool_version: str = "") -> SearchResult:
    """Iterate Hyperband brackets with KDE proposals; records are persisted as they complete.

    On ``resume`` the persisted history is replayed: the same proposals are regenerated
    and any (config_id, budget) already on disk is reused instead of re-evaluated.
    """
    settings = settings or SearchSettings()
    if settings.n_iterations is None and settings.wall_clock_limit is None:
        raise ValueError("set an iteration limit or a wall-clock limit")
    prior = read_history(history_path) if (resume and history_path) else []
    if history_path and not resume and Path(history_path).exists():
        raise FileExistsError(f"{history_path} exists; pass resume=True to continue it")
    done = {(r.config_id, r.budget): r for r in prior}
    writer = HistoryWriter(history_path, tool_version)
    history: list[TrialRecord] = []
    lock = threading.Lock()

    def record(rec: TrialRecord) -> None:
        with lock:
            history.append(rec)
            if done.get((rec.config_id, rec.budget)) is not rec:
                writer.append(rec)

    deadline = time.monotonic() + settings.wall_clock_limit if settings.wall_clock_limit else None
    schedule = hyperband_schedule(settings.min_budget, settings.max_budget, settings.eta)
    it = 0
    while settings.n_iterations is None or it < settings.n_iterations:
        if deadline is not None and time.monotonic() > deadline:
            break
        for bracket in schedule:
            if deadline is not None and time.monotonic() > deadline:
                break
            # one model per bracket, fit on every record known at its start (replayed ones included)
            kde = _kde_for(history, space, settings, [seed, it, bracket.s]) if history else None
            configs, ids = [], []
            for j in range(bracket.n_configs[0]):
                cid = f"{it}-{bracket.s}-{j}"
                cfg = propose_config(kde, space, [seed, it, bracket.s, j], settings)
                stored = done.get((cid, bracket.budgets[0]))
                configs.append(stored.config if stored is not None else cfg)
                ids.append(cid)
            successive_halving(bracket, configs, evaluator, settings.eta, seed, it, ids, done, record,
                               settings.workers, deadline)
        it += 1
    if not any(r.status == "ok" for r in history):
        raise NoResultError("search finished without a completed trial")
    return SearchResult(incumbent(history), history, it)


def random_search(space: ConfigSpace, evaluator: Evaluator, total_budget: float, budget: float,
                  seed: int = 0) -> SearchResult:
    """Uniform random configurations, each evaluated at ``budget``, until ``total_budget`` is spent."""
    rng = np.random.default_rng(seed)
    history = []
    for j in range(int(total_budget // budget)):
        cfg = space.sample(rng)
        res, wall = _evaluate(evaluator, cfg, budget, f"rs-{j}", seed)
        history.append(TrialRecord(f"rs-{j}", cfg, budget, res.loss, res.status, seed, wall, info=res.info))
    return SearchResult(incumbent(history), history, 1)


def budget_spent(records: Sequence[TrialRecord]) -> float:
    """Epochs consumed; infeasible trials cost nothing and promoted trials pay only the increment."""
    reached: dict[str, float] = {}
    total = 0.0
    for r in records:
        if r.status == "infeasible":
            continue
        prev = reached.get(r.config_id, 0.0)
        total += max(r.budget - prev, 0.0)
        reached[r.config_id] = max(prev, r.budget)
    return total


# -- cross-validated objective ---------------------------------------------------------------------

class CVObjective:
    """Mean k-fold RMSE of a config trained for ``budget`` epochs; promoted configs continue training.

    Checkpoints live in memory keyed by config id; without one (e.g. after a
    resume) training restarts and runs the full budget, which gives the same
    result because training is budget-additive.
    """

    def __init__(self, cache: DatasetCache, k: int = 3, split_seed: int = 0, lr: float = 1e-3,
                 build: Callable[..., Any] | None = None, max_train_examples: int | None = None,
                 memory_limit_mb: float | None = None):
        self.cache = cache
        self.k = k
        self.folds = split_cv([u.unit_id for u in cache.train], k, split_seed)
        self.lr = lr
        self.build = build or (lambda cfg, n, m, seed: assemble_model(cfg, n, m, seed))
        self.max_train_examples = max_train_examples
        self.memory_limit = (memory_limit_mb or float(os.environ.get("ECLSTM_MEMORY_LIMIT_MB", DEFAULT_MEMORY_MB))) * 2**20
        self._ckpt: dict[str, dict] = {}
        self._lock = threading.Lock()

    def release(self, config_id: str) -> None:
        with self._lock:
            self._ckpt.pop(config_id, None)

    def __call__(self, cfg: dict, budget: float, config_id: str = "", seed: int = 0) -> TrialResult:
        try:
            model_cfg = to_model_config(cfg) if isinstance(cfg, dict) else cfg
            n = self.cache.train[0].n_sensors
            m = self.cache.train[0].samples_per_cycle
            fold_models = [self.build(model_cfg, n, m, seed + f) for f in range(self.k)]
        except InfeasibleConfigError as err:
            return TrialResult(None, "infeasible", {"stage": err.stage, "reason": err.reason})
        try:
            windows = self.cache.train_examples(model_cfg.window_size, model_cfg.sequence_length)
        except ValueError as err:
            return TrialResult(None, "infeasible", {"stage": "data", "reason": str(err)})
        epochs = max(1, int(round(budget)))
        with self._lock:
            ck = self._ckpt.get(config_id) if config_id else None
        if ck is None and len(windows):
            need = estimate_step_memory(fold_models[0], windows, min(model_cfg.batch_size, len(windows)))
            if need > self.memory_limit:
                return TrialResult(None, "failed", {"error": "memory", "estimated_mb": need / 2**20})
        if ck is None or ck["epochs"] > epochs:
            ck = {"epochs": 0, "models": fold_models, "states": [None] * self.k}
        rmses = []
        try:
            for f, held in enumerate(self.folds):
                train_ids = [u for g, fold in enumerate(self.folds) if g != f for u in fold]
                tr = windows.subset_units(train_ids)
                if self.max_train_examples and len(tr) > self.max_train_examples:
                    pick = np.random.default_rng([seed, f]).choice(len(tr), self.max_train_examples, replace=False)
                    tr = tr.select(np.sort(pick))
                va = windows.subset_units(held)
                model, state = ck["models"][f], ck["states"][f]
                extra = epochs - ck["epochs"]
                if extra > 0:
                    spec = TrainSpec(epochs=extra, batch_size=model_cfg.batch_size, lr=self.lr,
                                     seed=seed * 1000 + f, report_every=0)
                    state = train_model(model, tr, spec, state=state)
                ck["states"][f] = state
                rmses.append(eval_rmse(va.targets, predict(model, va)))
        except TrainingDiverged as err:
            self.release(config_id)
            return TrialResult(None, "failed", {"error": str(err)})
        ck["epochs"] = epochs
        if config_id:
            with self._lock:
                self._ckpt[config_id] = ck
        return TrialResult(float(np.mean(rmses)), "ok", {"fold_rmse": rmses, "epochs": epochs})


def cv_objective(config, cache: DatasetCache, budget: float, seed: int = 0, **kw) -> TrialResult:
    return CVObjective(cache, **kw)(config, budget, "", seed)


# -- synthetic conditional surrogate ---------------------------------------------------------------

SURROGATE_OPTIMUM = {"x0": 1.3, "x1": 0.7, "mode": "tuned", "x2": 0.2, "units": 6, "rate": 10 ** -2.5}


def surrogate_space() -> ConfigSpace:
    """Six parameters; ``x2`` only exists when ``mode == "tuned"``."""
    return ConfigSpace([
        Param("x0", "float", -5.0, 5.0),
        Param("x1", "float", 0.0, 1.0),
        Param("mode", "cat", choices=("plain", "tuned", "noisy")),
        Param("x2", "float", 0.0, 1.0, condition=Condition("mode", values=("tuned",))),
        Param("units", "int", 1, 16),
        Param("rate", "float", 1e-5, 1.0, log=True),
    ])


def surrogate_loss(cfg: dict, budget: float = 1.0, max_budget: float = 27.0) -> float:
    """Deterministic, noise-free; global minimum 0 at SURROGATE_OPTIMUM with the full budget.

    Low budgets add a config-dependent bias so fidelities agree only roughly.
    """
    base = ((cfg["x0"] - 1.3) / 5.0) ** 2 + (cfg["x1"] - 0.7) ** 2
    base += ((cfg["units"] - 6) / 8.0) ** 2 + ((math.log10(cfg["rate"]) + 2.5) / 3.0) ** 2
    base += {"plain": 0.25, "noisy": 0.6}.get(cfg["mode"], 0.0)
    if cfg["mode"] == "tuned":
        base += 2.0 * (cfg["x2"] - 0.2) ** 2
    gap = 1.0 - budget / max_budget
    return float(base + gap * 0.1 * (1.0 + math.sin(3.0 * cfg["x0"]) * cfg["x1"]))


def surrogate_evaluator(cfg: dict, budget: float, config_id: str = "", seed: int = 0) -> TrialResult:
    return TrialResult(surrogate_loss(cfg, budget))
