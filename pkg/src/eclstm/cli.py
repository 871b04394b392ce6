"""Command line front-end: ingest, train, evaluate, search, ablation.

Every command writes one ``manifest.json`` into its output directory, reports
as line-oriented JSON and tables/predictions as CSV.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import (RUL_CAP, DataFormatError, DatasetCache, build_cache, load_cmapss, load_generic_csv,
                   load_rul_truth)
from .hpo import (CVObjective, NoResultError, SearchSettings, bohb_run, incumbent_trajectory, load_space_overrides,
                  model_space, surrogate_evaluator, surrogate_space, to_model_config)
from .network import InfeasibleConfigError, Model, ModelConfig, assemble_model, eclstm_ablation, fclstm_baseline
from .training import (EvalReport, TrainSpec, eval_percent_error, predict, read_predictions, train_model,
                       write_jsonl, write_predictions)

log = logging.getLogger("eclstm")

DEFAULT_SEED = 0
DEFAULT_EPOCHS = 30
DEFAULT_WINDOWS = (1, 5, 10, 15, 20)


class CommandError(RuntimeError):
    """A command could not meet its post-condition; message goes to stderr."""


@dataclass
class RunManifest:
    command: str
    config_path: str | None
    dataset_paths: list[str]
    seed: int | None
    output_dir: str
    tool_version: str = __version__
    started: str = ""
    finished: str = ""
    argv: list[str] = field(default_factory=list)
    status: str = "running"
    outputs: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def write(self) -> Path:
        path = Path(self.output_dir) / "manifest.json"
        if self.status != "ok" and _manifest_ok(path):
            # keep the record of an earlier successful run intact
            path = path.with_name("manifest.failed.json")
        path.write_text(json.dumps({"format": "eclstm-manifest", "version": 1, **asdict(self)}, indent=2))
        return path


def _manifest_ok(path: Path) -> bool:
    try:
        return json.loads(path.read_text()).get("status") == "ok"
    except (OSError, ValueError):
        return False


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _default_seed() -> int:
    raw = os.environ.get("ECLSTM_SEED")
    return int(raw) if raw not in (None, "") else DEFAULT_SEED


def _cache_path(p: str) -> Path:
    path = Path(p)
    return path / "cache.npz" if path.is_dir() else path


def _load_cache(p: str) -> DatasetCache:
    path = _cache_path(p)
    if not path.exists():
        raise CommandError(f"no dataset cache at {path}")
    return DatasetCache.load(path)


# -- ingest -------------------------------------------------------------------------------------

def _cmapss_files(args) -> tuple[Path, Path | None, Path | None]:
    src = Path(args.input)
    if src.is_dir():
        train = src / f"train_{args.subset}.txt"
        test = src / f"test_{args.subset}.txt"
        truth = src / f"RUL_{args.subset}.txt"
        return train, (test if test.exists() else None), (truth if truth.exists() else None)
    return src, Path(args.test) if args.test else None, Path(args.truth) if args.truth else None


def cmd_ingest(args, manifest: RunManifest) -> int:
    out = Path(args.out)
    cache_file = out / "cache.npz"
    if cache_file.exists() and not args.force:
        raise CommandError(f"{cache_file} exists; pass --force to overwrite")
    if args.format == "cmapss":
        train_path, test_path, truth_path = _cmapss_files(args)
        train = load_cmapss(train_path, drop_settings=args.drop_settings)
        test = load_cmapss(test_path, drop_settings=args.drop_settings) if test_path else []
        truths = load_rul_truth(truth_path) if truth_path else None
        paths = [str(p) for p in (train_path, test_path, truth_path) if p]
    else:
        sensors = args.sensor_cols.split(",") if args.sensor_cols else None
        read = lambda p: load_generic_csv(p, args.samples_per_cycle, args.unit_col, args.cycle_col, sensors,
                                          args.sample_col)
        train = read(args.input)
        test = read(args.test) if args.test else []
        truths = load_rul_truth(args.truth) if args.truth else None
        paths = [p for p in (args.input, args.test, args.truth) if p]
    if truths is not None and len(truths) != len(test):
        raise CommandError(f"{len(truths)} truth values for {len(test)} test units")
    meta = {"format": args.format, "sources": paths, "drop_settings": bool(args.drop_settings)}
    cache = build_cache(train, test, truths, rul_cap=args.rul_cap, meta=meta)
    out.mkdir(parents=True, exist_ok=True)
    cache.save(cache_file)
    stats = [{"kind": "split", "split": "train", "units": len(train), "cycles": int(sum(u.length for u in train))},
             {"kind": "split", "split": "test", "units": len(test), "cycles": int(sum(u.length for u in test))},
             {"kind": "normalizer", **cache.normalizer.to_dict()},
             {"kind": "labels", "rul_cap": args.rul_cap}]
    write_jsonl(out / "stats.jsonl", stats, "ingest", __version__)
    manifest.dataset_paths = paths
    manifest.outputs += [str(cache_file), str(out / "stats.jsonl")]
    manifest.extra.update(rul_cap=args.rul_cap, train_units=len(train), test_units=len(test))
    print(f"cached {len(train)} train / {len(test)} test units -> {cache_file}")
    return 0


# -- train --------------------------------------------------------------------------------------

def resolve_config(args) -> ModelConfig:
    if args.config and args.baseline:
        raise CommandError("give either --config or --baseline, not both")
    if args.config:
        cfg = ModelConfig.load(args.config)
    elif args.baseline == "fclstm":
        cfg = fclstm_baseline(args.window or 1)
    elif args.baseline == "eclstm-ablation":
        cfg = eclstm_ablation(args.window or 1)
    else:
        raise CommandError("one of --config or --baseline is required")
    if args.window and args.config:
        cfg.window_size = args.window
    if getattr(args, "batch_size", None):
        cfg.batch_size = args.batch_size
    return cfg


def train_and_evaluate(cfg: ModelConfig, cache: DatasetCache, seed: int, epochs: int, lr: float = 1e-3,
                       max_train_examples: int | None = None):
    """Train on every training unit; predict each test unit at its last cycle."""
    t0 = time.perf_counter()
    n, m = cache.train[0].n_sensors, cache.train[0].samples_per_cycle
    model = assemble_model(cfg, n, m, seed)
    train = cache.train_examples(cfg.window_size, cfg.sequence_length)
    if max_train_examples and len(train) > max_train_examples:
        pick = np.random.default_rng([seed, 7]).choice(len(train), max_train_examples, replace=False)
        train = train.select(np.sort(pick))
    spec = TrainSpec(epochs=epochs, batch_size=cfg.batch_size, lr=lr, seed=seed, report_every=0)
    state = train_model(model, train, spec)
    test = cache.test_examples(cfg.window_size, cfg.sequence_length)
    preds = predict(model, test)
    ids = test.example_unit_ids()
    report = EvalReport.build(ids, test.targets, preds, time.perf_counter() - t0, seed)
    return model, report, state.history


def _seed_list(args) -> list[int]:
    base = args.seed if args.seed is not None else _default_seed()
    return [base + k for k in range(args.seeds)]


def cmd_train(args, manifest: RunManifest) -> int:
    cfg = resolve_config(args)
    cache = _load_cache(args.cache)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.cfg")
    manifest.outputs.append(str(out / "config.cfg"))
    records = []
    for seed in _seed_list(args):
        try:
            model, rep, hist = train_and_evaluate(cfg, cache, seed, args.epochs, args.lr, args.max_train_examples)
        except InfeasibleConfigError as err:
            raise CommandError(f"infeasible configuration at stage '{err.stage}': {err.reason}") from err
        write_predictions(out / f"predictions_seed{seed}.csv", rep.unit_ids, rep.truths, rep.preds)
        model.save(out / f"model_seed{seed}.npz")
        manifest.outputs += [str(out / f"predictions_seed{seed}.csv"), str(out / f"model_seed{seed}.npz")]
        records += [{"kind": "epoch", "seed": seed, **h} for h in hist]
        records.append({"kind": "eval", **rep.summary()})
        print(f"seed {seed}: rmse {rep.rmse:.4f} score {rep.score:.2f}")
    evals = [r for r in records if r["kind"] == "eval"]
    agg = _aggregate(evals)
    records.append({"kind": "summary", **agg})
    write_jsonl(out / "report.jsonl", records, "train", __version__)
    manifest.outputs.append(str(out / "report.jsonl"))
    manifest.extra.update(agg)
    print(f"rmse {agg['rmse_mean']:.4f} +/- {agg['rmse_std']:.4f} over {agg['n_seeds']} seed(s)")
    return 0


def _aggregate(evals: list[dict]) -> dict:
    rmse = np.array([e["rmse"] for e in evals])
    score = np.array([e["score"] for e in evals])
    return {"n_seeds": len(evals), "rmse_mean": float(rmse.mean()), "rmse_std": float(rmse.std()),
            "score_mean": float(score.mean()), "score_std": float(score.std())}


# -- evaluate ------------------------------------------------------------------------------------

def _read_truth(path: str) -> dict[str, float]:
    p = Path(path)
    with open(p) as fh:
        first = fh.readline()
    if "unit_id" in first:
        with open(p, newline="") as fh:
            return {r["unit_id"]: float(r["true_rul"]) for r in csv.DictReader(fh)}
    values = load_rul_truth(p)
    return {str(i + 1): float(v) for i, v in enumerate(values)}


def cmd_evaluate(args, manifest: RunManifest) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.pred:
        ids, truths, preds = read_predictions(args.pred)
        manifest.dataset_paths.append(args.pred)
        if args.truth:
            truth_map = _read_truth(args.truth)
            manifest.dataset_paths.append(args.truth)
            if set(truth_map) != set(ids):
                missing = sorted(set(ids) ^ set(truth_map))
                raise CommandError(f"unit mismatch between predictions and truths: {missing[:10]}")
            truths = np.array([truth_map[u] for u in ids])
        if np.any(np.isnan(truths)):
            raise CommandError("predictions carry no true_rul; pass --truth")
    elif args.model and args.cache:
        model = Model.load(args.model)
        cache = _load_cache(args.cache)
        test = cache.test_examples(model.cfg.window_size, model.cfg.sequence_length)
        ids, truths, preds = list(test.example_unit_ids()), test.targets, predict(model, test)
        manifest.dataset_paths += [args.model, str(_cache_path(args.cache))]
    else:
        raise CommandError("give --pred (with optional --truth) or --model with --cache")
    rep = EvalReport.build(ids, truths, preds, percent=args.percent)
    write_jsonl(out / "report.jsonl", [{"kind": "eval", **rep.summary()}], "evaluate", __version__)
    manifest.outputs.append(str(out / "report.jsonl"))
    print(f"rmse {rep.rmse:.5f} score {rep.score:.5f} units {len(ids)}")
    if args.percent:
        er, mean = eval_percent_error(truths, preds)
        with open(out / "percent_error.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["unit_id", "actual_rul", "pred_rul", "percent_error"])
            for u, r, p, e in zip(ids, truths, preds, er):
                w.writerow([u, repr(float(r)), repr(float(p)), f"{e:.2f}"])
        manifest.outputs.append(str(out / "percent_error.csv"))
        print(f"mean percent error {mean:.2f}%")
    manifest.extra.update(rep.summary())
    return 0


# -- search ---------------------------------------------------------------------------------------

def _search_settings(args) -> SearchSettings:
    base = asdict(SearchSettings.load(args.space)) if args.space else {}
    for key in ("min_budget", "max_budget", "eta", "workers"):
        val = getattr(args, key)
        if val is not None:
            base[key] = val
    if args.wall_clock is not None:
        base["wall_clock_limit"] = args.wall_clock * 3600.0
    if args.limit_brackets is not None:
        base["n_iterations"] = args.limit_brackets
    return SearchSettings(**base)


def _dry_run(args, out: Path, manifest: RunManifest) -> int:
    space = model_space()
    if args.space:
        space = space.restrict(load_space_overrides(args.space))
    cache = _load_cache(args.cache) if args.cache else None
    n = cache.train[0].n_sensors if cache else 24
    m = cache.train[0].samples_per_cycle if cache else 1
    rng = np.random.default_rng(args.seed if args.seed is not None else _default_seed())
    rows = []
    for j in range(args.dry_run):
        cfg = space.sample(rng)
        row = {"kind": "dry_run", "index": j, "config": cfg, "feasible": True}
        try:
            assemble_model(to_model_config(cfg), n, m, 0)
        except InfeasibleConfigError as err:
            row.update(feasible=False, stage=err.stage, reason=err.reason)
        rows.append(row)
    frac = sum(r["feasible"] for r in rows) / max(len(rows), 1)
    rows.append({"kind": "summary", "sampled": len(rows), "feasible_fraction": frac})
    write_jsonl(out / "dry_run.jsonl", rows, "search-dry-run", __version__)
    manifest.outputs.append(str(out / "dry_run.jsonl"))
    manifest.extra["feasible_fraction"] = frac
    print(f"feasible fraction {frac:.3f} over {args.dry_run} sampled configurations")
    return 0


def cmd_search(args, manifest: RunManifest) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.dry_run:
        return _dry_run(args, out, manifest)
    if args.wall_clock is None and args.limit_brackets is None:
        raise CommandError("give --wall-clock HOURS or --limit-brackets N")
    settings = _search_settings(args)
    settings.save(out / "search_config.json")
    seed = args.seed if args.seed is not None else _default_seed()
    manifest.seed = seed
    if args.objective == "surrogate":
        space, evaluator = surrogate_space(), surrogate_evaluator
    else:
        if not args.cache:
            raise CommandError("--cache is required for the cross-validated objective")
        space = model_space()
        if args.space:
            space = space.restrict(load_space_overrides(args.space))
        evaluator = CVObjective(_load_cache(args.cache), lr=args.lr, max_train_examples=args.max_train_examples,
                                memory_limit_mb=args.memory_limit_mb)
        manifest.dataset_paths.append(str(_cache_path(args.cache)))
    history = out / "history.jsonl"
    try:
        res = bohb_run(space, evaluator, settings, seed, history, resume=args.resume, tool_version=__version__)
    except FileExistsError as err:
        raise CommandError(f"{err}; use --resume") from err
    except NoResultError as err:
        raise CommandError(str(err)) from err
    inc = res.incumbent
    if args.objective == "cv":
        to_model_config(inc.config).save(out / "incumbent.cfg")
    (out / "incumbent.json").write_text(json.dumps({"format": "eclstm-incumbent", "version": 1,
                                                    "tool_version": __version__, "record": asdict(inc)}, indent=2))
    budgets = sorted({r.budget for r in res.history})
    summary = [{"kind": "best_over_time", **row} for b in budgets for row in incumbent_trajectory(res.history, b)]
    counts = {s: sum(r.status == s for r in res.history) for s in ("ok", "failed", "infeasible")}
    summary.append({"kind": "summary", "incumbent_id": inc.config_id, "incumbent_loss": inc.loss,
                    "incumbent_budget": inc.budget, "evaluations": len(res.history), **counts})
    write_jsonl(out / "summary.jsonl", summary, "search", __version__)
    manifest.outputs += [str(history), str(out / "incumbent.json"), str(out / "summary.jsonl")]
    if args.objective == "cv":
        manifest.outputs.append(str(out / "incumbent.cfg"))
    manifest.extra.update(incumbent_loss=inc.loss, evaluations=len(res.history))
    print(f"incumbent {inc.config_id} loss {inc.loss:.5f} at budget {inc.budget:g} "
          f"({len(res.history)} evaluations)")
    return 0


# -- ablation -------------------------------------------------------------------------------------

def ablation_table(results: dict[tuple[str, int], list[float]], windows) -> list[dict]:
    rows = []
    for w in windows:
        row = {"window": w}
        for name in ("fclstm", "eclstm"):
            vals = np.array(results[(name, w)])
            row[f"{name}_rmse_mean"] = float(vals.mean())
            row[f"{name}_rmse_std"] = float(vals.std())
        rows.append(row)
    return rows


def cmd_ablation(args, manifest: RunManifest) -> int:
    cache = _load_cache(args.cache)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    windows = [int(w) for w in args.windows.split(",")]
    if args.check_direction and 15 not in windows:
        raise CommandError("--check-direction needs window 15 in --windows")
    seeds = _seed_list(args)
    results: dict[tuple[str, int], list[float]] = {}
    records = []
    for w in windows:
        for name, build in (("fclstm", fclstm_baseline), ("eclstm", eclstm_ablation)):
            cfg = build(w)
            if args.batch_size:
                cfg.batch_size = args.batch_size
            for seed in seeds:
                _, rep, _ = train_and_evaluate(cfg, cache, seed, args.epochs, args.lr, args.max_train_examples)
                results.setdefault((name, w), []).append(rep.rmse)
                records.append({"kind": "eval", "model": name, "window": w, **rep.summary()})
                print(f"{name} w={w} seed={seed}: rmse {rep.rmse:.4f}")
    rows = ablation_table(results, windows)
    with open(out / "ablation.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
        wr.writeheader()
        wr.writerows(rows)
    records += [{"kind": "row", **r} for r in rows]
    write_jsonl(out / "report.jsonl", records, "ablation", __version__)
    manifest.outputs += [str(out / "ablation.csv"), str(out / "report.jsonl")]
    for r in rows:
        print(f"w={r['window']:>3}  fclstm {r['fclstm_rmse_mean']:.3f}+/-{r['fclstm_rmse_std']:.3f}  "
              f"eclstm {r['eclstm_rmse_mean']:.3f}+/-{r['eclstm_rmse_std']:.3f}")
    if args.check_direction:
        r15 = next(r for r in rows if r["window"] == 15)
        ok = r15["eclstm_rmse_mean"] < r15["fclstm_rmse_mean"]
        manifest.extra["direction_holds"] = ok
        if not ok:
            raise CommandError("direction check failed: ECLSTM(w=15) is not better than FCLSTM(w=15)")
        print("direction check passed")
    return 0


# -- parser ---------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eclstm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ing = sub.add_parser("ingest", help="parse, normalize and cache a dataset")
    ing.add_argument("--format", choices=("cmapss", "csv"), required=True)
    ing.add_argument("--in", dest="input", required=True, help="training file, or a C-MAPSS directory")
    ing.add_argument("--out", required=True, help="output directory for the cache")
    ing.add_argument("--subset", default="FD001")
    ing.add_argument("--test")
    ing.add_argument("--truth")
    ing.add_argument("--rul-cap", type=float, default=RUL_CAP)
    ing.add_argument("--drop-settings", action="store_true", help="drop the 3 operational-setting columns")
    ing.add_argument("--samples-per-cycle", type=int, default=1)
    ing.add_argument("--unit-col", default="unit")
    ing.add_argument("--cycle-col", default="cycle")
    ing.add_argument("--sample-col")
    ing.add_argument("--sensor-cols")
    ing.add_argument("--force", action="store_true")

    def common_train(sp):
        sp.add_argument("--cache", required=True)
        sp.add_argument("--seed", type=int, default=None, help="default: $ECLSTM_SEED or 0")
        sp.add_argument("--seeds", type=int, default=1)
        sp.add_argument("--epochs", type=int, default=DEFAULT_EPOCHS)
        sp.add_argument("--lr", type=float, default=1e-3)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--max-train-examples", type=int)
        sp.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="train a configuration and evaluate on the test split")
    tr.add_argument("--config")
    tr.add_argument("--baseline", choices=("fclstm", "eclstm-ablation"))
    tr.add_argument("--window", type=int)
    common_train(tr)

    ev = sub.add_parser("evaluate", help="score predictions against truths")
    ev.add_argument("--pred")
    ev.add_argument("--truth")
    ev.add_argument("--model")
    ev.add_argument("--cache")
    ev.add_argument("--percent", action="store_true")
    ev.add_argument("--out", required=True)

    se = sub.add_parser("search", help="BOHB over the model configuration space")
    se.add_argument("--space", help="search settings JSON")
    se.add_argument("--cache")
    se.add_argument("--objective", choices=("cv", "surrogate"), default="cv")
    lim = se.add_mutually_exclusive_group()
    lim.add_argument("--wall-clock", type=float, help="hours")
    lim.add_argument("--limit-brackets", type=int, help="number of Hyperband iterations (each runs every bracket)")
    se.add_argument("--workers", type=int)
    se.add_argument("--min-budget", type=float)
    se.add_argument("--max-budget", type=float)
    se.add_argument("--eta", type=int)
    se.add_argument("--seed", type=int, default=None)
    se.add_argument("--lr", type=float, default=1e-3)
    se.add_argument("--max-train-examples", type=int)
    se.add_argument("--memory-limit-mb", type=float, help="per-trial cap; larger configs are marked failed")
    se.add_argument("--resume", action="store_true")
    se.add_argument("--dry-run", type=int, nargs="?", const=50, default=0)
    se.add_argument("--out", required=True)

    ab = sub.add_parser("ablation", help="FCLSTM vs ECLSTM across window sizes")
    ab.add_argument("--windows", default=",".join(map(str, DEFAULT_WINDOWS)))
    ab.add_argument("--check-direction", action="store_true")
    common_train(ab)
    return p


COMMANDS = {"ingest": cmd_ingest, "train": cmd_train, "evaluate": cmd_evaluate, "search": cmd_search,
            "ablation": cmd_ablation}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = getattr(args, "seed", None)
    manifest = RunManifest(args.command, getattr(args, "config", None) or getattr(args, "space", None), [],
                           seed if seed is not None else _default_seed(), str(out), started=_now(), argv=argv)
    if getattr(args, "cache", None):
        manifest.dataset_paths.append(str(_cache_path(args.cache)))
    code = 1
    try:
        code = COMMANDS[args.command](args, manifest)
    except (CommandError, DataFormatError, FileNotFoundError, ValueError) as err:
        print(f"eclstm {args.command}: error: {err}", file=sys.stderr)
        manifest.extra["error"] = str(err)
        code = 1
    finally:
        manifest.status = "ok" if code == 0 else "failed"
        manifest.finished = _now()
        manifest.write()
    return code


if __name__ == "__main__":
    sys.exit(main())
