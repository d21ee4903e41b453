"""Command-line front end: single runs, grid campaigns, reports and benchmarks.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import _backend, analysis
from .data import (
    DATA_ROOT_ENV,
    DataError,
    fold_view,
    load_registry,
    make_folds,
    normalize_features,
    resolve_dataset,
    load_csv,
    validate_dataset,
)
from .engine import EngineConfig, RunRecord, run as run_engine
from .genetics import VariationConfig
from .selection import ErrorMatrix, parse_selector

__all__ = [
    "ConfigError",
    "Settings",
    "CampaignConfig",
    "load_settings",
    "cell_seed",
    "expand_configs",
    "campaign_cells",
    "run_cell",
    "run_campaign",
    "collect_results",
    "selbench",
    "main",
]

FULL_GRID = (2, 4, 8, 16, 32, 64, 128)
FULL_DATASETS = (
    "airfoil", "concrete", "energyCooling", "energyHeating",
    "towerData", "wineRed", "wineWhite", "yacht",
)


class ConfigError(ValueError):
    """Invalid configuration file or command-line combination."""


@dataclass(frozen=True)
class DataSettings:
    folds: int = 5
    synthetic_cases: int = 600
    synthetic_seed: int = 0
    normalize: bool = True
    registry: str | None = None
    root: str | None = None


@dataclass(frozen=True)
class CampaignConfig:
    """What a grid campaign runs.

    Every ``(batch_size, tourn_size, shuffle)`` combination becomes one
    BTS/BTSS config, every tournament size one ``Tourn/ts`` config, and
    ``selectors`` adds fixed configs such as ``Ae-Lex``.
    """

    datasets: tuple[str, ...] = FULL_DATASETS
    selectors: tuple[str, ...] = ("Ae-Lex",)
    batch_sizes: tuple[int, ...] = FULL_GRID
    tourn_sizes: tuple[int, ...] = FULL_GRID
    shuffle: tuple[bool, ...] = (True, False)
    tournament: bool = True
    runs: int = 25
    master_seed: int = 0

    def __post_init__(self):
        for name in ("datasets", "selectors", "batch_sizes", "tourn_sizes", "shuffle"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.runs < 1:
            raise ConfigError("campaign.runs must be >= 1")
        if any(v < 1 for v in self.batch_sizes + self.tourn_sizes):
            raise ConfigError("batch and tournament sizes must be >= 1")


@dataclass(frozen=True)
class Settings:
    population_size: int = 1000
    generations: int = 1000
    selector: str = "Ae-Lex"
    variation: VariationConfig = field(default_factory=VariationConfig)
    data: DataSettings = field(default_factory=DataSettings)
    campaign: CampaignConfig = field(default_factory=CampaignConfig)

    def engine_config(self, selector: str, seed: int) -> EngineConfig:
        return EngineConfig(self.population_size, self.generations, selector, self.variation, seed)


def _section(doc: dict, name: str, cls, rename: dict | None = None) -> dict:
    raw = dict(doc.get(name, {}))
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in dataclasses.fields(cls)} | set(rename or {})
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"[{name}]: unknown keys {unknown}")
    for old, new in (rename or {}).items():
        if old in raw:
            raw[new] = raw.pop(old)
    return raw


def load_settings(path=None) -> Settings:
    """Parse a TOML config; anything left out keeps its full-scale default.

    Sections: ``[engine]`` (population_size, generations, selector),
    ``[variation]``, ``[data]`` and ``[campaign]``.
    """
    doc: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    unknown = sorted(set(doc) - {"engine", "variation", "data", "campaign"})
    if unknown:
        raise ConfigError(f"unknown sections {unknown}")
    engine = _section(doc, "engine", Settings, {"population": "population_size"})
    for bad in ("variation", "data", "campaign"):
        if bad in engine:
            raise ConfigError(f"[engine]: unknown key {bad!r}")
    try:
        variation = VariationConfig(**_section(doc, "variation", VariationConfig))
        data = DataSettings(**_section(doc, "data", DataSettings))
        campaign = CampaignConfig(**_section(doc, "campaign", CampaignConfig))
        settings = Settings(variation=variation, data=data, campaign=campaign, **engine)
        parse_selector(settings.selector)
        for s in campaign.selectors:
            parse_selector(s)
        settings.engine_config(settings.selector, 0)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    return settings


def cell_seed(master_seed: int, dataset: str, config_id: str, run_index: int) -> int:
    """64-bit seed: first 8 bytes (little endian) of
    ``sha256("<master_seed>|<dataset>|<config_id>|<run_index>")``."""
    key = f"{master_seed}|{dataset}|{config_id}|{run_index}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def split_seed(master_seed: int, dataset: str) -> int:
    """Seed of the fold partition; shared by every config of a dataset."""
    return cell_seed(master_seed, dataset, "folds", 0)


def expand_configs(campaign: CampaignConfig) -> list[str]:
    """Config ids of a campaign: fixed selectors, then the BTS grid, then tournaments."""
    ids: list[str] = []
    for s in campaign.selectors:
        ids.append(parse_selector(s).config_id)
    for shuffle in campaign.shuffle:
        for bs in campaign.batch_sizes:
            for ts in campaign.tourn_sizes:
                ids.append(f"{'BTSS' if shuffle else 'BTS'}/{bs}/{ts}")
    if campaign.tournament:
        ids.extend(f"Tourn/{ts}" for ts in campaign.tourn_sizes)
    seen = set()
    return [i for i in ids if not (i in seen or seen.add(i))]


@dataclass(frozen=True)
class Cell:
    dataset: str
    config_id: str
    run_index: int
    seed: int

    def path(self, root) -> Path:
        return Path(root) / self.dataset / analysis.safe_name(self.config_id) / f"run_{self.run_index}" / "record.json"


def campaign_cells(settings: Settings) -> list[Cell]:
    c = settings.campaign
    return [
        Cell(ds, cid, i, cell_seed(c.master_seed, ds, cid, i))
        for ds in c.datasets
        for cid in expand_configs(c)
        for i in range(c.runs)
    ]


def load_split(settings: Settings, dataset: str, run_index: int, master_seed: int):
    """Train/test pair for run ``run_index``: fold ``run_index % folds`` is held out."""
    d = settings.data
    registry = load_registry(d.registry) if d.registry else None
    ds = resolve_dataset(dataset, registry, d.synthetic_cases, d.synthetic_seed, d.root)
    split = make_folds(ds.n_cases, d.folds, split_seed(master_seed, dataset))
    train, test = fold_view(ds, split, run_index % d.folds)
    if d.normalize:
        train, (test,) = normalize_features(train, [test])
    return train, test


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def run_cell(settings: Settings, cell: Cell, root) -> RunRecord:
    train, test = load_split(settings, cell.dataset, cell.run_index, settings.campaign.master_seed)
    rec = run_engine(settings.engine_config(cell.config_id, cell.seed), train, test)
    rec.meta.update(dataset=cell.dataset, run_index=cell.run_index,
                    master_seed=settings.campaign.master_seed)
    path = cell.path(root)
    _atomic_write(path.with_name("record.csv"), rec.to_csv())
    # record.json goes last: its presence marks the cell as complete
    _atomic_write(path, rec.to_json())
    return rec


def _run_cell_job(args):
    settings, cell, root = args
    run_cell(settings, cell, root)
    return cell


def run_campaign(settings: Settings, root, jobs: int = 1, log=None) -> list[Cell]:
    """Run every missing cell under ``root``; completed cells are skipped."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "campaign": dataclasses.asdict(settings.campaign),
        "population_size": settings.population_size,
        "generations": settings.generations,
        "variation": dataclasses.asdict(settings.variation),
        "data": dataclasses.asdict(settings.data),
        "configs": expand_configs(settings.campaign),
    }
    _atomic_write(root / "manifest.json", json.dumps(manifest, indent=1))
    todo = [c for c in campaign_cells(settings) if not c.path(root).exists()]
    # fail on unusable data before starting any work
    for ds in sorted({c.dataset for c in todo}):
        load_split(settings, ds, 0, settings.campaign.master_seed)
    if jobs <= 1:
        for n, cell in enumerate(todo, 1):
            run_cell(settings, cell, root)
            if log:
                log(f"[{n}/{len(todo)}] {cell.dataset} {cell.config_id} run {cell.run_index}")
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for n, cell in enumerate(pool.map(_run_cell_job, [(settings, c, root) for c in todo]), 1):
                if log:
                    log(f"[{n}/{len(todo)}] {cell.dataset} {cell.config_id} run {cell.run_index}")
    return todo


def collect_results(root, warn=None) -> dict[str, list[analysis.ConfigResult]]:
    """Per dataset, one :class:`ConfigResult` per config found under ``root``."""
    root = Path(root)
    records: dict[str, dict[str, list[RunRecord]]] = {}
    for path in sorted(root.glob("*/*/run_*/record.json")):
        rec = RunRecord.from_json(path.read_text())
        ds = path.parts[-4]
        records.setdefault(ds, {}).setdefault(rec.config_id, []).append(rec)
    manifest_path = root / "manifest.json"
    if warn and manifest_path.exists():
        man = json.loads(manifest_path.read_text())
        runs = man["campaign"]["runs"]
        for ds in man["campaign"]["datasets"]:
            for cid in man["configs"]:
                have = len(records.get(ds, {}).get(cid, []))
                if have < runs:
                    warn(f"warning: {ds} {cid}: {have} of {runs} runs present")
    out = {}
    for ds, by_cfg in records.items():
        out[ds] = [
            analysis.config_result_from_records(
                cid, sorted(recs, key=lambda r: r.meta.get("run_index", 0)))
            for cid, recs in sorted(by_cfg.items())
        ]
    return out


def selbench(ns: Sequence[int], n_cases: int, selectors: Sequence[str], reps: int = 20,
             k: int | None = None, seed: int = 0) -> list[dict]:
    """Median wall time of each selector on uniform [0, 1) error matrices.

    ``k`` defaults to the population size. A fresh matrix is drawn per
    repetition; epsilon computation is included in Ae-Lex timings.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    rows = []
    for n in ns:
        kk = n if k is None else k
        mats = [ErrorMatrix(rng.random((n, n_cases))) for _ in range(reps)]
        for sel_id in selectors:
            sel = parse_selector(sel_id)
            sel.select(mats[0], kk, rng)  # warm-up
            times = []
            for em in mats:
                t0 = time.perf_counter()
                sel.select(em, kk, rng)
                times.append(time.perf_counter() - t0)
            rows.append({
                "selector": sel.config_id, "N": n, "T": n_cases, "k": kk,
                "reps": reps, "backend": _backend.name(),
                "median_seconds": analysis.mmae(times),
            })
    return rows


# command handlers


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _print_err(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def cmd_run(args) -> int:
    settings = load_settings(args.config)
    if args.dataset is None:
        raise ConfigError("--dataset is required")
    selector = parse_selector(args.selector or settings.selector).config_id
    seed = args.seed if args.seed is not None else 0
    train, test = load_split(settings, args.dataset, args.run_index, seed)
    rec = run_engine(settings.engine_config(selector, seed), train, test)
    rec.meta.update(dataset=args.dataset, run_index=args.run_index)
    out = Path(args.out or ".")
    _atomic_write(out / "record.json", rec.to_json())
    _atomic_write(out / "record.csv", rec.to_csv())
    print(f"{selector} on {args.dataset}: train MAE {rec.final_train_mae:.6g}, "
          f"test MAE {rec.final_test_mae:.6g}, {rec.total_seconds:.2f}s -> {out}")
    return 0


def cmd_grid(args) -> int:
    settings = load_settings(args.config)
    if args.seed is not None:
        settings = dataclasses.replace(
            settings, campaign=dataclasses.replace(settings.campaign, master_seed=args.seed))
    if args.dataset:
        settings = dataclasses.replace(
            settings, campaign=dataclasses.replace(settings.campaign, datasets=tuple(args.dataset)))
    out = Path(args.out or "campaign")
    done = run_campaign(settings, out, args.jobs, log=None if args.quiet else _print_err)
    print(f"{len(done)} cells run, campaign in {out}")
    return 0


def cmd_report(args) -> int:
    results = collect_results(args.campaign, warn=_print_err)
    if not results:
        raise DataError(f"no run records under {args.campaign}")
    out = Path(args.out or Path(args.campaign) / "report")
    for ds, res in sorted(results.items()):
        ids = [r.config_id for r in res]
        if args.baseline not in ids:
            _print_err(f"warning: {ds}: baseline {args.baseline} missing, skipped")
            continue
        table = analysis.write_report(out / ds, res, args.baseline, args.alpha, args.top_k)
        print(f"{ds}:")
        for row in table.rows:
            mark = {"none": "", "plus": "+", "minus": "-"}[row.mark]
            print(f"  {row.config_id:14s} MMAE {row.mmae:.6g}{mark:2s} speedup {row.speedup:.2f}")
    return 0


def cmd_selbench(args) -> int:
    selectors = [s for s in args.selectors.split(",") if s]
    for s in selectors:
        parse_selector(s)
    if min(args.n) < 1 or args.t < 1 or (args.k is not None and args.k < 1) or args.reps < 1:
        raise ConfigError("N, T, k and reps must be >= 1")
    backend = None if args.backend == "auto" else args.backend
    if backend and backend not in _backend.AVAILABLE:
        raise ConfigError(f"backend {backend!r} not available")
    with _backend.use_backend(backend or _backend.name()):
        rows = selbench(args.n, args.t, selectors, args.reps, args.k, args.seed or 0)
    lines = ["selector,N,T,k,reps,backend,median_seconds"]
    lines += [f"{r['selector']},{r['N']},{r['T']},{r['k']},{r['reps']},{r['backend']},{r['median_seconds']!r}"
              for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        _atomic_write(Path(args.out), text)
    sys.stdout.write(text)
    return 0


def cmd_validate_data(args) -> int:
    settings = load_settings(args.config)
    registry = load_registry(settings.data.registry)
    names = args.dataset or sorted(registry)
    root = Path(settings.data.root or os.environ.get(DATA_ROOT_ENV, "."))
    failed = False
    for name in names:
        if name not in registry:
            raise ConfigError(f"{name!r} is not in the dataset registry")
        entry = registry[name]
        path = Path(entry["path"])
        path = path if path.is_absolute() else root / path
        try:
            ds = load_csv(path, entry["target_column"], entry.get("header"), name=name)
        except DataError as exc:
            print(f"FAIL {name}: {exc}")
            failed = True
            continue
        problems = validate_dataset(ds, entry)
        failed |= bool(problems)
        print(f"{'FAIL' if problems else 'ok  '} {name}: {ds.n_cases} rows, {ds.n_features} features"
              + (f" ({'; '.join(problems)})" if problems else ""))
    return 2 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="btsgp", description="GP symbolic regression with pluggable parent selection.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="one evolutionary run")
    r.add_argument("--config", help="TOML config file")
    r.add_argument("--dataset", help="synthetic name, registry name or CSV path")
    r.add_argument("--selector", help="override [engine].selector, e.g. BTS/8/16")
    r.add_argument("--seed", type=int, help="run seed (also seeds the fold split)")
    r.add_argument("--run-index", type=int, default=0, help="selects the held-out fold")
    r.add_argument("--out", help="output directory (default: .)")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("grid", help="run (or resume) a campaign")
    g.add_argument("--config", help="TOML config file")
    g.add_argument("--dataset", action="append", help="override campaign datasets (repeatable)")
    g.add_argument("--seed", type=int, help="override the master seed")
    g.add_argument("--jobs", type=int, default=1, help="parallel cells")
    g.add_argument("--out", help="campaign directory (default: ./campaign)")
    g.add_argument("--quiet", action="store_true")
    g.set_defaults(func=cmd_grid)

    rp = sub.add_parser("report", help="summarise a campaign")
    rp.add_argument("campaign", help="campaign directory")
    rp.add_argument("--baseline", default="Ae-Lex")
    rp.add_argument("--alpha", type=float, default=0.05)
    rp.add_argument("--top-k", type=int, default=5)
    rp.add_argument("--out", help="report directory (default: <campaign>/report)")
    rp.set_defaults(func=cmd_report)

    b = sub.add_parser("selbench", help="time selection operators on random error matrices")
    b.add_argument("--n", type=int, nargs="+", default=[1000], help="population sizes")
    b.add_argument("--t", type=int, default=1000, help="number of cases")
    b.add_argument("--k", type=int, help="parents per call (default: N)")
    b.add_argument("--selectors", default="Lex,Ae-Lex,BTS/8/16,Tourn/8")
    b.add_argument("--reps", type=int, default=20)
    b.add_argument("--seed", type=int)
    b.add_argument("--backend", default="auto", choices=["auto", "cython", "python"])
    b.add_argument("--out", help="also write the CSV here")
    b.set_defaults(func=cmd_selbench)

    v = sub.add_parser("validate-data", help="check registry datasets against their expected shapes")
    v.add_argument("--config", help="TOML config file ([data] registry/root)")
    v.add_argument("--dataset", action="append", help="dataset name (repeatable; default all)")
    v.set_defaults(func=cmd_validate_data)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        _print_err(f"data error: {exc}")
        return 2
    except (ConfigError, ValueError, KeyError) as exc:
        _print_err(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
