"""Command line entry point: run the experiment stages from one YAML config.

Stages read the previous stage's files from the output directory::

    synth | ingest -> microdata.csv
    swap           -> protected.csv, swap_report.json
    tabulate       -> units.json, workloads/, tables/, consistency.json
    recon-diff     -> recon_diff/
    recon-opt      -> recon_opt/
    eval           -> report.json, report.txt, scatter/

Each stage records its seed and output checksums in ``manifest.json``;
wall-clock timings go to ``timings.json`` so the manifest stays reproducible.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import shutil
import sys
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from . import artifacts
from .datamodel import BLOCK_RECON_ATTRS, TRACT_RECON_ATTRS, Dataset, SchemaError
from .ingest import (
    ConfigError,
    SynthConfig,
    export_microdata,
    generate_synthetic,
    load_microdata,
    sample_tracts,
    select_experiment_blocks,
)
from .recon_diff import (
    InconsistentTablesError,
    MissingTableError,
    PartialReconstruction,
    apply_assignment,
    enumerate_ethnicity_assignments,
    reconstruct_block,
    reconstruct_tract,
)
from .recon_opt import OptConfig, OptConfigError, QuerySet, published_total, public_baseline, run_crr
from .riskeval import RiskReport, evaluate_unit
from .swap import SwapConfig, apply_swap
from .tabulate import builtin_workloads, check_consistency, dump_workloads, load_workloads, tabulate

logger = logging.getLogger("censusrecon")

LEVELS = ("tract", "block")
RECON_ATTRS = {"tract": TRACT_RECON_ATTRS, "block": BLOCK_RECON_ATTRS}
METRIC_ATTRS = ("sex", "age", "age_p12", "age_pct12", "race_group", "hispanic")


class StageInputError(RuntimeError):
    def __init__(self, stage: str, path: Path, producer: str):
        self.stage, self.path, self.producer = stage, path, producer
        super().__init__(f"stage '{stage}' needs {path}, which is written by '{producer}'; run that stage first")


class StrictModeError(RuntimeError):
    pass


def derive_seed(seed: int, *parts: object) -> int:
    """Stable 63-bit seed for a named stage, unit or run."""
    text = "/".join([str(seed)] + [str(p) for p in parts])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big") >> 1


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _check_keys(section: str, d: Mapping[str, Any], allowed: Sequence[str]) -> None:
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigError(f"unknown key(s) {sorted(extra)} in section '{section}'")


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str | None = None
    synth: dict[str, Any] | None = field(default_factory=dict)
    input_path: str | None = None
    column_map: dict[str, str] = field(default_factory=dict)
    delimiter: str = ","
    swap_enabled: bool = True
    swap: dict[str, Any] = field(default_factory=dict)
    include_swap_pairs: bool = False
    tract_sample: int | None = None
    experiment_blocks: bool = True
    blocks: list[str] = field(default_factory=list)
    workloads: dict[str, str] = field(default_factory=lambda: {"tract": "builtin", "block": "builtin"})
    diff_enabled: bool = True
    ethnicity_samples: int = 0
    crr_enabled: bool = True
    crr_levels: list[str] = field(default_factory=lambda: ["block"])
    crr_runs: int = 20
    init_modes: list[str] = field(default_factory=lambda: ["random", "baseline"])
    rule: str = "argmax"
    optimizer: dict[str, Any] = field(default_factory=dict)
    k_list: list[int] = field(default_factory=lambda: [1, 5, 10, 20, 50])
    m_list: list[int] = field(default_factory=lambda: [1, 2, 3])
    qi_attrs: list[str] = field(default_factory=lambda: ["sex", "age", "race_group"])
    conf_attrs: list[str] = field(default_factory=lambda: ["hispanic"])
    exhaustive: bool = True
    base_dir: Path = field(default=Path("."), compare=False)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base_dir: Path | str = ".") -> RunConfig:
        d = dict(d or {})
        _check_keys(
            "top level",
            d,
            ["seed", "output_dir", "input", "swap", "geography", "workloads", "recon_diff", "recon_opt", "metrics"],
        )
        cfg = cls(base_dir=Path(base_dir))
        cfg.seed = int(d.get("seed", 0))
        cfg.output_dir = d.get("output_dir")

        inp = dict(d.get("input") or {"synth": {}})
        _check_keys("input", inp, ["synth", "path", "column_map", "delimiter"])
        if ("synth" in inp) == ("path" in inp):
            raise ConfigError("section 'input' needs exactly one of 'synth' or 'path'")
        if "path" in inp:
            cfg.synth = None
            cfg.input_path = str(inp["path"])
            cfg.column_map = dict(inp.get("column_map") or {})
            cfg.delimiter = str(inp.get("delimiter", ","))
        else:
            cfg.synth = dict(inp["synth"] or {})

        swap = dict(d.get("swap") or {})
        _check_keys("swap", swap, ["enabled", "include_pairs", "key_attrs", "match_attrs", "base_rate", "size_exponent", "seed"])
        cfg.swap_enabled = bool(swap.pop("enabled", True))
        cfg.include_swap_pairs = bool(swap.pop("include_pairs", False))
        cfg.swap = swap

        geo = dict(d.get("geography") or {})
        _check_keys("geography", geo, ["tract_sample", "experiment_blocks", "blocks"])
        cfg.tract_sample = None if geo.get("tract_sample") is None else int(geo["tract_sample"])
        cfg.experiment_blocks = bool(geo.get("experiment_blocks", True))
        cfg.blocks = [str(b) for b in geo.get("blocks") or []]

        wl = dict(d.get("workloads") or {})
        _check_keys("workloads", wl, LEVELS)
        cfg.workloads = {lvl: str(wl.get(lvl, "builtin")) for lvl in LEVELS}

        diff = dict(d.get("recon_diff") or {})
        _check_keys("recon_diff", diff, ["enabled", "ethnicity_samples"])
        cfg.diff_enabled = bool(diff.get("enabled", True))
        cfg.ethnicity_samples = int(diff.get("ethnicity_samples", 0))

        opt = dict(d.get("recon_opt") or {})
        _check_keys("recon_opt", opt, ["enabled", "levels", "runs", "init_modes", "rule", "optimizer"])
        cfg.crr_enabled = bool(opt.get("enabled", True))
        cfg.crr_levels = [str(x) for x in opt.get("levels", ["block"])]
        cfg.crr_runs = int(opt.get("runs", 20))
        cfg.init_modes = [str(x) for x in opt.get("init_modes", ["random", "baseline"])]
        cfg.rule = str(opt.get("rule", "argmax"))
        cfg.optimizer = dict(opt.get("optimizer") or {})

        met = dict(d.get("metrics") or {})
        _check_keys("metrics", met, ["k", "m", "qi_attrs", "conf_attrs", "exhaustive"])
        cfg.k_list = [int(k) for k in met.get("k", cfg.k_list)]
        cfg.m_list = [int(m) for m in met.get("m", cfg.m_list)]
        cfg.qi_attrs = [str(a) for a in met.get("qi_attrs", cfg.qi_attrs)]
        cfg.conf_attrs = [str(a) for a in met.get("conf_attrs", cfg.conf_attrs)]
        cfg.exhaustive = bool(met.get("exhaustive", True))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        try:
            with open(path) as fh:
                doc = yaml.safe_load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        if doc is not None and not isinstance(doc, Mapping):
            raise ConfigError(f"{path}: expected a mapping at the top level")
        return cls.from_dict(doc or {}, base_dir=path.parent)

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def validate(self) -> None:
        if self.synth is not None:
            self.synth_config()
        elif not self.resolve(self.input_path).exists():
            raise ConfigError(f"input file {self.resolve(self.input_path)} not found")
        self.swap_config()
        self.opt_config()
        if self.tract_sample is not None and self.tract_sample < 0:
            raise ConfigError("geography.tract_sample must be >= 0")
        for lvl in LEVELS:
            self.load_workloads(lvl)
        for lvl in self.crr_levels:
            if lvl not in LEVELS:
                raise ConfigError(f"recon_opt.levels: unknown level {lvl!r}")
        for mode in self.init_modes:
            if mode not in ("random", "baseline"):
                raise ConfigError(f"recon_opt.init_modes: unknown mode {mode!r}")
        if self.rule not in ("argmax", "sample"):
            raise ConfigError(f"recon_opt.rule must be argmax or sample, got {self.rule!r}")
        if self.crr_runs < 1:
            raise ConfigError("recon_opt.runs must be >= 1")
        if self.ethnicity_samples < 0:
            raise ConfigError("recon_diff.ethnicity_samples must be >= 0")
        if any(k < 1 for k in self.k_list) or any(m < 1 for m in self.m_list):
            raise ConfigError("metrics.k and metrics.m entries must be >= 1")
        for a in self.qi_attrs + self.conf_attrs:
            if a not in METRIC_ATTRS:
                raise SchemaError(f"metrics attribute {a!r} is not one of {METRIC_ATTRS}")
        if set(self._level_attrs(self.qi_attrs, "block")) & set(self._level_attrs(self.conf_attrs, "block")):
            raise ConfigError("metrics.qi_attrs and metrics.conf_attrs overlap")

    def synth_config(self) -> SynthConfig:
        d = dict(self.synth)
        d.setdefault("seed", derive_seed(self.seed, "synth"))
        return SynthConfig.from_dict(d)

    def swap_config(self) -> SwapConfig:
        d = dict(self.swap)
        d.setdefault("seed", derive_seed(self.seed, "swap"))
        try:
            return SwapConfig.from_dict(d)
        except TypeError as exc:
            raise ConfigError(f"swap: {exc}") from None

    def opt_config(self, level: str = "block", init: str = "random", unit: str = "") -> OptConfig:
        d = dict(self.optimizer)
        d.pop("seed", None)
        _check_keys("recon_opt.optimizer", d, [f for f in OptConfig.__dataclass_fields__ if f not in ("seed", "init_mode")])
        try:
            return OptConfig.from_dict({**d, "init_mode": init, "seed": derive_seed(self.seed, "recon_opt", level, init, unit)})
        except (OptConfigError, TypeError) as exc:
            raise ConfigError(f"recon_opt.optimizer: {exc}") from None

    def load_workloads(self, level: str):
        src = self.workloads[level]
        if src == "builtin":
            return builtin_workloads(level)
        path = self.resolve(src)
        if not path.exists():
            raise ConfigError(f"workload file {path} not found")
        ws = [w for w in load_workloads(path) if w.geo_level == level]
        if not ws:
            raise ConfigError(f"workload file {path} has no {level}-level workloads")
        return ws

    @staticmethod
    def _level_attrs(attrs: Sequence[str], level: str) -> tuple[str, ...]:
        age = "age_p12" if level == "block" else "age_pct12"
        return tuple(age if a.startswith("age") else a for a in attrs)

    def metric_attrs(self, level: str) -> tuple[tuple[str, ...], tuple[str, ...]]:
        return self._level_attrs(self.qi_attrs, level), self._level_attrs(self.conf_attrs, level)

    def to_dict(self) -> dict[str, Any]:
        """Fully resolved configuration; excludes the output directory so the
        hash does not depend on where a run is written."""
        inp: dict[str, Any]
        if self.synth is not None:
            inp = {"synth": self.synth_config().to_dict()}
        else:
            inp = {"path": self.input_path, "column_map": self.column_map, "delimiter": self.delimiter}
        swap = vars(self.swap_config()).copy()
        return {
            "seed": self.seed,
            "input": inp,
            "swap": {"enabled": self.swap_enabled, "include_pairs": self.include_swap_pairs, **swap},
            "geography": {"tract_sample": self.tract_sample, "experiment_blocks": self.experiment_blocks, "blocks": self.blocks},
            "workloads": self.workloads,
            "recon_diff": {"enabled": self.diff_enabled, "ethnicity_samples": self.ethnicity_samples},
            "recon_opt": {
                "enabled": self.crr_enabled,
                "levels": self.crr_levels,
                "runs": self.crr_runs,
                "init_modes": self.init_modes,
                "rule": self.rule,
                "optimizer": {k: v for k, v in self.opt_config().to_dict().items() if k not in ("seed", "init_mode")},
            },
            "metrics": {
                "k": self.k_list,
                "m": self.m_list,
                "qi_attrs": self.qi_attrs,
                "conf_attrs": self.conf_attrs,
                "exhaustive": self.exhaustive,
            },
        }

    def config_hash(self) -> str:
        return hashlib.sha256(artifacts.canonical_json(self.to_dict()).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Stage plumbing
# ---------------------------------------------------------------------------


@dataclass
class Context:
    config: RunConfig
    out: Path
    workers: int = 1
    strict: bool = False

    def need(self, stage: str, rel: str, producer: str) -> Path:
        path = self.out / rel
        if not path.exists():
            raise StageInputError(stage, path, producer)
        return path

    def record(self, stage: str, outputs: Sequence[Path], seeds: Mapping[str, int] | None = None, elapsed: float = 0.0):
        manifest_path = self.out / "manifest.json"
        manifest = artifacts.read_json(manifest_path) if manifest_path.exists() else {}
        if manifest.get("config_sha256") not in (None, self.config.config_hash()):
            logger.warning("manifest in %s was written by a different config; starting a new one", self.out)
            manifest = {}
        manifest["config_sha256"] = self.config.config_hash()
        manifest["global_seed"] = self.config.seed
        stages = manifest.setdefault("stages", {})
        stages[stage] = {
            "seeds": dict(seeds or {}),
            "outputs": {p.relative_to(self.out).as_posix(): artifacts.sha256_file(p) for p in sorted(outputs)},
        }
        artifacts.write_json(manifest_path, manifest)
        timings_path = self.out / "timings.json"
        timings = artifacts.read_json(timings_path) if timings_path.exists() else {}
        timings[stage] = {"seconds": round(elapsed, 3), "workers": self.workers}
        artifacts.write_json(timings_path, timings)


def _load_dataset(ctx: Context, stage: str, rel: str, producer: str) -> Dataset:
    return load_microdata(ctx.need(stage, rel, producer))


def stage_synth(ctx: Context) -> tuple[list[Path], dict[str, int]]:
    cfg = ctx.config
    if cfg.synth is None:
        raise ConfigError("the config reads microdata from a file; use 'ingest' instead of 'synth'")
    sc = cfg.synth_config()
    ds = generate_synthetic(sc)
    path = ctx.out / "microdata.csv"
    export_microdata(ds, path)
    logger.info("synth: %d records in %d blocks", len(ds), len(ds.unit_ids("block")))
    return [path], {"synth": sc.seed}


def stage_ingest(ctx: Context) -> tuple[list[Path], dict[str, int]]:
    cfg = ctx.config
    if cfg.input_path is None:
        raise ConfigError("the config generates synthetic data; use 'synth' instead of 'ingest'")
    ds = load_microdata(cfg.resolve(cfg.input_path), cfg.column_map, cfg.delimiter)
    path = ctx.out / "microdata.csv"
    export_microdata(ds, path)
    logger.info("ingest: %d records", len(ds))
    return [path], {}


def stage_swap(ctx: Context) -> tuple[list[Path], dict[str, int]]:
    ds = _load_dataset(ctx, "swap", "microdata.csv", "synth/ingest")
    cfg = ctx.config
    out = ctx.out / "protected.csv"
    report_path = ctx.out / "swap_report.json"
    if not cfg.swap_enabled:
        shutil.copyfile(ctx.out / "microdata.csv", out)
        artifacts.write_json(report_path, {"enabled": False})
        return [out, report_path], {}
    sc = cfg.swap_config()
    protected, report = apply_swap(ds, sc)
    export_microdata(protected, out)
    artifacts.write_json(report_path, {"enabled": True, **report.to_dict(include_pairs=cfg.include_swap_pairs)})
    logger.info("swap: %d pairs exchanged (%d selected)", report.n_swapped_pairs, report.n_selected)
    return [out, report_path], {"swap": sc.seed}


def _select_units(ds: Dataset, cfg: RunConfig, seed: int) -> dict[str, list[str]]:
    tracts = ds.unit_ids("tract")
    if cfg.tract_sample is not None:
        tracts = sorted(sample_tracts(ds, cfg.tract_sample, seed))
    present = set(ds.unit_ids("block"))
    blocks: list[str] = select_experiment_blocks(ds) if cfg.experiment_blocks else []
    for b in cfg.blocks:
        if b not in present:
            raise ConfigError(f"geography.blocks: block {b} has no records")
        if b not in blocks:
            blocks.append(b)
    if not cfg.experiment_blocks and not cfg.blocks:
        blocks = list(present)
    return {"tract": sorted(tracts), "block": sorted(blocks)}


def stage_tabulate(ctx: Context) -> tuple[list[Path], dict[str, int]]:
    cfg = ctx.config
    ds = _load_dataset(ctx, "tabulate", "protected.csv", "swap")
    seed = derive_seed(cfg.seed, "tract_sample")
    units = _select_units(ds, cfg, seed)
    outputs = [ctx.out / "units.json"]
    artifacts.write_json(outputs[0], units)
    violations = []
    for level in LEVELS:
        ws = cfg.load_workloads(level)
        wpath = ctx.out / "workloads" / f"{level}.json"
        wpath.parent.mkdir(parents=True, exist_ok=True)
        dump_workloads(ws, wpath)
        outputs.append(wpath)
        tab = tabulate(ds, ws, {level: units[level]})
        outputs += artifacts.write_tables(ctx.out / "tables" / level, tab, ws)
        for unit in sorted(tab):
            violations += [v.to_dict() for v in check_consistency(tab[unit])]
    cpath = ctx.out / "consistency.json"
    artifacts.write_json(cpath, {"n_violations": len(violations), "violations": violations})
    outputs.append(cpath)
    if violations:
        msg = f"tabulate: {len(violations)} consistency violation(s), see {cpath}"
        if ctx.strict:
            raise StrictModeError(msg)
        logger.warning(msg)
    logger.info("tabulate: %d tracts, %d blocks", len(units["tract"]), len(units["block"]))
    return outputs, {"tract_sample": seed}


def _read_level_tables(ctx: Context, stage: str, level: str):
    ctx.need(stage, "units.json", "tabulate")
    wpath = ctx.need(stage, f"workloads/{level}.json", "tabulate")
    ws = load_workloads(wpath)
    for w in ws:
        ctx.need(stage, f"tables/{level}/{w.name}.csv", "tabulate")
    return ws, artifacts.read_tables(ctx.out / "tables" / level, ws)


def stage_recon_diff(ctx: Context) -> tuple[list[Path], dict[str, int]]:
    cfg = ctx.config
    outputs: list[Path] = []
    summary: dict[str, Any] = {"tract": {}, "block": {}}
    seed = derive_seed(cfg.seed, "recon_diff")
    for level, fn in (("tract", reconstruct_tract), ("block", reconstruct_block)):
        _, tab = _read_level_tables(ctx, "recon-diff", level)
        for unit in sorted(tab):
            try:
                partial = fn(tab[unit])
            except (MissingTableError, InconsistentTablesError) as exc:
                summary[level][unit] = {"error": str(exc).strip("'\"")}
                logger.warning("recon-diff: %s %s skipped: %s", level, unit, summary[level][unit]["error"])
                continue
            path = ctx.out / "recon_diff" / level / f"{unit}.csv"
            artifacts.write_partial(path, partial)
            outputs.append(path)
            entry: dict[str, Any] = {
                "exact": partial.exact,
                "total": partial.total(),
                "n_prototypes": len(partial.histogram),
                "coverage": partial.coverage,
                "not_captured": list(partial.not_captured),
            }
            if not partial.exact:
                entry["hispanic_marginals"] = {str(g): n for g, n in sorted(partial.hispanic_marginals.items())}
                entry["n_ethnicity_assignments"] = enumerate_ethnicity_assignments(partial, "count")
                for i in range(cfg.ethnicity_samples):
                    a = enumerate_ethnicity_assignments(partial, "sample", seed=derive_seed(seed, unit, i))
                    spath = ctx.out / "recon_diff" / level / f"{unit}.sample{i}.csv"
                    artifacts.write_partial(spath, _as_partial(partial, apply_assignment(partial, a)))
                    outputs.append(spath)
            summary[level][unit] = entry
    spath = ctx.out / "recon_diff" / "summary.json"
    artifacts.write_json(spath, summary)
    outputs.append(spath)
    return outputs, {"recon_diff": seed}


def _as_partial(partial: PartialReconstruction, hist) -> PartialReconstruction:
    return PartialReconstruction(partial.unit, hist, {**partial.coverage, "hispanic": "sampled completion"}, exact=True)


def stage_recon_opt(ctx: Context) -> tuple[list[Path], dict[str, int]]:
    cfg = ctx.config
    outputs: list[Path] = []
    summary: dict[str, Any] = {"runs": cfg.crr_runs, "rule": cfg.rule, "results": {}}
    for level in cfg.crr_levels:
        ws, tab = _read_level_tables(ctx, "recon-opt", level)
        queries = QuerySet.from_workloads(ws)
        baseline = public_baseline(tab, level) if "baseline" in cfg.init_modes else None
        if baseline is not None:
            summary.setdefault("baseline", {})[level] = {a: v.tolist() for a, v in baseline.items()}
        for init in cfg.init_modes:
            for unit in sorted(tab):
                oc = cfg.opt_config(level, init, unit)
                n_rows = published_total(tab[unit])
                ranked = run_crr(
                    queries.targets(tab[unit]), queries, n_rows, cfg.crr_runs, oc, baseline, cfg.rule, ctx.workers
                )
                base = ctx.out / "recon_opt" / level / init
                artifacts.write_ranked(base / f"{unit}.csv", ranked)
                artifacts.write_losses(base / f"{unit}.losses.csv", ranked.losses)
                outputs += [base / f"{unit}.csv", base / f"{unit}.losses.csv"]
                summary["results"].setdefault(level, {}).setdefault(init, {})[unit] = {
                    "seed": oc.seed,
                    "n_rows": n_rows,
                    "n_prototypes": len(ranked),
                    "final_losses": [h[-1] for h in ranked.losses],
                }
                logger.info("recon-opt: %s %s %s done (%d prototypes)", level, init, unit, len(ranked))
    spath = ctx.out / "recon_opt" / "summary.json"
    artifacts.write_json(spath, summary)
    outputs.append(spath)
    return outputs, {"recon_opt": derive_seed(cfg.seed, "recon_opt")}


def stage_eval(ctx: Context) -> tuple[list[Path], dict[str, int]]:
    cfg = ctx.config
    ds = _load_dataset(ctx, "eval", "protected.csv", "swap")
    opt_summary = ctx.out / "recon_opt" / "summary.json"
    diff_summary = ctx.out / "recon_diff" / "summary.json"
    if not opt_summary.exists() and not diff_summary.exists():
        raise StageInputError("eval", opt_summary, "recon-opt (or recon_diff/summary.json from recon-diff)")
    units_risk = []
    outputs: list[Path] = []

    def evaluate(recon, level: str, unit: str, method: str):
        qi, conf = cfg.metric_attrs(level)
        truth = ds.histogram(RECON_ATTRS[level], level, unit)
        risk = evaluate_unit(recon, truth, unit, level, cfg.k_list, cfg.m_list, qi, conf, cfg.exhaustive, method=method)
        path = ctx.out / "scatter" / level / method / f"{unit}.csv"
        artifacts.write_scatter(path, risk.scatter.pairs())
        outputs.append(path)
        units_risk.append(risk)

    if opt_summary.exists():
        summary = artifacts.read_json(opt_summary)
        for level, by_init in sorted(summary["results"].items()):
            for init, by_unit in sorted(by_init.items()):
                for unit in sorted(by_unit):
                    path = ctx.need("eval", f"recon_opt/{level}/{init}/{unit}.csv", "recon-opt")
                    evaluate(artifacts.read_ranked(path, summary["runs"]), level, unit, f"crr-{init}")
    if diff_summary.exists():
        summary = artifacts.read_json(diff_summary)
        # only tract differencing is fully determined; block output keeps undetermined ethnicity
        for unit, entry in sorted(summary.get("tract", {}).items()):
            if "error" in entry:
                continue
            path = ctx.need("eval", f"recon_diff/tract/{unit}.csv", "recon-diff")
            evaluate(artifacts.read_histogram(path), "tract", unit, "diff")

    report = RiskReport(units_risk, meta={"config_sha256": cfg.config_hash(), "truth": "protected.csv"})
    rpath, tpath = ctx.out / "report.json", ctx.out / "report.txt"
    artifacts.write_json(rpath, report.to_dict())
    tpath.write_text(report.to_text())
    outputs += [rpath, tpath]
    return outputs, {}


STAGES: dict[str, Callable[[Context], tuple[list[Path], dict[str, int]]]] = {
    "synth": stage_synth,
    "ingest": stage_ingest,
    "swap": stage_swap,
    "tabulate": stage_tabulate,
    "recon-diff": stage_recon_diff,
    "recon-opt": stage_recon_opt,
    "eval": stage_eval,
}


def run_stage(name: str, ctx: Context) -> None:
    t0 = time.perf_counter()
    outputs, seeds = STAGES[name](ctx)
    ctx.record(name, outputs, seeds, time.perf_counter() - t0)


def pipeline_stages(cfg: RunConfig) -> list[str]:
    stages = ["synth" if cfg.synth is not None else "ingest", "swap", "tabulate"]
    if cfg.diff_enabled:
        stages.append("recon-diff")
    if cfg.crr_enabled:
        stages.append("recon-opt")
    stages.append("eval")
    return stages


def run_pipeline(cfg: RunConfig, out: Path, workers: int = 1, strict: bool = False) -> Context:
    ctx = Context(cfg, Path(out), workers, strict)
    ctx.out.mkdir(parents=True, exist_ok=True)
    for name in pipeline_stages(cfg):
        run_stage(name, ctx)
    return ctx


# ---------------------------------------------------------------------------
# argparse
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="censusrecon", description="Census table reconstruction experiments.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run config (defaults are used when omitted)")
    common.add_argument("--out", type=Path, help="output directory (overrides output_dir in the config)")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--workers", type=int, default=1, help="max worker processes for reconstruction runs")
    common.add_argument("--strict", action="store_true", help="treat table consistency violations as errors")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(STAGES) + ["pipeline"]:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage" if name != "pipeline" else "run all stages")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict({})
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.validate()
        out = args.out or (cfg.resolve(cfg.output_dir) if cfg.output_dir else None)
        if out is None:
            raise ConfigError("no output directory: pass --out or set output_dir in the config")
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        try:
            Path(out).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {out}: {exc}") from None
        if args.command == "pipeline":
            run_pipeline(cfg, Path(out), args.workers, args.strict)
        else:
            run_stage(args.command, Context(cfg, Path(out), args.workers, args.strict))
    except (ConfigError, SchemaError, OptConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageInputError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return 3
    except StrictModeError as exc:
        print(f"strict mode: {exc}", file=sys.stderr)
        return 4
    except (InconsistentTablesError, MissingTableError) as exc:
        print(f"inconsistent tables: {exc}", file=sys.stderr)
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())
