"""Stage orchestration: generate -> train -> catalog -> intervene -> evaluate.

Every stage writes its outputs plus a ``manifest.json`` under
``<workdir>/<stage>/``.  The manifest records the seed, the chained config
hash for that stage and a sha256 for each file, so a downstream stage can
tell whether its inputs came from the same configuration.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import shutil
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .catalog import (build_climatology, compute_tau, default_land_mask, extract_events,
                      filter_predictable, load_catalog, save_catalog)
from .config import STAGES, RunConfig, dump_config
from .diffusion import DiffusionForecaster, load_params, save_params, train
from .dynamics import generate_paired, load_trajectory, save_trajectory
from .errors import MissingDependencyError, StateError
from .evaluation import (FSS_WINDOWS, PGD_LABEL, TABLE_COLUMNS, EventInputs, EventInterventions,
                         InterventionSettings, calibration_ratio, evaluate_event, guided_label,
                         intervene_event)
from .fld import read_fld, write_fld
from .fields import PERTURBABLE_VARIABLES, AtmosphericState
from .guidance import Perturbation, lambda_grid
from .metrics import pca_basis
from .transfer import load_transfer, save_transfer, train_transfer

log = logging.getLogger(__name__)

LATENT_KEYS = ("rmse_in", "rmse_out", "cos_in", "cos_out")


# ---------------------------------------------------------------- manifests

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
    return path


def write_manifest(stage_dir: Path, stage: str, cfg: RunConfig, extra: dict | None = None) -> dict:
    files = {}
    for p in sorted(stage_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[p.relative_to(stage_dir).as_posix()] = _sha256(p)
    hashes = cfg.stage_hashes()
    man = {
        "stage": stage,
        "seed": cfg.seed,
        "config_hash": hashes[stage],
        "upstream": {s: hashes[s] for s in STAGES[:STAGES.index(stage)]},
        "files": files,
        **(extra or {}),
    }
    _write_json(stage_dir / "manifest.json", man)
    return man


def read_manifest(workdir: Path, stage: str) -> dict | None:
    p = Path(workdir) / stage / "manifest.json"
    if not p.exists():
        return None
    return json.loads(p.read_text())


def require_stage(workdir: Path, stage: str, cfg: RunConfig, force: bool = False) -> dict:
    """Manifest of a finished upstream stage, checked against the current config."""
    man = read_manifest(workdir, stage)
    if man is None:
        raise MissingDependencyError(
            f"no '{stage}' output under {workdir}; run `stormsteer {stage}` first", stage=stage)
    want = cfg.stage_hashes()[stage]
    if man.get("config_hash") != want:
        if not force:
            raise StateError(
                f"'{stage}' output in {workdir} was built from a different configuration "
                f"(hash {man.get('config_hash')} vs {want}); rerun `stormsteer {stage}` or pass --force")
        log.warning("using '%s' output with mismatched config hash (--force)", stage)
    return man


def require_upstream(workdir: Path, stage: str, cfg: RunConfig, force: bool = False) -> dict:
    """Check every stage before ``stage``, earliest first; returns the manifests."""
    return {s: require_stage(workdir, s, cfg, force) for s in STAGES[:STAGES.index(stage)]}


# ---------------------------------------------------------------- worker pool

_CTX: dict = {}


def _fresh_dir(path: Path) -> Path:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def _init_worker(ctx: dict) -> None:
    _CTX.clear()
    _CTX.update(ctx)


def _pool_map(fn, items: list, workers: int, ctx: dict) -> list:
    """Ordered map over ``items``; ``fn(item, ctx)`` runs in-process or in a pool."""
    if workers <= 1 or len(items) <= 1:
        return [fn(it, ctx) for it in items]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(ctx,)) as ex:
        return list(ex.map(_call_with_ctx, [fn] * len(items), items))


def _call_with_ctx(fn, item):
    return fn(item, _CTX)


# ---------------------------------------------------------------- stages

def stage_generate(cfg: RunConfig, workdir: Path, force: bool = False) -> dict:
    out = _fresh_dir(workdir / "generate")
    dyn = cfg.dynamics_config()
    log.info("simulating %d years on a %dx%d grid", cfg.data.years, dyn.spec.height, dyn.spec.width)
    full, half = generate_paired(dyn, cfg.data.years)
    save_trajectory(out / "full", full, {"resolution": "model_step", "seed": cfg.seed})
    save_trajectory(out / "half", half, {"resolution": "half_step", "seed": cfg.seed})
    (out / "config.yaml").write_text(dump_config(cfg))
    return write_manifest(out, "generate", cfg, {"n_states": len(full), "n_half_states": len(half)})


def stage_train(cfg: RunConfig, workdir: Path, force: bool = False) -> dict:
    require_upstream(workdir, "train", cfg, force)
    out = _fresh_dir(workdir / "train")
    full = load_trajectory(workdir / "generate" / "full")
    half = load_trajectory(workdir / "generate" / "half")
    schedule = cfg.noise_schedule()
    params = train(full, schedule, cfg.train_config())
    save_params(out / "denoiser.fld", params, {"schedule": schedule.to_dict()})
    tparams = train_transfer(half, cfg.transfer_config())
    save_transfer(out / "transfer.fld", tparams)
    hist = {k: v for k, v in params.history.items() if k != "loss_curve"}
    return write_manifest(out, "train", cfg, {"denoiser": hist, "transfer": tparams.history})


def stage_catalog(cfg: RunConfig, workdir: Path, force: bool = False) -> dict:
    require_upstream(workdir, "catalog", cfg, force)
    out = _fresh_dir(workdir / "catalog")
    full = load_trajectory(workdir / "generate" / "full")
    params = load_params(workdir / "train" / "denoiser.fld")
    c = cfg.catalog
    clim = build_climatology(full)
    thr = compute_tau(full, clim, c.percentile)
    events = extract_events(full, clim, thr, default_land_mask(full.spec), c.dedup_steps,
                            c.dedup_radius, c.half_extent)
    # interventions need X^{t-1} with t two steps before the event
    usable = [e for e in events if e.time_index >= 3]
    fc = DiffusionForecaster(params, cfg.noise_schedule(), cfg.seed)
    kept = filter_predictable(usable, fc, full, thr, clim, c.predictability_lead)
    log.info("catalog: %d candidate events, %d predictable", len(events), len(kept))
    header = {"n_candidates": len(events), "n_predictable": len(kept), "percentile": c.percentile,
              "predictability_lead": c.predictability_lead, "seed": cfg.seed}
    save_catalog(out / "events.jsonl", kept, thr, header)
    return write_manifest(out, "catalog", cfg, {"tau": thr.tau, **header})


def _settings(cfg: RunConfig, lambdas: list[float]) -> InterventionSettings:
    g, a = cfg.guidance, cfg.attack
    return InterventionSettings(list(lambdas), g.T, g.n, g.skip_final, a.epsilon, a.eta, a.K)


def _calibrate_one(inputs, ctx):
    return calibration_ratio(inputs, ctx["params"], ctx["schedule"], ctx["settings"], ctx["seed"],
                             ctx["fraction"])


def _intervene_one(inputs, ctx):
    return intervene_event(inputs, ctx["params"], ctx["schedule"], ctx["settings"], ctx["seed"])


def _load_event_inputs(workdir: Path, cfg: RunConfig):
    full = load_trajectory(workdir / "generate" / "full")
    header, events = load_catalog(workdir / "catalog" / "events.jsonl", full.spec)
    by_time = {s.time_index: s for s in full.states}
    return full, header, [EventInputs.from_states(e, by_time) for e in events]


def resolve_lambdas(cfg: RunConfig, inputs: list[EventInputs], params, schedule) -> dict:
    g = cfg.guidance
    if g.lambdas is not None:
        return {"lambdas": [float(x) for x in g.lambdas], "base": None, "ratios": []}
    if not inputs:
        raise StateError("cannot calibrate the guidance scale on an empty catalog")
    ctx = {"params": params, "schedule": schedule, "settings": _settings(cfg, [1.0]),
           "seed": cfg.seed, "fraction": g.base_fraction}
    ratios = _pool_map(_calibrate_one, inputs, cfg.workers, ctx)
    # three significant figures keep the labels short and stable
    base = float(f"{float(np.median(ratios)):.3g}")
    return {"lambdas": lambda_grid(base, g.multipliers), "base": base, "ratios": [float(r) for r in ratios]}


def stage_intervene(cfg: RunConfig, workdir: Path, force: bool = False) -> dict:
    require_upstream(workdir, "intervene", cfg, force)
    out = _fresh_dir(workdir / "intervene")
    params = load_params(workdir / "train" / "denoiser.fld")
    schedule = cfg.noise_schedule()
    _, _, inputs = _load_event_inputs(workdir, cfg)
    lam = resolve_lambdas(cfg, inputs, params, schedule)
    settings = _settings(cfg, lam["lambdas"])
    _write_json(out / "lambdas.json", {**lam, "labels": [guided_label(x) for x in lam["lambdas"]],
                                       "base_fraction": cfg.guidance.base_fraction,
                                       "multipliers": cfg.guidance.multipliers})
    ctx = {"params": params, "schedule": schedule, "settings": settings, "seed": cfg.seed}
    results = _pool_map(_intervene_one, inputs, cfg.workers, ctx)
    events_dir = out / "events"
    for k, (inp, iv) in enumerate(zip(inputs, results)):
        labels = list(iv.perturbations)
        arrays = {"standard": iv.standard.data}
        arrays.update({f"delta_{j}": iv.perturbations[lbl].delta for j, lbl in enumerate(labels)})
        write_fld(events_dir / f"event_{k:04d}.fld", arrays,
                  {"kind": "interventions", "grid": params.spec.to_dict(),
                   "time_index": iv.standard.time_index})
        _write_json(events_dir / f"event_{k:04d}.json", {
            "index": k, "event": inp.event.to_dict(), "seed": cfg.seed, "labels": labels,
            "lambdas": lam["lambdas"], "T": settings.T, "n": settings.n, "skip_final": settings.skip_final,
            "epsilon": settings.epsilon, "eta": settings.eta, "K": settings.K,
            "passes": iv.passes, "loss_traces": iv.loss_traces,
        })
    return write_manifest(out, "intervene", cfg, {"n_events": len(inputs), "lambdas": lam["lambdas"]})


def load_interventions(workdir: Path, k: int, spec) -> EventInterventions:
    base = Path(workdir) / "intervene" / "events" / f"event_{k:04d}"
    side = json.loads(base.with_suffix(".json").read_text())
    meta, arrays = read_fld(base.with_suffix(".fld"))
    standard = AtmosphericState(spec, arrays["standard"], int(meta["time_index"]))
    perts = {lbl: Perturbation.masked(arrays[f"delta_{j}"], spec) for j, lbl in enumerate(side["labels"])}
    return EventInterventions(standard, perts, side["passes"], side["loss_traces"])


def _evaluate_one(item, ctx):
    k, inputs = item
    iv = load_interventions(ctx["workdir"], k, ctx["params"].spec)
    return evaluate_event(inputs, iv, ctx["params"], ctx["schedule"], ctx["transfer"],
                          ctx["clim"].at(inputs.event.time_index), ctx["tau"], ctx["seed"])


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None and math.isfinite(v)]
    return float(np.mean(vals)) if vals else None


def method_order(records: list[dict]) -> list[str]:
    labels = list(records[0]["methods"]) if records else []
    guided = [x for x in labels if x != PGD_LABEL]
    return ([PGD_LABEL] if PGD_LABEL in labels else []) + guided


def aggregate(records: list[dict]) -> dict:
    """Dataset means per method, skipping undefined per-event values."""
    out = {}
    for label in method_order(records):
        ms = [r["methods"][label] for r in records]
        row = {c: _mean(m[c] for m in ms) for c in TABLE_COLUMNS[1:]}
        row["n_events"] = len(ms)
        row["n_reduction_defined"] = sum(m["reduction_ratio"] is not None for m in ms)
        row["n_success_defined"] = sum(m["success_rate"] is not None for m in ms)
        tr = [m.get("transfer_reduction") for m in ms]
        row["transfer_reduction"] = _mean(tr)
        defined = [v for v in tr if v is not None]
        row["transfer_positive_fraction"] = (float(np.mean([v > 0 for v in defined])) if defined else None)
        passes = {json.dumps(m["passes"], sort_keys=True) for m in ms}
        row["passes"] = json.loads(passes.pop()) if len(passes) == 1 else None
        out[label] = row
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def profile_means(records: list[dict]) -> dict:
    out = {}
    for label in method_order(records):
        prof = {}
        for var in PERTURBABLE_VARIABLES:
            l2 = np.mean([r["methods"][label]["profile"][var]["l2"] for r in records], axis=0)
            sp = np.mean([r["methods"][label]["profile"][var]["sparsity"] for r in records], axis=0)
            prof[var] = {"l2": l2.tolist(), "sparsity": sp.tolist()}
        out[label] = prof
    return out


def latent_means(records: list[dict]) -> dict:
    out = {"standard": {k: np.mean([r["standard"]["latent"][k] for r in records], axis=0).tolist()
                        for k in LATENT_KEYS}}
    for label in method_order(records):
        out[label] = {k: np.mean([r["methods"][label]["latent"][k] for r in records], axis=0).tolist()
                      for k in LATENT_KEYS}
    return out


def pca_plot_data(results, n_show: int) -> dict:
    pool = np.concatenate([r.reference_latent_region for r in results], axis=0)
    mean, axes, eig = pca_basis(pool)
    events = []
    for r in results[:n_show]:
        ref = (r.reference_latent_region.mean(axis=0) - mean) @ axes.T
        traces = {lbl: ((tr - mean) @ axes.T).tolist() for lbl, tr in r.region_mean_traces.items()}
        events.append({"event": r.record["event"], "reference": ref.tolist(), "traces": traces})
    return {"eigenvalues": eig.tolist(), "axes": axes.tolist(), "mean": mean.tolist(),
            "n_pool": int(pool.shape[0]), "events": events}


def stage_evaluate(cfg: RunConfig, workdir: Path, force: bool = False) -> dict:
    inter = require_upstream(workdir, "evaluate", cfg, force)["intervene"]
    out = _fresh_dir(workdir / "evaluate")
    params = load_params(workdir / "train" / "denoiser.fld")
    transfer = load_transfer(workdir / "train" / "transfer.fld")
    full, header, inputs = _load_event_inputs(workdir, cfg)
    if not inputs:
        raise StateError("the catalog is empty; nothing to evaluate")
    clim = build_climatology(full)
    ctx = {"workdir": str(workdir), "params": params, "schedule": cfg.noise_schedule(),
           "transfer": transfer, "clim": clim, "tau": float(header["tau"]), "seed": cfg.seed}
    results = _pool_map(_evaluate_one, list(enumerate(inputs)), cfg.workers, ctx)
    records = [{"index": k, **r.record} for k, r in enumerate(results)]
    (out / "events.jsonl").write_text(
        "".join(json.dumps(r, sort_keys=True, ensure_ascii=False) + "\n" for r in records))

    agg = aggregate(records)
    table = _csv(TABLE_COLUMNS, [[lbl] + [row[c] for c in TABLE_COLUMNS[1:]] for lbl, row in agg.items()])
    (out / "table.csv").write_text(table, encoding="utf-8")
    fss_cols = ("method",) + tuple(f"fss_{k}" for k in FSS_WINDOWS)
    (out / "fss.csv").write_text(_csv(fss_cols, [[lbl] + [row[c] for c in fss_cols[1:]]
                                                 for lbl, row in agg.items()]), encoding="utf-8")
    (out / "transfer.csv").write_text(_csv(
        ("method", "transfer_reduction", "transfer_positive_fraction", "n_events"),
        [[lbl, row["transfer_reduction"], row["transfer_positive_fraction"], row["n_events"]]
         for lbl, row in agg.items()]), encoding="utf-8")
    (out / "passes.csv").write_text(_csv(
        ("method", "forward_passes", "backward_passes"),
        [[lbl, (row["passes"] or {}).get("forward"), (row["passes"] or {}).get("backward")]
         for lbl, row in agg.items()]), encoding="utf-8")
    _write_json(out / "aggregate.json", agg)
    plots = {
        "profiles": profile_means(records),
        "latent": latent_means(records),
        "pca": pca_plot_data(results, cfg.evaluation.pca_events),
    }
    _write_json(out / "plots.json", plots)
    return write_manifest(out, "evaluate", cfg, {"n_events": len(records), "lambdas": inter.get("lambdas"),
                                                 "methods": list(agg)})


STAGE_FUNCS = {
    "generate": stage_generate,
    "train": stage_train,
    "catalog": stage_catalog,
    "intervene": stage_intervene,
    "evaluate": stage_evaluate,
}


# ---------------------------------------------------------------- report

def emit_report(workdir: str | Path) -> dict:
    """Collect manifests and aggregates into ``report.json`` and ``report.csv``."""
    workdir = Path(workdir)
    if not workdir.exists() or not any(workdir.iterdir()):
        raise MissingDependencyError(f"workdir {workdir} is empty (missing stage 'generate'); run `stormsteer all` first", stage="generate")
    man = read_manifest(workdir, "evaluate")
    if man is None:
        raise MissingDependencyError(f"no evaluation under {workdir}; run `stormsteer evaluate` first",
                                     stage="evaluate")
    stored = json.loads((workdir / "evaluate" / "aggregate.json").read_text())
    agg = {lbl: stored[lbl] for lbl in man.get("methods", sorted(stored))}
    missing = sorted(f"{lbl}.{k}" for lbl, row in agg.items() for k in TABLE_COLUMNS[1:] if row.get(k) is None)
    if missing:
        warnings.warn(f"partial report: undefined metrics {', '.join(missing)}", stacklevel=2)
    manifests = {s: read_manifest(workdir, s) for s in STAGES}
    report = {
        "config_hash": man["config_hash"],
        "stage_hashes": {s: (m or {}).get("config_hash") for s, m in manifests.items()},
        "seeds": {s: (m or {}).get("seed") for s, m in manifests.items()},
        "n_events": man.get("n_events"),
        "lambdas": man.get("lambdas"),
        "tau": (manifests["catalog"] or {}).get("tau"),
        "aggregates": agg,
        "pass_counts": {lbl: row.get("passes") for lbl, row in agg.items()},
        "missing_metrics": missing,
        "complete": not missing,
    }
    _write_json(workdir / "report.json", report)
    rows = [[lbl] + [row.get(c) for c in TABLE_COLUMNS[1:]] + [row.get("transfer_reduction"),
            (row.get("passes") or {}).get("forward"), (row.get("passes") or {}).get("backward")]
            for lbl, row in agg.items()]
    header = TABLE_COLUMNS + ("transfer_reduction", "forward_passes", "backward_passes")
    (workdir / "report.csv").write_text(_csv(header, rows), encoding="utf-8")
    return report


def run_pipeline(cfg: RunConfig, stage: str = "all", force: bool = False) -> dict:
    """Run one stage (or all of them, then the report); returns the last manifest or report."""
    workdir = Path(cfg.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    if stage == "report":
        return emit_report(workdir)
    if stage == "all":
        for s in STAGES:
            log.info("stage %s", s)
            STAGE_FUNCS[s](cfg, workdir, force)
        return emit_report(workdir)
    if stage not in STAGE_FUNCS:
        raise ValueError(f"unknown stage {stage!r}")
    return STAGE_FUNCS[stage](cfg, workdir, force)
