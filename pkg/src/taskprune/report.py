"""Aggregation of search outputs into analysis artifacts (JSON + CSV).

No plotting here; the CSVs carry the data the usual figures are drawn from:
accuracy-vs-pruning curves, per-layer / per-matrix-type retention, and the
bottleneck (probability-unpruned) table. Emission is a pure function of the
run artifacts, so re-emitting from the same inputs is byte-identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Sequence

from .calibrate import (
    AdapterCache,
    FactorSet,
    PruningVector,
    build_cache,
    capture_calibration,
    compression_ratio,
    retained_site_params,
)
from .factorize import FactorizeOptions, rank_for_factor
from .model import (
    KIND_ORDER,
    ModelWeights,
    count_params,
    estimate_flops_per_token,
    site_dims,
    sites,
)
from .search import (
    EvalFn,
    EvalRecord,
    TaskSpec,
    bottleneck_analysis,
    make_eval_fn,
)

REPORT_SCHEMA = "taskprune-report-v1"


@dataclass
class SweepPoint:
    level: float
    compression: float
    accuracy: float


def sweep_uniform(
    model: ModelWeights,
    cache: AdapterCache,
    task: TaskSpec,
    level_indices: Sequence[int] | None = None,
    eval_fn: EvalFn | None = None,
) -> list[SweepPoint]:
    """Evaluate each uniform retention level, most retained first."""
    ev = eval_fn or make_eval_fn(model, cache, task)
    n_sites = len(sites(model.config))
    indices = list(level_indices) if level_indices is not None else list(range(len(cache.factor_set)))
    points = []
    for idx in indices:
        vec = PruningVector.uniform(cache.factor_set, n_sites, idx)
        res = ev(vec)
        points.append(SweepPoint(
            level=cache.factor_set[idx],
            compression=compression_ratio(vec, model),
            accuracy=res.accuracy,
        ))
    return points


def write_sweep_csv(points: Sequence[SweepPoint], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("level,compression,accuracy\n")
        for p in points:
            fh.write(f"{p.level!r},{p.compression!r},{p.accuracy!r}\n")


def read_sweep_csv(path) -> list[SweepPoint]:
    points = []
    with open(path, "r", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            level, comp, acc = line.strip().split(",")
            points.append(SweepPoint(float(level), float(comp), float(acc)))
    return points


def retention_tables(
    vector: PruningVector, model: ModelWeights
) -> tuple[list[dict], dict[int, float], dict[str, float]]:
    """Per-site achieved retention plus per-layer and per-kind means."""
    rows = []
    for site, level in zip(sites(model.config), vector.levels()):
        d_in, d_out = site_dims(model.config, site)
        _, achieved = rank_for_factor(level, d_in, d_out)
        rows.append({
            "layer": site.layer,
            "kind": site.kind.value,
            "level": level,
            "retention": achieved,
        })
    per_layer: dict[int, float] = {}
    for layer in range(model.config.n_layers):
        vals = [r["retention"] for r in rows if r["layer"] == layer]
        per_layer[layer] = sum(vals) / len(vals)
    per_kind: dict[str, float] = {}
    for kind in KIND_ORDER:
        vals = [r["retention"] for r in rows if r["kind"] == kind.value]
        per_kind[kind.value] = sum(vals) / len(vals)
    return rows, per_layer, per_kind


def calibration_sweep(
    model: ModelWeights,
    corpus: bytes,
    sizes: Sequence[int],
    task: TaskSpec,
    level: float = 0.5,
    opts: FactorizeOptions | None = None,
    workers: int | None = None,
) -> list[tuple[int, float]]:
    """Accuracy of a fixed uniform pruning level as calibration size grows.

    Rebuilds the cache (only at `level`) for each size and evaluates.
    """
    points = []
    for size in sizes:
        capture = capture_calibration(model, corpus, min_tokens=size)
        cache = build_cache(model, capture, FactorSet((1.0, level)), opts, workers=workers)
        ev = make_eval_fn(model, cache, task)
        vec = PruningVector.uniform(cache.factor_set, len(sites(model.config)), 1)
        points.append((size, ev(vec).accuracy))
    return points


def write_calibration_csv(points: Sequence[tuple[int, float]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("tokens,accuracy\n")
        for tokens, acc in points:
            fh.write(f"{tokens},{acc!r}\n")


@dataclass
class SearchReport:
    """Everything a run produced, ready for serialization."""

    mode: str                    # "up" | "ga"
    model_fingerprint: str
    calib_fingerprint: str
    epsilon: float
    a_star: float
    a0: float
    accuracy: float
    best_indices: tuple[int, ...]
    factor_set: tuple[float, ...]
    compression: float
    whole_model_compression: float
    per_site: list[dict]
    per_layer: dict[int, float]
    per_kind: dict[str, float]
    bottleneck_probs: list[float] | None
    bottleneck_sites: list[int] | None
    flops_dense: int
    flops_pruned: int
    history_file: str | None = None
    feasible: bool = True

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "mode": self.mode,
            "model_fingerprint": self.model_fingerprint,
            "calib_fingerprint": self.calib_fingerprint,
            "epsilon": self.epsilon,
            "a_star": self.a_star,
            "a0": self.a0,
            "accuracy": self.accuracy,
            "best_indices": list(self.best_indices),
            "factor_set": list(self.factor_set),
            "compression": self.compression,
            "whole_model_compression": self.whole_model_compression,
            "per_layer_retention": {str(k): v for k, v in self.per_layer.items()},
            "per_kind_retention": dict(self.per_kind),
            "bottleneck_probs": self.bottleneck_probs,
            "bottleneck_sites": self.bottleneck_sites,
            "flops_dense": self.flops_dense,
            "flops_pruned": self.flops_pruned,
            "history_file": self.history_file,
            "feasible": self.feasible,
        }


def build_report(
    model: ModelWeights,
    vector: PruningVector,
    mode: str,
    a_star: float,
    a0: float,
    accuracy: float,
    epsilon: float,
    model_fp: str,
    calib_fp: str,
    history: Sequence[EvalRecord] | None = None,
    history_file: str | None = None,
    feasible: bool = True,
) -> SearchReport:
    per_site, per_layer, per_kind = retention_tables(vector, model)
    comp = compression_ratio(vector, model)
    total = count_params(model)
    site_total = count_params(model, sites_only=True)
    removed = site_total - retained_site_params(vector, model)
    probs = flagged = None
    if history:
        probs, flagged = bottleneck_analysis(history)
    return SearchReport(
        mode=mode,
        model_fingerprint=model_fp,
        calib_fingerprint=calib_fp,
        epsilon=epsilon,
        a_star=a_star,
        a0=a0,
        accuracy=accuracy,
        best_indices=vector.indices,
        factor_set=vector.factor_set.levels,
        compression=comp,
        whole_model_compression=removed / total,
        per_site=per_site,
        per_layer=per_layer,
        per_kind=per_kind,
        bottleneck_probs=probs,
        bottleneck_sites=flagged,
        flops_dense=estimate_flops_per_token(model),
        flops_pruned=estimate_flops_per_token(model, vector.levels()),
        history_file=history_file,
        feasible=feasible,
    )


def emit_report(report: SearchReport, out_dir) -> None:
    """Write report.json plus the CSV bundle under out_dir."""
    os.makedirs(out_dir, exist_ok=True)

    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")

    with open(os.path.join(out_dir, "per_site_retention.csv"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write("layer,kind,level,retention\n")
        for row in report.per_site:
            fh.write(f"{row['layer']},{row['kind']},{row['level']!r},{row['retention']!r}\n")

    with open(os.path.join(out_dir, "per_layer_retention.csv"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write("layer,mean_retention\n")
        for layer in sorted(report.per_layer):
            fh.write(f"{layer},{report.per_layer[layer]!r}\n")

    with open(os.path.join(out_dir, "per_kind_retention.csv"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write("kind,mean_retention\n")
        for kind in KIND_ORDER:
            fh.write(f"{kind.value},{report.per_kind[kind.value]!r}\n")

    if report.bottleneck_probs is not None:
        n_layers = max(r["layer"] for r in report.per_site) + 1
        site_rows = [(r["layer"], r["kind"]) for r in report.per_site]
        with open(os.path.join(out_dir, "bottlenecks.csv"), "w",
                  encoding="utf-8", newline="\n") as fh:
            fh.write("layer,kind,prob_unpruned,bottleneck\n")
            for i, (layer, kind) in enumerate(site_rows):
                flag = 1 if i in (report.bottleneck_sites or []) else 0
                fh.write(f"{layer},{kind},{report.bottleneck_probs[i]!r},{flag}\n")
