"""Cross-validation experiment harness: method presets, ablation toggles,
fold execution, transductive scoring through the calibrated head, and
significance testing between methods.

Per fold: the rows are Dirichlet-partitioned into silos, the fold's test
rows are carved out of each silo, labels are masked to the requested
scarcity, and the silo graphs are built over standardized training rows.
After training, each silo builds a fresh graph over its training plus test
rows (training-fit standardization) and the calibrated head is fit on the
labeled rows of all silos and scored on the held-out test rows.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .config import DATASET_SILOS, RunConfig
from .data import (
    FoldPlan,
    PatientDataset,
    load_dataset,
    mask_fold,
    plan_folds,
    standardize,
    synth_gdm,
)
from .errors import ConfigError, ScarcityError
from .evaluation import (
    MetricsReport,
    auroc,
    macro_f1_sens_spec,
    train_head,
    wilcoxon_signed_rank,
)
from .federation import make_silo_state, run_federation, train_local
from .graph import append_nodes, build_knn_graph, empty_graph
from .model import forward

log = logging.getLogger(__name__)

METHODS = (
    "fedtgnn",
    "supervised",
    "local_tgnn",
    "local_gcn",
    "fedavg_gcn",
    "fedavg_sage",
    "fed_selftrain",
)

ABLATION_COMPONENTS = (
    "pgpl", "agr", "caa", "proto_share", "focal", "contrastive", "smoothness",
)

_SSL_OFF = dict(
    eta_pl=0.0, mu_smooth=0.0, beta_contrastive=0.0, gamma_aug=0.0,
    use_pseudo_labels=False, use_agr=False, share_prototypes=False,
)
_PLAIN_ARCH = dict(use_attention=False, focal_alpha=1.0, focal_gamma=0.0)


def method_config(cfg: RunConfig, method: str) -> RunConfig:
    """Resolve a method name into a concrete configuration preset."""
    if method == "fedtgnn":
        return cfg.replace(method=method, federated=True)
    if method == "supervised":
        return cfg.replace(method=method, federated=True, mu_prox=0.0, **_SSL_OFF)
    if method == "local_tgnn":
        return cfg.replace(method=method, federated=False, mu_prox=0.0,
                           share_prototypes=False)
    if method == "local_gcn":
        return cfg.replace(method=method, federated=False, mu_prox=0.0,
                           fusion_mode="gcn_only", **_PLAIN_ARCH, **_SSL_OFF)
    if method == "fedavg_gcn":
        return cfg.replace(method=method, federated=True, mu_prox=0.0,
                           fusion_mode="gcn_only", **_PLAIN_ARCH, **_SSL_OFF)
    if method == "fedavg_sage":
        return cfg.replace(method=method, federated=True, mu_prox=0.0,
                           fusion_mode="sage_only", **_PLAIN_ARCH, **_SSL_OFF)
    if method == "fed_selftrain":
        # Graph-free MLP (SAGE self term over an edgeless graph) with
        # confidence-only self-training pseudo-labels.
        return cfg.replace(
            method=method, federated=True, mu_prox=0.0,
            fusion_mode="sage_only", **_PLAIN_ARCH,
            mu_smooth=0.0, beta_contrastive=0.0, gamma_aug=0.0,
            use_pseudo_labels=True, use_prototype_gate=False,
            use_neighborhood_gate=False, share_prototypes=False,
            use_agr=False,
        )
    raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")


def ablate(cfg: RunConfig, component: str) -> RunConfig:
    """Disable one component of the full method."""
    if component == "pgpl":
        return cfg.replace(use_prototype_gate=False, use_neighborhood_gate=False)
    if component == "agr":
        return cfg.replace(use_agr=False)
    if component == "caa":
        return cfg.replace(gamma_aug=0.0)
    if component == "proto_share":
        return cfg.replace(share_prototypes=False)
    if component == "focal":
        return cfg.replace(focal_alpha=1.0, focal_gamma=0.0)
    if component == "contrastive":
        return cfg.replace(beta_contrastive=0.0)
    if component == "smoothness":
        return cfg.replace(mu_smooth=0.0)
    raise ConfigError(
        f"unknown ablation component {component!r}; expected one of {ABLATION_COMPONENTS}"
    )


def get_dataset(cfg: RunConfig) -> PatientDataset:
    if cfg.dataset == "synthetic_gdm":
        return synth_gdm(seed=0)
    path = Path(cfg.data_dir) / f"{cfg.dataset}.csv"
    return load_dataset(path, cfg.dataset)


@dataclass
class FoldOutcome:
    fold_index: int
    skipped: bool = False
    reason: str = ""
    auroc: float = float("nan")
    macro_f1: float = float("nan")
    sensitivity: float = float("nan")
    specificity: float = float("nan")
    seconds: float = 0.0
    telemetry: list = dc_field(default_factory=list)


def _local_positions(order: np.ndarray, subset: np.ndarray) -> np.ndarray:
    lookup = {int(g): i for i, g in enumerate(order.tolist())}
    return np.array([lookup[int(g)] for g in subset.tolist()], dtype=np.intp)


def run_fold(
    data: PatientDataset,
    fold: FoldPlan,
    cfg: RunConfig,
    dump_dir: str | Path | None = None,
) -> FoldOutcome:
    """Train the configured method on one fold and score its test rows."""
    t0 = time.time()
    try:
        fold = mask_fold(fold, data.labels, cfg.scarcity)
    except ScarcityError as exc:
        log.warning("fold %d skipped: %s", fold.fold_index, exc)
        return FoldOutcome(fold.fold_index, skipped=True, reason=str(exc))

    train_rows = np.sort(np.concatenate([p.train_indices for p in fold.partitions]))
    std = standardize(data, train_rows)

    silos = []
    for part in fold.partitions:
        order = np.sort(part.train_indices)
        feats = std.features[order]
        visible = np.full(order.size, -1, dtype=np.intp)
        lab_local = _local_positions(order, part.labeled)
        unl_local = _local_positions(order, part.unlabeled)
        visible[lab_local] = data.labels[part.labeled]
        graph = (
            empty_graph(order.size)
            if cfg.fusion_mode == "sage_only" and cfg.method == "fed_selftrain"
            else build_knn_graph(feats, min(cfg.knn_k, order.size - 1))
        )
        silos.append(
            make_silo_state(
                cfg, part.silo_id, feats, visible, lab_local, unl_local,
                std.continuous_mask, master_seed=fold.seed, graph=graph,
            )
        )

    telemetry: list = []
    if cfg.federated:
        result = run_federation(cfg, silos, dump_dir=dump_dir)
        telemetry = result.telemetry
        for silo in silos:
            silo.params.unflatten(result.global_params)
    else:
        for silo in silos:
            result = train_local(cfg, silo)
            telemetry.extend(result.telemetry)

    # Transductive scoring: test rows are appended to the silo's current
    # (possibly refined) graph; their labels are never consulted.
    head_x, head_h, head_y = [], [], []
    test_x, test_h, test_y = [], [], []
    for part, silo in zip(fold.partitions, silos):
        train_order = np.sort(part.train_indices)
        feats_train = std.features[train_order]
        feats_test = std.features[np.sort(part.test)]
        graph = append_nodes(silo.graph, feats_train, feats_test, cfg.knn_k)
        feats_all = np.vstack([feats_train, feats_test])
        out = forward(silo.params, feats_all, graph, mode="eval")
        emb = out.embeddings.value
        lab_pos = _local_positions(train_order, part.labeled)
        test_pos = train_order.size + np.arange(feats_test.shape[0])
        head_x.append(feats_train[lab_pos])
        head_h.append(emb[lab_pos])
        head_y.append(data.labels[part.labeled])
        test_x.append(feats_test)
        test_h.append(emb[test_pos])
        test_y.append(data.labels[np.sort(part.test)])

    x_lab = np.vstack(head_x)
    h_lab = np.vstack(head_h)
    y_lab = np.concatenate(head_y)
    head = train_head(x_lab, h_lab, y_lab, np.arange(y_lab.size), c=cfg.head_c)

    z_test = np.hstack([np.vstack(test_x), np.vstack(test_h)])
    y_test = np.concatenate(test_y)
    scores = head.decision_scores(z_test)
    preds = (scores >= 0.5).astype(np.intp)
    f1, sens, spec = macro_f1_sens_spec(preds, y_test)

    return FoldOutcome(
        fold_index=fold.fold_index,
        auroc=auroc(scores, y_test),
        macro_f1=f1,
        sensitivity=sens,
        specificity=spec,
        seconds=time.time() - t0,
        telemetry=telemetry,
    )


def run_cell(cfg: RunConfig, method: str, rho: float,
             dump_dir: str | Path | None = None) -> dict:
    """All folds for one (dataset, scarcity, method) combination."""
    mcfg = method_config(cfg, method).replace(scarcity=rho)
    if dump_dir is None and mcfg.dump_messages:
        # namespace per cell so grid runs do not collide
        dump_dir = Path(mcfg.dump_messages) / f"{mcfg.dataset}_{method}_rho{rho}"
    data = get_dataset(mcfg)
    band = (
        (mcfg.dirichlet_skew_lo, mcfg.dirichlet_skew_hi)
        if mcfg.dirichlet_skew_lo < mcfg.dirichlet_skew_hi
        else None
    )
    folds = plan_folds(
        data, mcfg.n_silos, alpha=mcfg.dirichlet_alpha,
        n_folds=mcfg.n_folds, seeds=mcfg.seeds,
        min_class_fraction=mcfg.dirichlet_min_rate,
        skew_band=band,
    )
    report = MetricsReport()
    outcomes = []
    for fold in folds:
        fold_dump = (
            Path(dump_dir) / f"fold{fold.fold_index}" if dump_dir else None
        )
        outcome = run_fold(data, fold, mcfg, dump_dir=fold_dump)
        outcomes.append(outcome)
        if not outcome.skipped:
            report.add(outcome.auroc, outcome.macro_f1,
                       outcome.sensitivity, outcome.specificity)
        log.info(
            "%s rho=%.2f fold %d: %s",
            method, rho, outcome.fold_index,
            "skipped" if outcome.skipped else f"auroc={outcome.auroc:.4f}",
        )
    return {
        "dataset": mcfg.dataset,
        "rho": rho,
        "method": method,
        "metrics": report.as_dict(),
        "folds": [
            {
                "fold": o.fold_index,
                "skipped": o.skipped,
                "reason": o.reason,
                "auroc": None if o.skipped else o.auroc,
                "macro_f1": None if o.skipped else o.macro_f1,
                "sensitivity": None if o.skipped else o.sensitivity,
                "specificity": None if o.skipped else o.specificity,
                "seconds": o.seconds,
            }
            for o in outcomes
        ],
        "completed_folds": len(report.auroc_values),
    }


@dataclass
class ExperimentPlan:
    dataset: str
    rho_list: tuple[float, ...] = (0.1, 0.3, 0.5, 0.7, 0.8)
    methods: tuple[str, ...] = ("fedtgnn",)
    out_dir: str = "results"
    label: str = "experiment"


def _cell_task(args):
    cfg_kwargs, method, rho = args
    return run_cell(RunConfig(**cfg_kwargs), method, rho)


def significance_matrix(cells: list[dict]) -> list[dict]:
    """Pairwise Wilcoxon tests on per-fold AUROC between methods, within
    each (dataset, rho) group. Folds skipped by either method are excluded."""
    rows = []
    groups: dict = {}
    for cell in cells:
        groups.setdefault((cell["dataset"], cell["rho"]), []).append(cell)
    for (dataset, rho), group in sorted(groups.items()):
        for i, a in enumerate(group):
            for b in group[i + 1:]:
                fold_a = {f["fold"]: f["auroc"] for f in a["folds"] if not f["skipped"]}
                fold_b = {f["fold"]: f["auroc"] for f in b["folds"] if not f["skipped"]}
                shared = sorted(set(fold_a) & set(fold_b))
                if len(shared) < 2:
                    continue
                res = wilcoxon_signed_rank(
                    [fold_a[f] for f in shared], [fold_b[f] for f in shared]
                )
                rows.append({
                    "dataset": dataset,
                    "rho": rho,
                    "method_a": a["method"],
                    "method_b": b["method"],
                    "n_folds": len(shared),
                    "p_two_sided": res.two_sided,
                    "p_one_sided_a_greater": res.one_sided_greater,
                    "significant": res.two_sided < 0.05,
                })
    return rows


def run_experiment(plan: ExperimentPlan, cfg: RunConfig) -> dict:
    """Execute the full grid and write JSON + CSV result files."""
    cfg = cfg.replace(
        dataset=plan.dataset,
        n_silos=DATASET_SILOS.get(plan.dataset, cfg.n_silos),
    )
    tasks = [
        (cfg.echo_kwargs(), method, rho)
        for rho in plan.rho_list
        for method in plan.methods
    ]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            cells = list(pool.map(_cell_task, tasks))
    else:
        cells = [_cell_task(t) for t in tasks]

    cells.sort(key=lambda c: (c["dataset"], c["rho"], c["method"]))
    result = {
        "label": plan.label,
        "config": cfg.echo(),
        "cells": cells,
        "significance": significance_matrix(cells),
    }

    out_dir = Path(plan.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{plan.label}.json"
    json_path.write_text(json.dumps(result, indent=2))

    csv_path = out_dir / f"{plan.label}_folds.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([
            "dataset", "rho", "method", "fold",
            "auroc", "macro_f1", "sensitivity", "specificity", "skipped",
        ])
        for cell in cells:
            for f in cell["folds"]:
                writer.writerow([
                    cell["dataset"], cell["rho"], cell["method"], f["fold"],
                    f["auroc"], f["macro_f1"], f["sensitivity"],
                    f["specificity"], f["skipped"],
                ])
    log.info("wrote %s and %s", json_path, csv_path)
    return result
