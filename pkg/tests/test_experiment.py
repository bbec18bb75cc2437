"""Harness checks on a small synthetic dataset: method presets, fold
isolation, ablation toggles, significance matrix, and output files."""

import json

import numpy as np
import pytest

from fedgraphssl.config import RunConfig
from fedgraphssl.data import PatientDataset, mask_fold, plan_folds
from fedgraphssl.errors import ConfigError
from fedgraphssl.experiment import (
    ABLATION_COMPONENTS,
    ExperimentPlan,
    METHODS,
    ablate,
    method_config,
    run_cell,
    run_experiment,
    run_fold,
    significance_matrix,
)

SMALL = dict(
    hidden_dim=6, attn_hidden=4, knn_k=3, agr_k=4,
    rounds=2, local_epochs=1, n_folds=3, dirichlet_min_rate=0.2,
)


def blob_dataset(n_per_class=60, d=4, seed=0):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(n_per_class, d)) - 1.2
    x1 = rng.normal(size=(n_per_class, d)) + 1.2
    x = np.vstack([x0, x1])
    y = np.array([0] * n_per_class + [1] * n_per_class, dtype=np.intp)
    order = rng.permutation(2 * n_per_class)
    return PatientDataset(
        features=x[order],
        labels=y[order],
        continuous_mask=np.ones(d, dtype=bool),
        feature_names=[f"f{i}" for i in range(d)],
        name="blobs",
    )


def small_cfg(**kw):
    return RunConfig(**{**SMALL, **kw})


def test_method_presets_cover_all_names():
    cfg = small_cfg()
    for m in METHODS:
        out = method_config(cfg, m)
        assert out.method == m
    with pytest.raises(ConfigError):
        method_config(cfg, "gradient_boosting")


def test_method_presets_shape():
    cfg = small_cfg()
    sup = method_config(cfg, "supervised")
    assert not sup.use_pseudo_labels and sup.eta_pl == 0.0 and sup.federated
    loc = method_config(cfg, "local_tgnn")
    assert not loc.federated and loc.use_pseudo_labels
    gcn = method_config(cfg, "fedavg_gcn")
    assert gcn.fusion_mode == "gcn_only" and not gcn.use_attention
    assert gcn.focal_gamma == 0.0  # plain cross-entropy
    st = method_config(cfg, "fed_selftrain")
    assert st.use_pseudo_labels and not st.use_prototype_gate


def test_ablation_toggles():
    cfg = small_cfg()
    assert ablate(cfg, "pgpl").use_prototype_gate is False
    assert ablate(cfg, "agr").use_agr is False
    assert ablate(cfg, "caa").gamma_aug == 0.0
    assert ablate(cfg, "proto_share").share_prototypes is False
    assert ablate(cfg, "focal").focal_gamma == 0.0
    assert ablate(cfg, "contrastive").beta_contrastive == 0.0
    assert ablate(cfg, "smoothness").mu_smooth == 0.0
    with pytest.raises(ConfigError):
        ablate(cfg, "dropout")
    assert set(ABLATION_COMPONENTS) == {
        "pgpl", "agr", "caa", "proto_share", "focal", "contrastive", "smoothness",
    }


def test_run_fold_separable_data():
    data = blob_dataset()
    cfg = method_config(small_cfg(scarcity=0.5), "fedtgnn").replace(scarcity=0.5)
    fold = plan_folds(data, 2, n_folds=3, min_class_fraction=0.2)[0]
    outcome = run_fold(data, fold, cfg)
    assert not outcome.skipped
    assert outcome.auroc > 0.9  # blobs are trivially separable


def test_fold_isolation_no_test_leakage():
    data = blob_dataset(seed=3)
    folds = plan_folds(data, 2, n_folds=3)
    for fold in folds:
        fold = mask_fold(fold, data.labels, 0.4)
        for part in fold.partitions:
            test = set(part.test.tolist())
            assert not test & set(part.labeled.tolist())
            assert not test & set(part.unlabeled.tolist())
            train = set(part.train_indices.tolist())
            assert not test & train


def test_local_methods_score_with_own_params(monkeypatch):
    data = blob_dataset(seed=4)
    import fedgraphssl.experiment as exp
    monkeypatch.setattr(exp, "get_dataset", lambda cfg: data)
    cfg = small_cfg(scarcity=0.3)
    cell = run_cell(cfg, "local_gcn", 0.3)
    assert cell["completed_folds"] == 3
    assert cell["metrics"]["auroc"]["mean"] > 0.85


def test_significance_matrix_shape():
    cells = [
        {
            "dataset": "blobs", "rho": 0.3, "method": m,
            "folds": [
                {"fold": f, "skipped": False, "auroc": 0.8 + 0.01 * (f + off)}
                for f in range(5)
            ],
        }
        for off, m in ((0.0, "fedtgnn"), (1.0, "supervised"))
    ]
    rows = significance_matrix(cells)
    assert len(rows) == 1
    row = rows[0]
    assert row["method_a"] == "fedtgnn" and row["method_b"] == "supervised"
    assert row["n_folds"] == 5
    # constant difference of one step: the most extreme one-sided table value
    assert row["p_two_sided"] == pytest.approx(2 / 32)


def test_run_experiment_writes_outputs(tmp_path, monkeypatch):
    data = blob_dataset(seed=5)
    import fedgraphssl.experiment as exp
    monkeypatch.setattr(exp, "get_dataset", lambda cfg: data)
    plan = ExperimentPlan(
        dataset="pima",  # name only; data is patched in
        rho_list=(0.3,),
        methods=("supervised", "fedtgnn"),
        out_dir=str(tmp_path),
        label="smoke",
    )
    result = run_experiment(plan, small_cfg())
    assert (tmp_path / "smoke.json").exists()
    assert (tmp_path / "smoke_folds.csv").exists()
    payload = json.loads((tmp_path / "smoke.json").read_text())
    assert len(payload["cells"]) == 2
    assert payload["config"]["rounds"] == 2
    assert payload["significance"]
    lines = (tmp_path / "smoke_folds.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 2 * 3  # header + cells x folds
    # cells are sorted by (dataset, rho, method)
    methods = [c["method"] for c in payload["cells"]]
    assert methods == sorted(methods)
