"""Federation protocol checks: aggregation arithmetic, wire format,
single-silo degeneration, determinism, and the privacy audit."""

import dataclasses

import numpy as np
import pytest

from fedgraphssl import autodiff as ad
from fedgraphssl.config import RunConfig
from fedgraphssl.errors import MessageFormatError, ProtocolError
from fedgraphssl.federation import (
    GlobalBroadcast,
    SiloUpload,
    aggregate_prototypes,
    audit_messages,
    fedavg_aggregate,
    local_round,
    make_silo_state,
    parse_message,
    run_federation,
    serialize_broadcast,
    serialize_upload,
    train_local,
    _stream_seed,
)
from fedgraphssl.losses import focal_loss
from fedgraphssl.model import forward
from fedgraphssl.pseudolabel import PrototypeSet

SMALL = dict(hidden_dim=6, attn_hidden=4, knn_k=3, agr_k=4, rounds=3, local_epochs=2)


def small_config(**kw):
    merged = {**SMALL, **kw}
    return RunConfig(**merged)


def toy_silo(cfg, silo_id=0, n=16, d=3, seed=100, rho=0.5):
    rng = np.random.default_rng(seed + silo_id)
    x = rng.normal(size=(n, d))
    y_true = (x[:, 0] > 0).astype(np.intp)
    idx = rng.permutation(n)
    labeled = np.sort(idx[: int(n * (1 - rho))])
    unlabeled = np.sort(idx[int(n * (1 - rho)):])
    labels = np.full(n, -1, dtype=np.intp)
    labels[labeled] = y_true[labeled]
    return make_silo_state(
        cfg, silo_id, x, labels, labeled, unlabeled,
        np.ones(d, dtype=bool), master_seed=seed,
    )


def make_upload(silo_id, n, value, count0=1, count1=1, dim=4):
    protos = PrototypeSet(
        centroids=np.full((2, dim), float(value)),
        counts=np.array([count0, count1]),
        present=np.array([count0 > 0, count1 > 0]),
    )
    return SiloUpload(
        silo_id=silo_id,
        n_samples=n,
        params=np.full(5, float(value)),
        prototypes=protos,
    )


# -- aggregation ---------------------------------------------------------------

def test_fedavg_single_silo_identity():
    up = make_upload(0, 50, 1.234567891234)
    out = fedavg_aggregate([up])
    assert np.array_equal(out, up.params)


def test_fedavg_equal_sizes_average():
    out = fedavg_aggregate([make_upload(0, 10, 0.0), make_upload(1, 10, 2.0)])
    assert np.allclose(out, 1.0)


def test_fedavg_weighted_mean():
    out = fedavg_aggregate([make_upload(0, 100, 0.0), make_upload(1, 300, 4.0)])
    assert np.allclose(out, 3.0)


def test_fedavg_shape_mismatch():
    a = make_upload(0, 10, 0.0)
    b = make_upload(1, 10, 1.0)
    b.params = np.zeros(7)
    with pytest.raises(ProtocolError):
        fedavg_aggregate([a, b])


def test_fedavg_order_independent():
    ups = [make_upload(i, 10 * (i + 1), float(i)) for i in range(4)]
    a = fedavg_aggregate(ups)
    b = fedavg_aggregate(list(reversed(ups)))
    assert np.max(np.abs(a - b)) < 1e-12


def test_prototype_aggregation_single_silo():
    up = make_upload(0, 10, 5.0, count0=3, count1=2)
    out = aggregate_prototypes([up])
    assert np.array_equal(out.centroids, up.prototypes.centroids)
    assert out.counts.tolist() == [3, 2]


def test_prototype_aggregation_weighted():
    a = make_upload(0, 10, 0.0, count0=1, count1=1)
    b = make_upload(1, 10, 4.0, count0=3, count1=1)
    out = aggregate_prototypes([a, b])
    assert np.allclose(out.centroids[0], 3.0)
    assert np.allclose(out.centroids[1], 2.0)


def test_prototype_aggregation_absent_class():
    a = make_upload(0, 10, 1.0, count0=2, count1=0)
    b = make_upload(1, 10, 3.0, count0=2, count1=0)
    out = aggregate_prototypes([a, b])
    assert out.present.tolist() == [True, False]
    assert np.allclose(out.centroids[0], 2.0)


# -- wire format -----------------------------------------------------------------

def test_upload_roundtrip_bit_exact():
    rng = np.random.default_rng(0)
    up = SiloUpload(
        silo_id=3,
        n_samples=123,
        params=rng.normal(size=400),
        prototypes=PrototypeSet(
            centroids=rng.normal(size=(2, 8)),
            counts=np.array([7, 0]),
            present=np.array([True, False]),
        ),
    )
    back = parse_message(serialize_upload(up))
    assert isinstance(back, SiloUpload)
    assert back.silo_id == 3 and back.n_samples == 123
    assert np.array_equal(back.params, up.params)
    assert np.array_equal(back.prototypes.centroids[0], up.prototypes.centroids[0])
    assert back.prototypes.present.tolist() == [True, False]


def test_broadcast_roundtrip():
    rng = np.random.default_rng(1)
    bc = GlobalBroadcast(
        params=rng.normal(size=64),
        prototypes=PrototypeSet(
            centroids=rng.normal(size=(2, 4)),
            counts=np.array([2, 5]),
            present=np.array([True, True]),
        ),
    )
    back = parse_message(serialize_broadcast(bc))
    assert isinstance(back, GlobalBroadcast)
    assert np.array_equal(back.params, bc.params)


def test_parse_rejects_bad_magic():
    with pytest.raises(MessageFormatError):
        parse_message(b"XXXX" + b"\x00" * 40)


def test_parse_rejects_trailing_bytes():
    blob = serialize_upload(make_upload(0, 10, 1.0))
    with pytest.raises(MessageFormatError, match="trailing"):
        parse_message(blob + b"\x00" * 8)


def test_parse_rejects_truncation():
    blob = serialize_upload(make_upload(0, 10, 1.0))
    with pytest.raises(MessageFormatError):
        parse_message(blob[: len(blob) // 2])


# -- protocol behavior -------------------------------------------------------------

def test_supervised_degeneration_single_step():
    # T=1, R=1 with every auxiliary weight at zero is exactly one supervised
    # focal-loss Adam step; replicate it with direct calls.
    cfg = small_config(rounds=1, local_epochs=1, eta_pl=0.0, mu_smooth=0.0,
                       beta_contrastive=0.0, gamma_aug=0.0, mu_prox=0.0)
    silo = toy_silo(cfg)
    ref = toy_silo(cfg)  # identical twin
    w0 = silo.params.flatten()

    result = run_federation(cfg, [silo])

    ref.params.unflatten(w0)
    rng = np.random.default_rng(_stream_seed(ref.master_seed, ref.silo_id, 1, 1, 0))
    out = forward(ref.params, ref.features, ref.graph, mode="train", dropout_rng=rng)
    loss = focal_loss(out.probs, ref.labels, ref.labeled,
                      cfg.focal_alpha, cfg.focal_gamma)
    grads = ad.backward(loss)
    ad.adam_step(ref.params.trainables(), grads, ref.opt_state, lr=cfg.learning_rate)
    ref.params.clamp_temperature()

    assert np.array_equal(result.global_params, ref.params.flatten())


def test_agr_rebuilds_graph_on_schedule():
    cfg = small_config(rounds=5, agr_period=5, local_epochs=1)
    silo = toy_silo(cfg)
    before = (silo.graph.edges_i.copy(), silo.graph.edges_j.copy())
    run_federation(cfg, [silo])
    after = (silo.graph.edges_i, silo.graph.edges_j)
    changed = before[0].size != after[0].size or not (
        np.array_equal(before[0], after[0]) and np.array_equal(before[1], after[1])
    )
    assert changed


def test_federation_deterministic():
    cfg = small_config()
    a = run_federation(cfg, [toy_silo(cfg, 0), toy_silo(cfg, 1)])
    b = run_federation(cfg, [toy_silo(cfg, 0), toy_silo(cfg, 1)])
    assert np.array_equal(a.global_params, b.global_params)


def test_single_silo_federation_equals_standalone():
    cfg = small_config(rounds=10, local_epochs=2, mu_prox=0.0)
    fed = run_federation(cfg, [toy_silo(cfg)], record_trajectory=True)
    solo = train_local(cfg, toy_silo(cfg), record_trajectory=True)
    assert len(fed.param_trajectory) == len(solo.param_trajectory) == 10
    for a, b in zip(fed.param_trajectory, solo.param_trajectory):
        assert np.array_equal(a, b)


def test_upload_payload_fields_only():
    # The dataclass itself is the protocol surface: nothing but parameters,
    # prototypes and counts may appear.
    names = {f.name for f in dataclasses.fields(SiloUpload)}
    assert names == {"silo_id", "n_samples", "params", "prototypes"}


def test_zero_labeled_silo_participates():
    cfg = small_config(rounds=1, local_epochs=1, beta_contrastive=0.0)
    silo = toy_silo(cfg)
    silo.labels[silo.labeled] = -1
    silo.unlabeled = np.sort(np.concatenate([silo.labeled, silo.unlabeled]))
    silo.labeled = np.array([], dtype=np.intp)
    result = run_federation(cfg, [silo])
    comp = result.telemetry[0]["silos"][0]["loss_components"]
    assert comp["supervised"] == 0.0


# -- privacy audit ------------------------------------------------------------------

def test_audit_passes_on_clean_dump(tmp_path):
    cfg = small_config(rounds=2, local_epochs=1)
    silos = [toy_silo(cfg, 0), toy_silo(cfg, 1)]
    run_federation(cfg, silos, dump_dir=tmp_path)
    report = audit_messages(tmp_path)
    assert report["passed"], report["violations"]
    assert report["checked"] == 2 * 2 + 2  # uploads plus broadcasts


def test_audit_fails_on_injected_feature_matrix(tmp_path):
    cfg = small_config(rounds=1, local_epochs=1)
    silos = [toy_silo(cfg, 0), toy_silo(cfg, 1)]
    run_federation(cfg, silos, dump_dir=tmp_path)
    victim = sorted(tmp_path.glob("*silo0.msg"))[0]
    # Tamper: append a raw feature matrix to the message payload.
    leak = silos[0].features.astype("<f8").tobytes()
    victim.write_bytes(victim.read_bytes() + leak)
    report = audit_messages(tmp_path)
    assert not report["passed"]
    assert any("malformed" in v for v in report["violations"])


def test_audit_fails_on_per_node_vector(tmp_path):
    cfg = small_config(rounds=1, local_epochs=1)
    silos = [toy_silo(cfg, 0), toy_silo(cfg, 1)]
    run_federation(cfg, silos, dump_dir=tmp_path)
    victim = sorted(tmp_path.glob("*silo0.msg"))[0]
    up = parse_message(victim.read_bytes())
    # Tamper: smuggle a per-node column out through a "centroid" slot.
    n = silos[0].n_samples
    up.prototypes = PrototypeSet(
        centroids=np.vstack([np.zeros(n), np.zeros(n)]),
        counts=np.array([1, 1]),
        present=np.array([True, True]),
    )
    victim.write_bytes(serialize_upload(up))
    report = audit_messages(tmp_path)
    assert not report["passed"]


def test_audit_requires_messages(tmp_path):
    with pytest.raises(FileNotFoundError):
        audit_messages(tmp_path)
