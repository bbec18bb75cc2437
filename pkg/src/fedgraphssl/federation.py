"""The round-based federation protocol: silo training contexts, FedAvg
weight aggregation, size-weighted prototype aggregation, and the wire
format for everything a silo is allowed to transmit.

A silo never exposes features, labels, edges or per-node embeddings; each
upload carries exactly the flattened parameter vector, per-class prototype
centroids with support counts, and the silo sample count.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig
from .errors import MessageFormatError, ProtocolError
from .graph import PatientGraph, build_knn_graph, refine_graph
from .losses import total_loss
from .model import ModelParams, forward
from .pseudolabel import (
    PrototypeSet,
    PseudoLabelSet,
    blend_prototypes,
    compute_prototypes,
    reference_classes,
    triple_gate,
)

log = logging.getLogger(__name__)

MESSAGE_MAGIC = b"FMSG"
MESSAGE_VERSION = 1
KIND_UPLOAD = 1
KIND_BROADCAST = 2
N_CLASSES = 2


# ---------------------------------------------------------------------------
# silo state and the local round
# ---------------------------------------------------------------------------

@dataclass
class SiloState:
    """Everything one silo holds locally. Nothing here is ever transmitted
    except through a SiloUpload."""

    silo_id: int
    features: np.ndarray           # training rows only, silo-local order
    labels: np.ndarray             # int; -1 where the label is withheld
    labeled: np.ndarray            # local indices with visible labels
    unlabeled: np.ndarray
    continuous_mask: np.ndarray
    graph: PatientGraph
    params: ModelParams
    opt_state: dict
    master_seed: int
    pseudo: PseudoLabelSet = field(default_factory=PseudoLabelSet)
    local_protos: PrototypeSet | None = None
    global_protos: PrototypeSet | None = None

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]


@dataclass
class SiloUpload:
    silo_id: int
    n_samples: int
    params: np.ndarray
    prototypes: PrototypeSet


@dataclass
class GlobalBroadcast:
    params: np.ndarray
    prototypes: PrototypeSet | None


def make_silo_state(
    cfg: RunConfig,
    silo_id: int,
    features: np.ndarray,
    visible_labels: np.ndarray,
    labeled: np.ndarray,
    unlabeled: np.ndarray,
    continuous_mask: np.ndarray,
    master_seed: int,
    graph: PatientGraph | None = None,
) -> SiloState:
    if graph is None:
        graph = build_knn_graph(features, cfg.knn_k)
    params = ModelParams(cfg.encoder_config(features.shape[1]), seed=master_seed)
    return SiloState(
        silo_id=silo_id,
        features=features,
        labels=visible_labels,
        labeled=np.asarray(labeled, dtype=np.intp),
        unlabeled=np.asarray(unlabeled, dtype=np.intp),
        continuous_mask=continuous_mask,
        graph=graph,
        params=params,
        opt_state=ad.adam_init(params.trainables()),
        master_seed=master_seed,
    )


def _stream_seed(master: int, silo: int, round_idx: int, epoch: int, stream: int) -> int:
    ss = np.random.SeedSequence((master, silo, round_idx, epoch, stream))
    return int(ss.generate_state(1)[0])


def local_round(
    state: SiloState,
    cfg: RunConfig,
    global_params: np.ndarray,
    global_protos: PrototypeSet | None,
    round_idx: int,
    telemetry: dict | None = None,
) -> SiloUpload:
    """One silo's work for round t: load the broadcast weights, run the local
    epochs on the full objective, refresh pseudo-labels through the gates,
    periodically rebuild the graph from embeddings, and emit the upload."""
    state.params.unflatten(global_params)
    state.global_protos = global_protos
    if cfg.reset_optimizer_each_round:
        state.opt_state = ad.adam_init(state.params.trainables())

    tau_t = cfg.schedule().at(round_idx)
    weights = cfg.loss_weights()
    if state.labeled.size == 0:
        log.warning("silo %d has no labeled rows; supervised term is 0", state.silo_id)

    comps = {}
    for epoch in range(1, cfg.local_epochs + 1):
        loss, comps = total_loss(
            state.params,
            state.features,
            state.graph,
            state.labels,
            state.labeled,
            state.unlabeled,
            state.pseudo if cfg.use_pseudo_labels else PseudoLabelSet(),
            state.continuous_mask,
            weights,
            global_vec=global_params,
            mode="train",
            dropout_seed=_stream_seed(state.master_seed, state.silo_id, round_idx, epoch, 0),
            noise_seed=_stream_seed(state.master_seed, state.silo_id, round_idx, epoch, 1),
        )
        grads = ad.backward(loss)
        ad.adam_step(state.params.trainables(), grads, state.opt_state, lr=cfg.learning_rate)
        state.params.clamp_temperature()

    out = forward(state.params, state.features, state.graph, mode="eval")
    probs = out.probs.value
    embeddings = out.embeddings.value

    local_protos = compute_prototypes(embeddings, state.labels, state.labeled)
    if cfg.use_pseudo_labels:
        gate_protos = (
            blend_prototypes(local_protos, global_protos, cfg.proto_blend)
            if cfg.share_prototypes
            else local_protos
        )
        refs = reference_classes(probs, state.labels, state.labeled)
        state.pseudo = triple_gate(
            probs,
            embeddings,
            state.graph,
            gate_protos,
            tau_t,
            state.unlabeled,
            refs,
            round_index=round_idx,
            use_prototype_gate=cfg.use_prototype_gate,
            use_neighborhood_gate=cfg.use_neighborhood_gate,
        )
    else:
        state.pseudo = PseudoLabelSet(round_index=round_idx)

    if cfg.use_agr and round_idx % cfg.agr_period == 0 and state.graph.n_edges > 0:
        state.graph = refine_graph(embeddings, min(cfg.agr_k, state.n_samples - 1))
        log.debug("silo %d rebuilt graph at round %d", state.silo_id, round_idx)

    state.local_protos = local_protos
    upload = SiloUpload(
        silo_id=state.silo_id,
        n_samples=state.n_samples,
        params=state.params.flatten(),
        prototypes=local_protos,
    )
    if telemetry is not None:
        telemetry.update(
            silo_id=state.silo_id,
            loss_components=comps,
            tau=tau_t,
            pseudo_count=len(state.pseudo),
            gate_stats=vars(state.pseudo.stats),
            upload_bytes=len(serialize_upload(upload)),
        )
    return upload


# ---------------------------------------------------------------------------
# server-side aggregation
# ---------------------------------------------------------------------------

def fedavg_aggregate(uploads: list[SiloUpload]) -> np.ndarray:
    """Sample-size weighted mean of parameter vectors."""
    if not uploads:
        raise ProtocolError("no uploads to aggregate")
    size = uploads[0].params.size
    for up in uploads:
        if up.params.size != size:
            raise ProtocolError("parameter vectors differ in length")
    total = float(sum(up.n_samples for up in uploads))
    out = np.zeros(size)
    for up in uploads:
        out += (up.n_samples / total) * up.params
    return out


def aggregate_prototypes(uploads: list[SiloUpload]) -> PrototypeSet:
    """Support-count weighted centroid mean; classes absent everywhere stay absent."""
    if not uploads:
        raise ProtocolError("no uploads to aggregate")
    dim = uploads[0].prototypes.dim
    centroids = np.zeros((N_CLASSES, dim))
    counts = np.zeros(N_CLASSES, dtype=np.intp)
    present = np.zeros(N_CLASSES, dtype=bool)
    for c in range(N_CLASSES):
        total = sum(int(up.prototypes.counts[c]) for up in uploads if up.prototypes.present[c])
        if total == 0:
            continue
        for up in uploads:
            if up.prototypes.present[c]:
                centroids[c] += (up.prototypes.counts[c] / total) * up.prototypes.centroids[c]
        counts[c] = total
        present[c] = True
    return PrototypeSet(centroids=centroids, counts=counts, present=present,
                        provenance="global")


@dataclass
class FederationResult:
    global_params: np.ndarray
    telemetry: list[dict]
    param_trajectory: list[np.ndarray]


def run_federation(
    cfg: RunConfig,
    silos: list[SiloState],
    dump_dir: str | Path | None = None,
    record_trajectory: bool = False,
) -> FederationResult:
    """Execute T rounds of local training, aggregation and broadcast.

    Per-silo randomness is derived from (master seed, silo id, round, epoch),
    so sequential and concurrent execution produce identical results.
    """
    if not silos:
        raise ProtocolError("need at least one silo")
    dump_path = Path(dump_dir) if dump_dir else None
    if dump_path:
        dump_path.mkdir(parents=True, exist_ok=True)
        _write_audit_manifest(dump_path, cfg, silos)

    global_params = silos[0].params.flatten()
    global_protos: PrototypeSet | None = None
    telemetry: list[dict] = []
    trajectory: list[np.ndarray] = []

    for t in range(1, cfg.rounds + 1):
        round_tel: dict = {"round": t, "silos": []}
        uploads = []
        for silo in silos:
            silo_tel: dict = {}
            up = local_round(silo, cfg, global_params, global_protos, t, silo_tel)
            uploads.append(up)
            round_tel["silos"].append(silo_tel)
            if dump_path:
                blob = serialize_upload(up)
                (dump_path / f"round{t:03d}_silo{up.silo_id}.msg").write_bytes(blob)

        global_params = fedavg_aggregate(uploads)
        global_protos = aggregate_prototypes(uploads) if cfg.share_prototypes else None
        broadcast = GlobalBroadcast(params=global_params, prototypes=global_protos)
        if dump_path:
            blob = serialize_broadcast(broadcast)
            (dump_path / f"round{t:03d}_broadcast.msg").write_bytes(blob)
            round_tel["broadcast_bytes"] = len(blob)
        if record_trajectory:
            trajectory.append(global_params.copy())
        telemetry.append(round_tel)

    return FederationResult(global_params=global_params, telemetry=telemetry,
                            param_trajectory=trajectory)


def train_local(
    cfg: RunConfig,
    silo: SiloState,
    record_trajectory: bool = False,
) -> FederationResult:
    """Standalone training: the same per-round loop with no exchange.

    The silo keeps blending its own previous-round prototypes, which is
    exactly what a single-silo federation reduces to, so the parameter
    trajectory matches that case bit for bit.
    """
    params = silo.params.flatten()
    prev_protos: PrototypeSet | None = None
    telemetry: list[dict] = []
    trajectory: list[np.ndarray] = []
    for t in range(1, cfg.rounds + 1):
        silo_tel: dict = {}
        up = local_round(silo, cfg, params, prev_protos, t, silo_tel)
        params = up.params
        prev_protos = up.prototypes if cfg.share_prototypes else None
        telemetry.append({"round": t, "silos": [silo_tel]})
        if record_trajectory:
            trajectory.append(params.copy())
    return FederationResult(global_params=params, telemetry=telemetry,
                            param_trajectory=trajectory)


# ---------------------------------------------------------------------------
# wire format
# ---------------------------------------------------------------------------
# Layout (little endian): magic "FMSG", version u64, kind u64, then for
# uploads silo_id u64 and n_samples u64; then the parameter array and two
# prototype records, each a length-prefixed float64 array plus counts.

def _pack_array(vec: np.ndarray) -> bytes:
    return struct.pack("<Q", vec.size) + np.ascontiguousarray(vec, dtype="<f8").tobytes()


def _pack_prototypes(protos: PrototypeSet | None) -> bytes:
    out = b""
    for c in range(N_CLASSES):
        if protos is not None and protos.present[c]:
            out += struct.pack("<QQ", 1, int(protos.counts[c]))
            out += _pack_array(protos.centroids[c])
        else:
            out += struct.pack("<QQ", 0, 0)
            out += struct.pack("<Q", 0)
    return out


def serialize_upload(up: SiloUpload) -> bytes:
    head = MESSAGE_MAGIC + struct.pack(
        "<QQQQ", MESSAGE_VERSION, KIND_UPLOAD, up.silo_id, up.n_samples
    )
    return head + _pack_array(up.params) + _pack_prototypes(up.prototypes)


def serialize_broadcast(bc: GlobalBroadcast) -> bytes:
    head = MESSAGE_MAGIC + struct.pack("<QQ", MESSAGE_VERSION, KIND_BROADCAST)
    return head + _pack_array(bc.params) + _pack_prototypes(bc.prototypes)


def _read_array(blob: bytes, off: int) -> tuple[np.ndarray, int]:
    if off + 8 > len(blob):
        raise MessageFormatError("truncated array length")
    (size,) = struct.unpack_from("<Q", blob, off)
    off += 8
    nbytes = size * 8
    if off + nbytes > len(blob):
        raise MessageFormatError("truncated array payload")
    arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).copy()
    return arr, off + nbytes


def parse_message(blob: bytes) -> SiloUpload | GlobalBroadcast:
    """Strict parse; any malformed or trailing byte raises MessageFormatError."""
    if blob[:4] != MESSAGE_MAGIC:
        raise MessageFormatError("bad magic")
    off = 4
    if off + 16 > len(blob):
        raise MessageFormatError("truncated header")
    version, kind = struct.unpack_from("<QQ", blob, off)
    off += 16
    if version != MESSAGE_VERSION:
        raise MessageFormatError(f"unsupported version {version}")
    if kind == KIND_UPLOAD:
        if off + 16 > len(blob):
            raise MessageFormatError("truncated upload header")
        silo_id, n_samples = struct.unpack_from("<QQ", blob, off)
        off += 16
    elif kind == KIND_BROADCAST:
        silo_id = n_samples = None
    else:
        raise MessageFormatError(f"unknown message kind {kind}")

    params, off = _read_array(blob, off)
    centroids = []
    counts = []
    present = []
    for _ in range(N_CLASSES):
        if off + 16 > len(blob):
            raise MessageFormatError("truncated prototype record")
        flag, count = struct.unpack_from("<QQ", blob, off)
        off += 16
        vec, off = _read_array(blob, off)
        present.append(bool(flag))
        counts.append(int(count))
        centroids.append(vec)
    if off != len(blob):
        raise MessageFormatError(f"{len(blob) - off} trailing bytes")

    dim = max((c.size for c in centroids), default=0)
    mat = np.zeros((N_CLASSES, dim))
    for c, vec in enumerate(centroids):
        if vec.size:
            mat[c, : vec.size] = vec
    protos = PrototypeSet(
        centroids=mat,
        counts=np.array(counts, dtype=np.intp),
        present=np.array(present, dtype=bool),
        provenance="global" if kind == KIND_BROADCAST else "local",
    )
    if kind == KIND_UPLOAD:
        return SiloUpload(silo_id=int(silo_id), n_samples=int(n_samples),
                          params=params, prototypes=protos)
    return GlobalBroadcast(params=params, prototypes=protos)


# ---------------------------------------------------------------------------
# privacy audit over dumped messages
# ---------------------------------------------------------------------------

def _write_audit_manifest(dump_path: Path, cfg: RunConfig, silos: list[SiloState]) -> None:
    manifest = {
        "param_len": int(silos[0].params.flatten().size),
        "hidden_dim": int(cfg.hidden_dim),
        "silos": [
            {
                "silo_id": s.silo_id,
                "n_samples": int(s.n_samples),
                "n_features": int(s.features.shape[1]),
            }
            for s in silos
        ],
    }
    (dump_path / "meta.json").write_text(json.dumps(manifest, indent=2))


def audit_messages(dump_dir: str | Path) -> dict:
    """Scan every dumped message for payloads that could carry patient data.

    A message passes when it parses strictly and every array is either the
    parameter vector (exact expected length) or a class centroid (exact
    hidden dimension). Any array whose length matches a silo's node count,
    feature-matrix size, or any other per-node shape fails the audit.
    """
    dump_path = Path(dump_dir)
    meta_path = dump_path / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no meta.json manifest in {dump_dir}")
    manifest = json.loads(meta_path.read_text())
    param_len = manifest["param_len"]
    hidden = manifest["hidden_dim"]
    forbidden: set[int] = set()
    for silo in manifest["silos"]:
        n, d = silo["n_samples"], silo["n_features"]
        forbidden.update({n, n * d, n * hidden, 2 * n})

    files = sorted(p for p in dump_path.glob("*.msg"))
    if not files:
        raise FileNotFoundError(f"no .msg files in {dump_dir}")

    violations = []
    checked = 0
    for path in files:
        checked += 1
        try:
            msg = parse_message(path.read_bytes())
        except MessageFormatError as exc:
            violations.append(f"{path.name}: malformed message ({exc})")
            continue
        arrays = [("params", msg.params)]
        for c in range(N_CLASSES):
            if msg.prototypes.present[c]:
                arrays.append((f"centroid_{c}", msg.prototypes.centroids[c]))
        for name, arr in arrays:
            if name == "params" and arr.size != param_len:
                violations.append(
                    f"{path.name}: {name} length {arr.size} != expected {param_len}"
                )
            if name.startswith("centroid") and arr.size != hidden:
                violations.append(
                    f"{path.name}: {name} length {arr.size} != hidden dim {hidden}"
                )
            if name != "params" and arr.size in forbidden:
                violations.append(
                    f"{path.name}: {name} length {arr.size} matches a per-node shape"
                )
    return {
        "checked": checked,
        "violations": violations,
        "passed": not violations,
    }
