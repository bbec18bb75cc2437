"""Hybrid GCN/GraphSAGE node encoder with dynamic edge attention.

Per layer the two branches are fused by a learnable coefficient
alpha = sigmoid(fusion_logit):

    out = alpha * GCN(H) + (1 - alpha) * SAGE(H)

The GCN branch propagates with symmetric normalization over attention-gated
static edge weights plus unit self loops; the SAGE branch combines a linear
self term with an unweighted neighbor mean. Batch norm, ReLU and dropout are
applied after the first layer only, and the final linear classifier is
temperature scaled.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeError
from .graph import PatientGraph

TEMPERATURE_FLOOR = 0.1

CHECKPOINT_MAGIC = b"FGSM"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    in_dim: int
    hidden_dim: int = 64
    attn_hidden: int = 64
    n_classes: int = 2
    dropout: float = 0.4
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    fusion_mode: str = "learned"       # learned | gcn_only | sage_only
    use_attention: bool = True
    static_weights: str = "gaussian"   # gaussian | unit


def _xavier(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


class ModelParams:
    """All trainable tensors plus batch-norm running buffers.

    The flatten/unflatten pair round-trips bit-exactly; federated averaging
    operates on the flattened vector (running buffers included).
    """

    TRAINABLE_FIELDS = (
        "attn_w1", "attn_b1", "attn_w2", "attn_b2",
        "w_gcn1", "w_self1", "w_neigh1",
        "w_gcn2", "w_self2", "w_neigh2",
        "fusion_logit", "temperature",
        "bn_scale", "bn_shift",
        "cls_w", "cls_b",
    )
    BUFFER_FIELDS = ("bn_run_mean", "bn_run_var")

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, h, a, c = cfg.in_dim, cfg.hidden_dim, cfg.attn_hidden, cfg.n_classes

        self.attn_w1 = ad.param(_xavier(rng, 2 * d, a))
        self.attn_b1 = ad.param(np.zeros((1, a)))
        self.attn_w2 = ad.param(_xavier(rng, a, 1))
        self.attn_b2 = ad.param(np.zeros((1, 1)))
        self.w_gcn1 = ad.param(_xavier(rng, d, h))
        self.w_self1 = ad.param(_xavier(rng, d, h))
        self.w_neigh1 = ad.param(_xavier(rng, d, h))
        self.w_gcn2 = ad.param(_xavier(rng, h, h))
        self.w_self2 = ad.param(_xavier(rng, h, h))
        self.w_neigh2 = ad.param(_xavier(rng, h, h))
        self.fusion_logit = ad.param(np.zeros((1, 1)))
        self.temperature = ad.param(np.ones((1, 1)))
        self.bn_scale = ad.param(np.ones((1, h)))
        self.bn_shift = ad.param(np.zeros((1, h)))
        self.cls_w = ad.param(_xavier(rng, h, c))
        self.cls_b = ad.param(np.zeros((1, c)))

        self.bn_run_mean = np.zeros((1, h))
        self.bn_run_var = np.ones((1, h))

    def trainables(self) -> list[ad.Tensor]:
        return [getattr(self, name) for name in self.TRAINABLE_FIELDS]

    def field_shapes(self) -> list[tuple[str, tuple[int, int]]]:
        shapes = [(n, getattr(self, n).shape) for n in self.TRAINABLE_FIELDS]
        shapes += [(n, getattr(self, n).shape) for n in self.BUFFER_FIELDS]
        return shapes

    def flatten(self) -> np.ndarray:
        parts = [getattr(self, n).value.ravel() for n in self.TRAINABLE_FIELDS]
        parts += [getattr(self, n).ravel() for n in self.BUFFER_FIELDS]
        return np.concatenate(parts)

    def unflatten(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        offset = 0
        for name, shape in self.field_shapes():
            size = shape[0] * shape[1]
            chunk = vec[offset:offset + size].reshape(shape)
            offset += size
            if name in self.BUFFER_FIELDS:
                getattr(self, name)[...] = chunk
            else:
                getattr(self, name).value[...] = chunk
        if offset != vec.size:
            raise ShapeError(f"parameter vector length {vec.size} != expected {offset}")

    @property
    def n_parameters(self) -> int:
        return sum(s[0] * s[1] for _, s in self.field_shapes())

    def clamp_temperature(self) -> None:
        t = self.temperature.value
        if t[0, 0] < TEMPERATURE_FLOOR:
            t[0, 0] = TEMPERATURE_FLOOR

    def alpha(self) -> float:
        if self.cfg.fusion_mode == "gcn_only":
            return 1.0
        if self.cfg.fusion_mode == "sage_only":
            return 0.0
        return float(1.0 / (1.0 + np.exp(-self.fusion_logit.value[0, 0])))


@dataclass
class EncoderOutput:
    embeddings: ad.Tensor   # (n, hidden)
    logits: ad.Tensor       # (n, classes)
    probs: ad.Tensor        # (n, classes), rows sum to 1


def edge_attention(params: ModelParams, features: np.ndarray, graph: PatientGraph) -> ad.Tensor | None:
    """Per-edge gate a_ij = sigmoid(MLP([x_i || x_j])), symmetrized over direction."""
    if graph.n_edges == 0:
        return None
    if features.shape[0] != graph.n_nodes:
        raise ShapeError("feature rows do not match graph nodes")
    ei, ej = graph.edges_i, graph.edges_j

    def mlp(pairs: np.ndarray) -> ad.Tensor:
        x = ad.constant(pairs)
        hid = ad.relu(ad.add_rowvec(ad.matmul(x, params.attn_w1), params.attn_b1))
        return ad.sigmoid(ad.add_rowvec(ad.matmul(hid, params.attn_w2), params.attn_b2))

    fwd = mlp(np.concatenate([features[ei], features[ej]], axis=1))
    rev = mlp(np.concatenate([features[ej], features[ei]], axis=1))
    return ad.scale(ad.add(fwd, rev), 0.5)


def _fusion_coefficients(params: ModelParams) -> tuple[ad.Tensor, ad.Tensor]:
    mode = params.cfg.fusion_mode
    if mode == "gcn_only":
        return ad.constant([[1.0]]), ad.constant([[0.0]])
    if mode == "sage_only":
        return ad.constant([[0.0]]), ad.constant([[1.0]])
    alpha = ad.sigmoid(params.fusion_logit)
    return alpha, ad.sub(ad.constant([[1.0]]), alpha)


def hybrid_layer(
    h_in: ad.Tensor,
    graph: PatientGraph,
    attn: ad.Tensor | None,
    w_gcn: ad.Tensor,
    w_self: ad.Tensor,
    w_neigh: ad.Tensor,
    params: ModelParams,
) -> ad.Tensor:
    """One fused propagation layer (no activation)."""
    n = graph.n_nodes
    ei, ej = graph.edges_i, graph.edges_j

    if graph.n_edges > 0:
        if params.cfg.static_weights == "unit":
            static = np.ones((graph.n_edges, 1))
        else:
            static = graph.weights[:, None]
        e_static = ad.constant(static)
        e_eff = ad.mul(attn, e_static) if attn is not None else e_static
        deg = ad.edge_degree(e_eff, ei, ej, n, self_weight=1.0)
        dis = ad.powf(deg, -0.5)
        gated = ad.edge_gate(e_eff, dis, ei, ej)
        self_coef = ad.mul(dis, dis)
        gcn_in = ad.add(
            ad.mul_colvec(h_in, self_coef),
            ad.edge_propagate(gated, h_in, ei, ej, n),
        )
    else:
        # Degree-1 self loop: the normalized propagation is the identity.
        gcn_in = h_in

    gcn = ad.matmul(gcn_in, w_gcn)
    sage = ad.add(
        ad.matmul(h_in, w_self),
        ad.matmul(ad.neighbor_mean(h_in, ei, ej, n), w_neigh),
    )
    alpha, beta = _fusion_coefficients(params)
    return ad.add(ad.scalar_mul(gcn, alpha), ad.scalar_mul(sage, beta))


def _batch_norm(
    params: ModelParams, h: ad.Tensor, mode: str, update_stats: bool = True
) -> ad.Tensor:
    cfg = params.cfg
    eps = ad.constant(np.full((1, h.cols), cfg.bn_eps))
    if mode == "train":
        n = h.rows
        mean = ad.scale(ad.sum_cols(h), 1.0 / n)
        centered = ad.sub_rowvec(h, mean)
        var = ad.scale(ad.sum_cols(ad.mul(centered, centered)), 1.0 / n)
        inv_std = ad.powf(ad.add(var, eps), -0.5)
        if update_stats:
            m = cfg.bn_momentum
            params.bn_run_mean *= 1.0 - m
            params.bn_run_mean += m * mean.value
            params.bn_run_var *= 1.0 - m
            params.bn_run_var += m * var.value
    else:
        centered = ad.sub_rowvec(h, ad.constant(params.bn_run_mean))
        inv_std = ad.powf(ad.add(ad.constant(params.bn_run_var), eps), -0.5)
    normed = ad.mul_rowvec(centered, inv_std)
    return ad.add_rowvec(ad.mul_rowvec(normed, params.bn_scale), params.bn_shift)


def forward(
    params: ModelParams,
    features: np.ndarray,
    graph: PatientGraph,
    mode: str = "eval",
    dropout_rng: np.random.Generator | None = None,
    update_bn_stats: bool = True,
) -> EncoderOutput:
    """Full encoder pass. Train mode uses batch statistics and dropout;
    eval mode is deterministic and uses the running batch-norm buffers.
    Auxiliary passes (consistency views) set update_bn_stats=False so the
    running buffers advance once per training step."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "train" and params.cfg.dropout > 0 and dropout_rng is None:
        raise ValueError("train mode with dropout needs a dropout_rng")

    x = ad.constant(features)
    attn = edge_attention(params, features, graph) if params.cfg.use_attention else None

    h1 = hybrid_layer(x, graph, attn, params.w_gcn1, params.w_self1, params.w_neigh1, params)
    h1 = ad.relu(_batch_norm(params, h1, mode, update_stats=update_bn_stats))
    if mode == "train" and params.cfg.dropout > 0:
        h1 = ad.dropout(h1, params.cfg.dropout, dropout_rng)

    h2 = hybrid_layer(h1, graph, attn, params.w_gcn2, params.w_self2, params.w_neigh2, params)

    inv_t = ad.powf(params.temperature, -1.0)
    logits = ad.scalar_mul(
        ad.add_rowvec(ad.matmul(h2, params.cls_w), params.cls_b), inv_t
    )
    probs = ad.softmax_rows(logits)
    return EncoderOutput(embeddings=h2, logits=logits, probs=probs)


def save_checkpoint(params: ModelParams, path) -> None:
    """Binary checkpoint: versioned header, shape manifest, flat float64 vector."""
    shapes = params.field_shapes()
    vec = params.flatten()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<QQ", CHECKPOINT_VERSION, len(shapes)))
        for name, (r, c) in shapes:
            blob = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<QQ", r, c))
        fh.write(struct.pack("<Q", vec.size))
        fh.write(vec.astype("<f8").tobytes())


def load_checkpoint(params: ModelParams, path) -> None:
    """Restore a checkpoint saved by save_checkpoint into params (in place)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ShapeError("not a model checkpoint")
    off = 4
    version, n_fields = struct.unpack_from("<QQ", blob, off)
    off += 16
    if version != CHECKPOINT_VERSION:
        raise ShapeError(f"unsupported checkpoint version {version}")
    manifest = []
    for _ in range(n_fields):
        (name_len,) = struct.unpack_from("<Q", blob, off)
        off += 8
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        r, c = struct.unpack_from("<QQ", blob, off)
        off += 16
        manifest.append((name, (int(r), int(c))))
    if manifest != params.field_shapes():
        raise ShapeError("checkpoint manifest does not match model configuration")
    (size,) = struct.unpack_from("<Q", blob, off)
    off += 8
    vec = np.frombuffer(blob, dtype="<f8", count=size, offset=off)
    params.unflatten(vec.copy())
