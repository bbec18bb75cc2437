"""The local training objective: supervised focal loss plus four
semi-supervised terms and a proximal anchor to the last global weights.

    total = L_sup + eta * L_pl + mu * L_smooth + beta * L_contra
            + gamma_aug * L_aug + L_prox

Every term is non-negative, and a term whose weight is zero is skipped
entirely so the total is independent of that term's inputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import PROB_EPS, Tensor
from .errors import ShapeError
from .graph import PatientGraph
from .model import ModelParams, forward
from .pseudolabel import PseudoLabelSet, clinical_augment

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    eta: float = 0.8              # pseudo-label term
    mu_smooth: float = 0.05       # same-class smoothness
    beta: float = 0.1             # supervised contrastive
    gamma_aug: float = 0.3        # augmentation consistency
    mu_prox: float = 0.01         # proximal anchor
    focal_alpha: float = 0.75
    focal_gamma: float = 2.0
    focal_mode: str = "class_conditional"   # class_conditional | uniform
    contrastive_temp: float = 0.5
    sigma_noise: float = 0.05     # augmentation noise scale
    pl_reduction: str = "sum"     # sum | mean

    def validate(self) -> None:
        for name in ("eta", "mu_smooth", "beta", "gamma_aug", "mu_prox",
                     "focal_alpha", "focal_gamma", "contrastive_temp"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


def _zero() -> Tensor:
    return ad.constant([[0.0]])


def _focal_elements(
    probs: Tensor,
    nodes: np.ndarray,
    node_labels: np.ndarray,
    alpha_f: float,
    gamma: float,
    mode: str = "class_conditional",
) -> Tensor:
    """Per-node focal values -alpha_t * (1 - p)^gamma * log(p), shape (m, 1).

    In class_conditional mode alpha_t is alpha_f for positive-class nodes and
    (1 - alpha_f) for negative-class nodes, the usual focal balancing; in
    uniform mode every node gets alpha_f.
    """
    onehot = np.zeros((nodes.size, probs.cols))
    onehot[np.arange(nodes.size), node_labels] = 1.0
    picked = ad.sum_rows(ad.mul(ad.gather_rows(probs, nodes), ad.constant(onehot)))
    p = ad.clamp(picked, PROB_EPS, 1.0 - PROB_EPS)
    logp = ad.log(p)
    if gamma != 0.0:
        mod = ad.powf(ad.sub(ad.constant(np.ones((nodes.size, 1))), p), gamma)
        core = ad.mul(mod, logp)
    else:
        core = logp
    if mode == "class_conditional" and alpha_f != 1.0:
        alpha_t = np.where(node_labels == 1, alpha_f, 1.0 - alpha_f)
        return ad.mul(core, ad.constant(-alpha_t[:, None]))
    return ad.scale(core, -alpha_f)


def focal_loss(
    probs: Tensor,
    labels: np.ndarray,
    indices,
    alpha_f: float = 0.75,
    gamma: float = 2.0,
    mode: str = "class_conditional",
) -> Tensor:
    """Mean focal loss over the given labeled node indices."""
    indices = np.asarray(indices, dtype=np.intp)
    if indices.size == 0:
        log.warning("focal_loss called with an empty index set; returning 0")
        return _zero()
    elems = _focal_elements(probs, indices, labels[indices], alpha_f, gamma, mode)
    return ad.scale(ad.sum_all(elems), 1.0 / indices.size)


def pseudo_label_loss(
    probs: Tensor,
    pseudo: PseudoLabelSet,
    alpha_f: float = 0.75,
    gamma: float = 2.0,
    reduction: str = "sum",
    mode: str = "class_conditional",
) -> Tensor:
    """Confidence-weighted focal loss over accepted pseudo-labels.

    The reference reduction is a plain sum; "mean" divides by the set size
    for configurations where the sum scaling is undesirable.
    """
    if len(pseudo) == 0:
        return _zero()
    nodes = pseudo.nodes()
    elems = _focal_elements(probs, nodes, pseudo.labels(), alpha_f, gamma, mode)
    weighted = ad.mul(elems, ad.constant(pseudo.weights()[:, None]))
    total = ad.sum_all(weighted)
    if reduction == "mean":
        return ad.scale(total, 1.0 / len(pseudo))
    return total


def smoothness_loss(
    embeddings: Tensor,
    graph: PatientGraph,
    predicted_classes: np.ndarray,
) -> Tensor:
    """Mean squared embedding distance over same-predicted-class edges."""
    ei, ej = graph.edges_i, graph.edges_j
    same = predicted_classes[ei] == predicted_classes[ej]
    if not same.any():
        return _zero()
    hi = ad.gather_rows(embeddings, ei[same])
    hj = ad.gather_rows(embeddings, ej[same])
    diff = ad.sub(hi, hj)
    return ad.scale(ad.sum_all(ad.mul(diff, diff)), 1.0 / int(same.sum()))


def contrastive_loss(
    embeddings: Tensor,
    labels: np.ndarray,
    labeled_indices,
    temp: float = 0.5,
) -> Tensor:
    """Supervised contrastive pull/push over labeled embeddings.

    Nodes without a same-class peer are skipped; fewer than two labeled
    nodes make the term vacuous.
    """
    labeled_indices = np.asarray(labeled_indices, dtype=np.intp)
    m = labeled_indices.size
    if m < 2:
        log.warning("contrastive_loss needs at least 2 labeled nodes; returning 0")
        return _zero()
    y = labels[labeled_indices]
    pos_mask = (y[:, None] == y[None, :]).astype(float)
    np.fill_diagonal(pos_mask, 0.0)
    offdiag = np.ones((m, m)) - np.eye(m)
    keep = np.flatnonzero(pos_mask.sum(axis=1) > 0)
    if keep.size == 0:
        return _zero()

    h = ad.gather_rows(embeddings, labeled_indices)
    sims = ad.scale(ad.matmul(h, ad.transpose(h)), 1.0 / temp)
    # Row-max shift for stability; it cancels in the numerator/denominator
    # ratio so treating it as constant is exact.
    shift = np.broadcast_to(sims.value.max(axis=1, keepdims=True), (m, m)).copy()
    e = ad.exp(ad.sub(sims, ad.constant(shift)))
    num = ad.gather_rows(ad.sum_rows(ad.mul(e, ad.constant(pos_mask))), keep)
    den = ad.gather_rows(ad.sum_rows(ad.mul(e, ad.constant(offdiag))), keep)
    per_node = ad.sub(ad.log(den), ad.log(num))
    return ad.scale(ad.sum_all(per_node), 1.0 / keep.size)


def _normalized_rows(p: Tensor) -> Tensor:
    clamped = ad.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    return ad.mul_colvec(clamped, ad.powf(ad.sum_rows(clamped), -1.0))


def augmentation_consistency(
    params: ModelParams,
    features: np.ndarray,
    graph: PatientGraph,
    unlabeled,
    continuous_mask: np.ndarray,
    probs_clean: Tensor,
    sigma_noise: float,
    noise_rng: np.random.Generator,
    mode: str,
    dropout_seed: int | None,
) -> Tensor:
    """Mean KL(p(.|x) || p(.|x_aug)) over unlabeled nodes.

    The augmented pass reuses the clean pass's dropout mask (same seed), so
    with zero noise the two passes coincide and the divergence is exactly 0.
    Gradients flow through both passes. Both distributions are clamped and
    renormalized before the logs.
    """
    unlabeled = np.asarray(unlabeled, dtype=np.intp)
    if unlabeled.size == 0:
        return _zero()
    x_aug = clinical_augment(features, continuous_mask, sigma_noise, noise_rng)
    rng = np.random.default_rng(dropout_seed) if dropout_seed is not None else None
    out_aug = forward(params, x_aug, graph, mode=mode, dropout_rng=rng,
                      update_bn_stats=False)
    p = _normalized_rows(ad.gather_rows(probs_clean, unlabeled))
    q = _normalized_rows(ad.gather_rows(out_aug.probs, unlabeled))
    kl = ad.sum_all(ad.mul(p, ad.sub(ad.log(p), ad.log(q))))
    return ad.scale(kl, 1.0 / unlabeled.size)


def proximal_term(
    params: ModelParams,
    global_vec: np.ndarray | None,
    mu_p: float,
) -> Tensor:
    """(mu_p / 2) * squared distance between local and global trainables."""
    if mu_p == 0.0 or global_vec is None:
        return _zero()
    total: Tensor | None = None
    offset = 0
    for name in ModelParams.TRAINABLE_FIELDS:
        tensor = getattr(params, name)
        size = tensor.value.size
        ref = global_vec[offset:offset + size]
        if ref.size != size:
            raise ShapeError("global parameter vector too short for proximal term")
        offset += size
        diff = ad.sub(tensor, ad.constant(ref.reshape(tensor.shape)))
        sq = ad.sum_all(ad.mul(diff, diff))
        total = sq if total is None else ad.add(total, sq)
    return ad.scale(total, 0.5 * mu_p)


def total_loss(
    params: ModelParams,
    features: np.ndarray,
    graph: PatientGraph,
    labels: np.ndarray,
    labeled_indices,
    unlabeled_indices,
    pseudo: PseudoLabelSet,
    continuous_mask: np.ndarray,
    weights: LossWeights,
    global_vec: np.ndarray | None = None,
    mode: str = "train",
    dropout_seed: int | None = None,
    noise_seed: int | None = None,
    predicted_classes: np.ndarray | None = None,
) -> tuple[Tensor, dict]:
    """Assemble the full objective from one clean forward pass.

    predicted_classes may be pinned by callers that need a smooth function of
    the parameters (gradient checking); by default they come from the clean
    pass's argmax.
    """
    weights.validate()
    labeled_indices = np.asarray(labeled_indices, dtype=np.intp)
    unlabeled_indices = np.asarray(unlabeled_indices, dtype=np.intp)

    rng = np.random.default_rng(dropout_seed) if dropout_seed is not None else None
    out = forward(params, features, graph, mode=mode, dropout_rng=rng)

    sup = focal_loss(out.probs, labels, labeled_indices,
                     weights.focal_alpha, weights.focal_gamma, weights.focal_mode)
    total = sup
    comps = {"supervised": sup.item()}

    if weights.eta > 0 and len(pseudo) > 0:
        pl = pseudo_label_loss(out.probs, pseudo, weights.focal_alpha,
                               weights.focal_gamma, weights.pl_reduction,
                               weights.focal_mode)
        total = ad.add(total, ad.scale(pl, weights.eta))
        comps["pseudo_label"] = pl.item()
    else:
        comps["pseudo_label"] = 0.0

    if weights.mu_smooth > 0:
        if predicted_classes is None:
            predicted_classes = out.probs.value.argmax(axis=1)
        sm = smoothness_loss(out.embeddings, graph, predicted_classes)
        total = ad.add(total, ad.scale(sm, weights.mu_smooth))
        comps["smoothness"] = sm.item()
    else:
        comps["smoothness"] = 0.0

    if weights.beta > 0:
        con = contrastive_loss(out.embeddings, labels, labeled_indices,
                               weights.contrastive_temp)
        total = ad.add(total, ad.scale(con, weights.beta))
        comps["contrastive"] = con.item()
    else:
        comps["contrastive"] = 0.0

    if weights.gamma_aug > 0 and unlabeled_indices.size > 0:
        noise_rng = np.random.default_rng(noise_seed)
        aug = augmentation_consistency(
            params, features, graph, unlabeled_indices, continuous_mask,
            out.probs, sigma_noise=weights.sigma_noise,
            noise_rng=noise_rng, mode=mode, dropout_seed=dropout_seed,
        )
        total = ad.add(total, ad.scale(aug, weights.gamma_aug))
        comps["augmentation"] = aug.item()
    else:
        comps["augmentation"] = 0.0

    prox = proximal_term(params, global_vec, weights.mu_prox)
    total = ad.add(total, prox)
    comps["proximal"] = prox.item()

    comps["total"] = total.item()
    return total, comps
