"""Prototype-guided pseudo-labeling: class centroids, the triple gate, and
the decaying confidence threshold.

A node earns a pseudo-label only when it clears three gates in order:
confidence above the round's threshold, agreement with the nearest class
prototype in embedding space, and majority agreement among graph neighbors.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .graph import PatientGraph

log = logging.getLogger(__name__)

N_CLASSES = 2


@dataclass
class ThresholdSchedule:
    tau0: float = 0.90
    decay: float = 0.03
    tau_min: float = 0.70

    def at(self, t: int) -> float:
        if t < 0:
            raise ValueError("round index must be non-negative")
        return max(self.tau0 * math.exp(-self.decay * t), self.tau_min)


def threshold_at(t: int, schedule: ThresholdSchedule | None = None) -> float:
    return (schedule or ThresholdSchedule()).at(t)


@dataclass
class PrototypeSet:
    """Per-class embedding centroids with support counts."""

    centroids: np.ndarray          # (2, dim); rows for absent classes are zero
    counts: np.ndarray             # (2,) int support sizes
    present: np.ndarray            # (2,) bool
    provenance: str = "local"      # local | global | blended

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass
class PseudoLabelEntry:
    node: int
    label: int
    weight: float


@dataclass
class GateStats:
    candidates: int = 0
    passed_confidence: int = 0
    passed_prototype: int = 0
    passed_neighborhood: int = 0
    mean_weight: float = 0.0


@dataclass
class PseudoLabelSet:
    entries: list[PseudoLabelEntry] = field(default_factory=list)
    round_index: int = 0
    stats: GateStats = field(default_factory=GateStats)

    def __len__(self) -> int:
        return len(self.entries)

    def nodes(self) -> np.ndarray:
        return np.array([e.node for e in self.entries], dtype=np.intp)

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.intp)

    def weights(self) -> np.ndarray:
        return np.array([e.weight for e in self.entries])


def compute_prototypes(
    embeddings: np.ndarray,
    labels: np.ndarray,
    labeled_indices,
    provenance: str = "local",
) -> PrototypeSet:
    """Exact per-class means of labeled-node embeddings."""
    labeled_indices = np.asarray(labeled_indices, dtype=np.intp)
    dim = embeddings.shape[1]
    centroids = np.zeros((N_CLASSES, dim))
    counts = np.zeros(N_CLASSES, dtype=np.intp)
    present = np.zeros(N_CLASSES, dtype=bool)
    for c in range(N_CLASSES):
        rows = labeled_indices[labels[labeled_indices] == c]
        counts[c] = rows.size
        if rows.size:
            centroids[c] = embeddings[rows].mean(axis=0)
            present[c] = True
    return PrototypeSet(centroids=centroids, counts=counts, present=present,
                        provenance=provenance)


def confidence_weight(p_max: float, d_same: float, d_other: float) -> float:
    """Reliability weight: confidence shrunk by relative prototype distance.

    Coincident prototypes (both distances zero) fall back to half confidence.
    """
    if d_same < 0 or d_other < 0:
        raise ValueError("distances must be non-negative")
    total = d_same + d_other
    if total == 0.0:
        return 0.5 * p_max
    return p_max * (1.0 - d_same / total)


def blend_prototypes(
    local: PrototypeSet,
    global_: PrototypeSet | None,
    blend: float = 0.5,
) -> PrototypeSet:
    """Convex mix of global and local centroids, per class.

    A class present on only one side keeps that side's centroid; a class
    absent on both sides stays absent.
    """
    if global_ is None:
        return local
    if local.dim != global_.dim:
        raise ValueError("prototype dimensions differ")
    centroids = np.zeros_like(local.centroids)
    counts = np.zeros(N_CLASSES, dtype=np.intp)
    present = np.zeros(N_CLASSES, dtype=bool)
    for c in range(N_CLASSES):
        if local.present[c] and global_.present[c]:
            centroids[c] = blend * global_.centroids[c] + (1.0 - blend) * local.centroids[c]
            present[c] = True
        elif local.present[c]:
            centroids[c] = local.centroids[c]
            present[c] = True
        elif global_.present[c]:
            centroids[c] = global_.centroids[c]
            present[c] = True
        counts[c] = local.counts[c]
    return PrototypeSet(centroids=centroids, counts=counts, present=present,
                        provenance="blended")


def triple_gate(
    probs: np.ndarray,
    embeddings: np.ndarray,
    graph: PatientGraph,
    prototypes: PrototypeSet,
    tau_t: float,
    unlabeled,
    neighbor_classes: np.ndarray,
    round_index: int = 0,
    use_prototype_gate: bool = True,
    use_neighborhood_gate: bool = True,
) -> PseudoLabelSet:
    """Run the three acceptance gates over the unlabeled nodes.

    neighbor_classes holds the reference class per node (argmax predictions,
    with true labels substituted where known). Gates can be switched off for
    the confidence-only ablation; the weight then degrades to the bare
    confidence.
    """
    unlabeled = np.asarray(unlabeled, dtype=np.intp)
    stats = GateStats(candidates=int(unlabeled.size))
    entries: list[PseudoLabelEntry] = []

    for i in unlabeled.tolist():
        p_max = float(probs[i].max())
        pred = int(probs[i].argmax())
        if p_max < tau_t:
            continue
        stats.passed_confidence += 1

        weight = p_max
        if use_prototype_gate:
            if not prototypes.present[pred]:
                continue
            dists = np.full(N_CLASSES, np.inf)
            for c in range(N_CLASSES):
                if prototypes.present[c]:
                    dists[c] = np.linalg.norm(embeddings[i] - prototypes.centroids[c])
            if int(np.argmin(dists)) != pred:
                continue
            other = 1 - pred
            if prototypes.present[other]:
                weight = confidence_weight(p_max, float(dists[pred]), float(dists[other]))
            else:
                weight = 0.5 * p_max  # no contrast class to measure against
        stats.passed_prototype += 1

        if use_neighborhood_gate:
            nbrs = graph.neighbors[i]
            if nbrs.size == 0:
                continue
            agree = float(np.mean(neighbor_classes[nbrs] == pred))
            if agree < 0.5:
                continue
        stats.passed_neighborhood += 1

        entries.append(PseudoLabelEntry(node=i, label=pred, weight=weight))

    if entries:
        stats.mean_weight = float(np.mean([e.weight for e in entries]))
    log.debug(
        "round %d gate stats: %d candidates -> %d conf -> %d proto -> %d nbr",
        round_index, stats.candidates, stats.passed_confidence,
        stats.passed_prototype, stats.passed_neighborhood,
    )
    return PseudoLabelSet(entries=entries, round_index=round_index, stats=stats)


def reference_classes(
    probs: np.ndarray,
    labels: np.ndarray,
    labeled_indices,
) -> np.ndarray:
    """Argmax predictions for every node, overridden by true labels where known."""
    ref = probs.argmax(axis=1).astype(np.intp)
    labeled_indices = np.asarray(labeled_indices, dtype=np.intp)
    ref[labeled_indices] = labels[labeled_indices]
    return ref


def clinical_augment(
    features: np.ndarray,
    continuous_mask: np.ndarray,
    sigma_noise: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Gaussian perturbation restricted to continuous columns.

    Discrete columns are carried over bit-identically; with sigma_noise = 0
    the output equals the input.
    """
    out = features.copy()
    if sigma_noise == 0.0 or not continuous_mask.any():
        return out
    cols = np.flatnonzero(continuous_mask)
    out[:, cols] += rng.normal(0.0, sigma_noise, size=(features.shape[0], cols.size))
    return out
