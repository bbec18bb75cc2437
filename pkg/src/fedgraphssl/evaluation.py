"""Calibrated classifier head and clinical evaluation statistics.

The head is an L2-regularized logistic regression over concatenated raw
features and encoder embeddings, fit by damped Newton iterations so the
objective decreases monotonically to a gradient-norm tolerance. Metrics are
rank-based AUROC with midrank tie handling, macro-F1, sensitivity and
specificity, plus an exact small-sample Wilcoxon signed-rank test.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import HeadError

_EXACT_WILCOXON_LIMIT = 25


# ---------------------------------------------------------------------------
# calibrated augmented head
# ---------------------------------------------------------------------------

def class_balance_weights(labels: np.ndarray) -> np.ndarray:
    """Per-sample weights n / (2 * n_c): both classes contribute equally."""
    n = labels.size
    out = np.empty(n)
    for c in (0, 1):
        mask = labels == c
        if not mask.any():
            raise HeadError(f"class {c} absent from the labeled set")
        out[mask] = n / (2.0 * mask.sum())
    return out


@dataclass
class CalibratedHead:
    weights: np.ndarray
    bias: float
    c: float
    input_mean: np.ndarray
    input_scale: np.ndarray
    objective_trace: list[float] = field(default_factory=list)

    def decision_scores(self, features: np.ndarray) -> np.ndarray:
        z = (features - self.input_mean) / self.input_scale @ self.weights + self.bias
        return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))

    def predict(self, features: np.ndarray, threshold: float = 0.5) -> np.ndarray:
        return (self.decision_scores(features) >= threshold).astype(np.intp)


def _log1pexp(m: np.ndarray) -> np.ndarray:
    # log(1 + exp(-m)), stable in both tails
    out = np.empty_like(m)
    pos = m > 0
    out[pos] = np.log1p(np.exp(-m[pos]))
    out[~pos] = -m[~pos] + np.log1p(np.exp(m[~pos]))
    return out


def train_head(
    features: np.ndarray,
    embeddings: np.ndarray,
    labels: np.ndarray,
    labeled_indices,
    c: float = 0.5,
    tol: float = 1e-6,
    max_iter: int = 200,
) -> CalibratedHead:
    """Fit the augmented head on [X || H] rows of the labeled nodes.

    Columns are standardized on the fitting rows first so the raw features
    and the embedding block face the ridge penalty on equal footing.
    Objective: 0.5 ||w||^2 + c * sum_i s_i * logloss_i with class-balanced
    sample weights s_i; the bias is unpenalized. Newton steps are halved
    until the objective decreases, which convexity guarantees is possible,
    so the trace is strictly monotone until convergence.
    """
    labeled_indices = np.asarray(labeled_indices, dtype=np.intp)
    raw = np.hstack([features, embeddings])[labeled_indices]
    mean = raw.mean(axis=0)
    scale = raw.std(axis=0)
    scale[scale == 0.0] = 1.0
    z = (raw - mean) / scale
    y = labels[labeled_indices].astype(np.intp)
    s = class_balance_weights(y)
    sign = 2.0 * y - 1.0
    n, d = z.shape

    w = np.zeros(d)
    b = 0.0

    def objective(w_, b_):
        margins = sign * (z @ w_ + b_)
        return 0.5 * float(w_ @ w_) + c * float(np.sum(s * _log1pexp(margins)))

    trace = [objective(w, b)]
    for _ in range(max_iter):
        p = 1.0 / (1.0 + np.exp(-np.clip(z @ w + b, -500, 500)))
        resid = c * s * (p - y)
        grad_w = w + z.T @ resid
        grad_b = float(resid.sum())
        gnorm = max(float(np.max(np.abs(grad_w))), abs(grad_b))
        if gnorm <= tol:
            break
        r = c * s * p * (1.0 - p)
        za = np.hstack([z, np.ones((n, 1))])
        hess = za.T @ (za * r[:, None])
        hess[:d, :d] += np.eye(d)
        hess += 1e-12 * np.eye(d + 1)
        step = np.linalg.solve(hess, np.concatenate([grad_w, [grad_b]]))
        scale_ = 1.0
        for _ in range(60):
            cand = objective(w - scale_ * step[:d], b - scale_ * step[d])
            if cand < trace[-1]:
                break
            scale_ *= 0.5
        w = w - scale_ * step[:d]
        b = b - scale_ * step[d]
        trace.append(objective(w, b))

    return CalibratedHead(weights=w, bias=b, c=c, input_mean=mean,
                          input_scale=scale, objective_trace=trace)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Rank-based (Mann-Whitney) AUROC with midrank tie correction."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise HeadError("AUROC needs both classes in the evaluation set")
    ranks = _midranks(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_f1_sens_spec(predictions, labels) -> tuple[float, float, float]:
    """Macro-F1 (0/0 counts as 0), sensitivity and specificity at the
    operating threshold already applied to predictions."""
    predictions = np.asarray(predictions, dtype=np.intp)
    labels = np.asarray(labels, dtype=np.intp)
    f1s = []
    for c in (0, 1):
        tp = int(((predictions == c) & (labels == c)).sum())
        fp = int(((predictions == c) & (labels != c)).sum())
        fn = int(((predictions != c) & (labels == c)).sum())
        denom = 2 * tp + fp + fn
        f1s.append(2.0 * tp / denom if denom else 0.0)
    pos = labels == 1
    neg = labels == 0
    sens = float((predictions[pos] == 1).mean()) if pos.any() else 0.0
    spec = float((predictions[neg] == 0).mean()) if neg.any() else 0.0
    return float(np.mean(f1s)), sens, spec


@dataclass
class MetricsReport:
    auroc_values: list[float] = field(default_factory=list)
    macro_f1_values: list[float] = field(default_factory=list)
    sensitivity_values: list[float] = field(default_factory=list)
    specificity_values: list[float] = field(default_factory=list)

    def add(self, auroc_v, f1_v, sens_v, spec_v) -> None:
        self.auroc_values.append(float(auroc_v))
        self.macro_f1_values.append(float(f1_v))
        self.sensitivity_values.append(float(sens_v))
        self.specificity_values.append(float(spec_v))

    @staticmethod
    def _summary(values):
        arr = np.asarray(values)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        return {"mean": float(arr.mean()), "std": std, "per_fold": [float(v) for v in arr]}

    def as_dict(self) -> dict:
        return {
            "auroc": self._summary(self.auroc_values),
            "macro_f1": self._summary(self.macro_f1_values),
            "sensitivity": self._summary(self.sensitivity_values),
            "specificity": self._summary(self.specificity_values),
        }


# ---------------------------------------------------------------------------
# exact Wilcoxon signed-rank test
# ---------------------------------------------------------------------------

@dataclass
class WilcoxonResult:
    two_sided: float
    one_sided_greater: float   # alternative: a tends larger than b
    statistic: float           # W+ over nonzero differences
    n_effective: int


def wilcoxon_signed_rank(a, b) -> WilcoxonResult:
    """Exact signed-rank test for small paired samples.

    Zero differences are dropped, tied absolute differences take midranks,
    and the null distribution of W+ is enumerated exactly over all 2^n sign
    assignments (via a subset-sum table over doubled ranks). The two-sided
    p is twice the smaller tail, capped at 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have the same length")
    diffs = a - b
    diffs = diffs[diffs != 0.0]
    n = diffs.size
    if n == 0:
        return WilcoxonResult(1.0, 1.0, 0.0, 0)
    if n > _EXACT_WILCOXON_LIMIT:
        raise ValueError(f"exact enumeration limited to n <= {_EXACT_WILCOXON_LIMIT}")

    ranks = _midranks(np.abs(diffs))
    doubled = np.rint(2.0 * ranks).astype(np.int64)
    w_plus2 = int(np.rint(2.0 * float(ranks[diffs > 0].sum())))

    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:counts.size - r]
        counts = counts + shifted
    denom = 2.0 ** n

    p_le = counts[: w_plus2 + 1].sum() / denom
    p_ge = counts[w_plus2:].sum() / denom
    two_sided = min(1.0, 2.0 * min(p_le, p_ge))
    return WilcoxonResult(
        two_sided=float(two_sided),
        one_sided_greater=float(p_ge),
        statistic=w_plus2 / 2.0,
        n_effective=n,
    )
