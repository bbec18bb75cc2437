"""Dataset ingestion, standardization, non-IID silo partitioning and folds.

Everything here is a pure function of (inputs, seed): repeated calls with the
same arguments return identical results.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import IngestionError, PartitionError, ScarcityError

log = logging.getLogger(__name__)

PIMA_COLUMNS = [
    "pregnancies", "glucose", "blood_pressure", "skin_thickness",
    "insulin", "bmi", "pedigree", "age",
]
EARLY_STAGE_COLUMNS = [
    "age", "gender", "polyuria", "polydipsia", "sudden_weight_loss",
    "weakness", "polyphagia", "genital_thrush", "visual_blurring", "itching",
    "irritability", "delayed_healing", "partial_paresis", "muscle_stiffness",
    "alopecia", "obesity",
]
SYNTH_GDM_COLUMNS = [
    "age", "bmi", "gravidity", "parity", "family_history", "pcos",
    "fasting_glucose", "ogtt_2h", "systolic_bp", "diastolic_bp",
]

# Values mapped to 1 / 0 when parsing categorical columns.
_POSITIVE_TOKENS = {"yes", "positive", "male", "1"}
_NEGATIVE_TOKENS = {"no", "negative", "female", "0"}


@dataclass
class DatasetSchema:
    name: str
    columns: list[str]
    label_column: str
    continuous: list[bool]
    expected_rows: int
    expected_positive_rate: float
    positive_rate_tol: float = 0.005


SCHEMAS = {
    "pima": DatasetSchema(
        name="pima",
        columns=PIMA_COLUMNS,
        label_column="outcome",
        # pregnancies is a count but is treated as continuous alongside the
        # other clinical measurements
        continuous=[True] * 8,
        expected_rows=768,
        expected_positive_rate=0.349,
    ),
    "early_stage": DatasetSchema(
        name="early_stage",
        columns=EARLY_STAGE_COLUMNS,
        label_column="class",
        continuous=[True] + [False] * 15,  # age is the only continuous feature
        expected_rows=520,
        expected_positive_rate=0.615,
    ),
    "synthetic_gdm": DatasetSchema(
        name="synthetic_gdm",
        columns=SYNTH_GDM_COLUMNS,
        label_column="gdm",
        continuous=[True, True, False, False, False, False, True, True, True, True],
        expected_rows=3525,
        expected_positive_rate=0.358,
        positive_rate_tol=0.02,
    ),
}


@dataclass
class PatientDataset:
    features: np.ndarray            # (n, d) float64
    labels: np.ndarray | None      # (n,) int in {0, 1}
    continuous_mask: np.ndarray    # (d,) bool
    feature_names: list[str]
    name: str = "dataset"

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def positive_rate(self) -> float:
        if self.labels is None:
            raise ValueError("dataset has no labels")
        return float(np.mean(self.labels))


@dataclass
class SiloPartition:
    silo_id: int
    row_indices: np.ndarray
    labeled: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.intp))
    unlabeled: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.intp))
    test: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.intp))

    @property
    def train_indices(self) -> np.ndarray:
        return np.setdiff1d(self.row_indices, self.test)

    def validate(self) -> None:
        merged = np.concatenate([self.labeled, self.unlabeled, self.test])
        if np.unique(merged).size != merged.size:
            raise PartitionError(f"silo {self.silo_id}: overlapping index sets")
        if not np.array_equal(np.sort(merged), np.sort(self.row_indices)):
            raise PartitionError(f"silo {self.silo_id}: L/U/test do not cover row_indices")


@dataclass
class FoldPlan:
    fold_index: int
    seed: int
    test_indices: np.ndarray
    partitions: list[SiloPartition] = field(default_factory=list)


def _parse_value(token: str, row: int, col: str) -> float:
    t = token.strip()
    try:
        return float(t)
    except ValueError:
        pass
    low = t.lower()
    if low in _POSITIVE_TOKENS:
        return 1.0
    if low in _NEGATIVE_TOKENS:
        return 0.0
    raise IngestionError(f"unparseable value {token!r} at row {row}, column {col!r}")


def load_dataset(path, schema: str | DatasetSchema) -> PatientDataset:
    """Read a canonical CSV (header row, comma separated) into a PatientDataset."""
    sch = SCHEMAS[schema] if isinstance(schema, str) else schema
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"dataset file not found: {path}")

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        rows = [r for r in reader if r]

    header = [h.strip() for h in header]
    expected = sch.columns + [sch.label_column]
    if header != expected:
        missing = [c for c in expected if c not in header]
        if missing:
            raise IngestionError(f"{path}: missing column(s) {missing}")
        raise IngestionError(f"{path}: column order {header} != expected {expected}")
    if len(rows) != sch.expected_rows:
        raise IngestionError(
            f"{path}: expected {sch.expected_rows} rows, found {len(rows)}"
        )

    n, d = len(rows), len(sch.columns)
    features = np.empty((n, d))
    labels = np.empty(n, dtype=np.intp)
    for r, row in enumerate(rows):
        if len(row) != d + 1:
            raise IngestionError(f"{path}: row {r} has {len(row)} fields, expected {d + 1}")
        for c in range(d):
            features[r, c] = _parse_value(row[c], r, sch.columns[c])
        lab = _parse_value(row[d], r, sch.label_column)
        if lab not in (0.0, 1.0):
            raise IngestionError(f"{path}: non-binary label at row {r}")
        labels[r] = int(lab)

    ds = PatientDataset(
        features=features,
        labels=labels,
        continuous_mask=np.array(sch.continuous, dtype=bool),
        feature_names=list(sch.columns),
        name=sch.name,
    )
    rate = ds.positive_rate
    if abs(rate - sch.expected_positive_rate) > sch.positive_rate_tol:
        raise IngestionError(
            f"{path}: positive rate {rate:.4f} outside "
            f"{sch.expected_positive_rate} +/- {sch.positive_rate_tol}"
        )
    return ds


def standardize(raw: PatientDataset, fit_indices) -> PatientDataset:
    """Z-score all rows using mean/std estimated on fit_indices only.

    Uses the population standard deviation. Zero-variance columns are set to
    zero everywhere rather than dividing by zero.
    """
    fit_indices = np.asarray(fit_indices, dtype=np.intp)
    if fit_indices.size == 0:
        raise ValueError("standardize: fit_indices must be non-empty")
    sub = raw.features[fit_indices]
    mean = sub.mean(axis=0)
    std = sub.std(axis=0)
    out = np.zeros_like(raw.features)
    nonzero = std > 0
    out[:, nonzero] = (raw.features[:, nonzero] - mean[nonzero]) / std[nonzero]
    return replace(raw, features=out)


def dirichlet_partition(
    data: PatientDataset,
    n_silos: int,
    alpha: float = 0.5,
    seed: int = 0,
    min_class_fraction: float = 0.0,
    skew_band: tuple[float, float] | None = None,
) -> list[SiloPartition]:
    """Split rows into silos with per-class proportions drawn from Dir(alpha).

    Rows of each class are allocated by largest-remainder rounding of the
    sampled proportions. Draws where a silo would receive zero rows of some
    class (or less than min_class_fraction of that class's rows, when set)
    are resampled up to 100 times; after that one row is force-moved from
    the best-supplied silo. The floor keeps every silo a statistically
    identifiable participant for both classes while preserving heavy skew.

    skew_band = (lo, hi) additionally resamples until the largest deviation
    of a silo's positive rate from the global rate falls inside the band:
    the draw shows real inter-silo heterogeneity (>= lo) but stays moderate
    (<= hi) rather than degenerate, matching the regime the concentration
    parameter is meant to produce.
    """
    if n_silos < 2:
        raise PartitionError("need at least 2 silos")
    labels = data.labels
    classes = np.unique(labels)
    for c in classes:
        if (labels == c).sum() < n_silos:
            raise PartitionError(f"class {c} has fewer rows than silos")

    rng = np.random.default_rng(seed)
    class_rows = {c: np.flatnonzero(labels == c) for c in classes}

    def allocate():
        counts = {}
        for c in classes:
            m = class_rows[c].size
            props = rng.dirichlet(np.full(n_silos, alpha))
            base = np.floor(props * m).astype(int)
            rem = m - base.sum()
            if rem > 0:
                frac = props * m - base
                order = np.argsort(-frac, kind="stable")
                base[order[:rem]] += 1
            counts[c] = base
        return counts

    def acceptable(counts):
        silo_sizes = sum(counts[c] for c in classes)
        for c in classes:
            if (counts[c] < 1).any():
                return False
            if min_class_fraction > 0:
                if np.any(counts[c] < min_class_fraction * class_rows[c].size):
                    return False
        if skew_band is not None and classes.size == 2:
            global_rate = float((labels == classes[-1]).mean())
            rates = counts[classes[-1]] / silo_sizes
            max_dev = float(np.max(np.abs(rates - global_rate)))
            if not skew_band[0] <= max_dev <= skew_band[1]:
                return False
        return True

    # The base >=1-row rule gets the standard 100 resamples; the optional
    # identifiability/skew constraints widen the budget since their joint
    # acceptance region is much smaller.
    budget = 2000 if (min_class_fraction > 0 or skew_band is not None) else 100
    counts = allocate()
    for _ in range(budget):
        if acceptable(counts):
            break
        counts = allocate()
    else:
        log.warning(
            "dirichlet_partition: no draw satisfied the constraints after "
            "%d resamples; using the last draw with forced moves", budget,
        )
    for c in classes:
        while (counts[c] == 0).any():
            needy = int(np.argmin(counts[c]))
            donor = int(np.argmax(counts[c]))
            counts[c][donor] -= 1
            counts[c][needy] += 1

    silo_rows: list[list[int]] = [[] for _ in range(n_silos)]
    for c in classes:
        rows = class_rows[c].copy()
        rng.shuffle(rows)
        offset = 0
        for s in range(n_silos):
            take = counts[c][s]
            silo_rows[s].extend(rows[offset:offset + take].tolist())
            offset += take

    return [
        SiloPartition(silo_id=s, row_indices=np.array(sorted(silo_rows[s]), dtype=np.intp))
        for s in range(n_silos)
    ]


def mask_labels(
    partition: SiloPartition,
    labels: np.ndarray,
    rho: float,
    seed: int = 0,
) -> SiloPartition:
    """Withhold a fraction rho of training labels, stratified by class.

    Per class, round(rho * count) rows move to the unlabeled set (half-up
    rounding for platform determinism). Raises ScarcityError when a class
    would end up with zero labeled rows.
    """
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho={rho} outside [0, 1)")
    rng = np.random.default_rng(seed)
    train = partition.train_indices
    labeled_parts = []
    unlabeled_parts = []
    for c in np.unique(labels[train]):
        rows = train[labels[train] == c]
        n_hide = int(np.floor(rho * rows.size + 0.5))
        if n_hide >= rows.size and rows.size > 0 and rho > 0:
            raise ScarcityError(
                f"silo {partition.silo_id}: rho={rho} leaves no labeled rows of class {c}"
            )
        hide = rng.choice(rows, size=n_hide, replace=False)
        unlabeled_parts.append(np.sort(hide))
        labeled_parts.append(np.sort(np.setdiff1d(rows, hide)))

    return replace(
        partition,
        labeled=np.sort(np.concatenate(labeled_parts)) if labeled_parts else partition.labeled,
        unlabeled=np.sort(np.concatenate(unlabeled_parts)) if unlabeled_parts else np.array([], dtype=np.intp),
    )


def make_folds(
    data: PatientDataset,
    n_folds: int = 5,
    seeds: tuple[int, ...] = (42, 137, 255, 512, 1024),
) -> list[FoldPlan]:
    """Stratified K-fold test assignment: every row lands in exactly one fold.

    The fold shuffle is driven by the first seed so the tiling is common to
    all folds; each FoldPlan then carries its own seed for downstream
    partitioning and masking.
    """
    if n_folds < 2:
        raise ValueError("need at least 2 folds")
    if len(seeds) < n_folds:
        raise ValueError("need one seed per fold")
    rng = np.random.default_rng(seeds[0])
    assignment = np.empty(data.n_rows, dtype=np.intp)
    for c in np.unique(data.labels):
        rows = np.flatnonzero(data.labels == c)
        rng.shuffle(rows)
        for f in range(n_folds):
            assignment[rows[f::n_folds]] = f
    return [
        FoldPlan(
            fold_index=f,
            seed=int(seeds[f]),
            test_indices=np.flatnonzero(assignment == f),
        )
        for f in range(n_folds)
    ]


def plan_folds(
    data: PatientDataset,
    n_silos: int,
    alpha: float = 0.5,
    n_folds: int = 5,
    seeds: tuple[int, ...] = (42, 137, 255, 512, 1024),
    min_class_fraction: float = 0.0,
    skew_band: tuple[float, float] | None = None,
) -> list[FoldPlan]:
    """Cross-validation plan: one Dirichlet silo assignment shared by all
    folds and fold tiles stratified by class within each silo.

    The silo draw and the fold tiling are driven by the first seed; each
    fold's own seed drives label masking and downstream training randomness.
    Every row lands in exactly one test fold. Masking is applied separately
    (mask_fold) so a scarcity failure skips one fold, not the plan.
    """
    if len(seeds) < n_folds:
        raise ValueError("need one seed per fold")
    partitions = dirichlet_partition(
        data, n_silos, alpha=alpha, seed=seeds[0],
        min_class_fraction=min_class_fraction, skew_band=skew_band,
    )
    rng = np.random.default_rng(seeds[0])
    fold_of_row = np.full(data.n_rows, -1, dtype=np.intp)
    for part in partitions:
        for c in np.unique(data.labels[part.row_indices]):
            rows = part.row_indices[data.labels[part.row_indices] == c].copy()
            rng.shuffle(rows)
            for f in range(n_folds):
                fold_of_row[rows[f::n_folds]] = f

    folds = []
    for f in range(n_folds):
        fold_parts = [
            replace(part, test=np.sort(
                part.row_indices[fold_of_row[part.row_indices] == f]
            ))
            for part in partitions
        ]
        folds.append(FoldPlan(
            fold_index=f,
            seed=int(seeds[f]),
            test_indices=np.flatnonzero(fold_of_row == f),
            partitions=fold_parts,
        ))
    return folds


def mask_fold(fold: FoldPlan, labels: np.ndarray, rho: float) -> FoldPlan:
    """Apply stratified label masking to every partition of a fold."""
    masked = []
    for k, part in enumerate(fold.partitions):
        out = mask_labels(part, labels, rho, seed=fold.seed + 1000 * (k + 1))
        out.validate()
        masked.append(out)
    return replace(fold, partitions=masked)


def synth_gdm(n: int = 3525, seed: int = 0) -> PatientDataset:
    """Synthetic antenatal-records stand-in with one dominant glucose feature.

    The label is drawn from a logistic model dominated by the 2-hour OGTT
    analog, so a single-feature classifier on that column scores AUROC > 0.97
    and every reasonable method saturates (the ceiling regime).
    """
    rng = np.random.default_rng(seed)
    u = rng.normal(size=n)  # latent metabolic risk

    age = np.clip(rng.normal(29.5, 5.0, n), 18, 45)
    bmi = np.clip(27.0 + 2.2 * u + rng.normal(0, 4.0, n), 16, 48)
    gravidity = 1 + rng.poisson(1.2, n)
    parity = np.minimum(rng.poisson(0.9, n), gravidity - 1)
    family_history = (rng.random(n) < 0.30).astype(float)
    pcos = (rng.random(n) < 0.12).astype(float)
    fasting = 4.9 + 0.45 * u + rng.normal(0, 0.35, n)
    ogtt = 6.4 + 1.5 * u + rng.normal(0, 0.35, n)
    systolic = 115.0 + 6.0 * u + rng.normal(0, 8.0, n)
    diastolic = 75.0 + 4.0 * u + rng.normal(0, 6.0, n)

    risk = (
        6.0 * (ogtt - 7.8)
        + 0.4 * (fasting - 4.9)
        + 0.5 * family_history
        + 0.4 * pcos
        + 0.02 * (age - 29.5)
    )
    # Intercept solved so the expected positive rate hits the target.
    target = SCHEMAS["synthetic_gdm"].expected_positive_rate
    lo, hi = -30.0, 30.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        rate = float(np.mean(1.0 / (1.0 + np.exp(-(risk + mid)))))
        if rate < target:
            lo = mid
        else:
            hi = mid
    intercept = 0.5 * (lo + hi)
    prob = 1.0 / (1.0 + np.exp(-(risk + intercept)))
    labels = (rng.random(n) < prob).astype(np.intp)

    features = np.column_stack([
        age, bmi, gravidity.astype(float), parity.astype(float),
        family_history, pcos, fasting, ogtt, systolic, diastolic,
    ])
    sch = SCHEMAS["synthetic_gdm"]
    return PatientDataset(
        features=features,
        labels=labels,
        continuous_mask=np.array(sch.continuous, dtype=bool),
        feature_names=list(sch.columns),
        name="synthetic_gdm",
    )


def export_csv(data: PatientDataset, path, label_column: str = "gdm") -> None:
    """Write a dataset back out in the canonical CSV form."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(data.feature_names + [label_column])
        for row, lab in zip(data.features, data.labels):
            writer.writerow([f"{v:.10g}" for v in row] + [int(lab)])
