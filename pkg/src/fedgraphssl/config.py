"""Run configuration: every hyperparameter with its default, a flat
key=value config-file parser, and echo output for exact reproducibility.

Config files are INI-style: section headers in brackets organize the file
but key names alone identify fields, and command-line flags win over file
values. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .losses import LossWeights
from .model import EncoderConfig
from .pseudolabel import ThresholdSchedule

DEFAULT_SEEDS = (42, 137, 255, 512, 1024)

DATASET_SILOS = {"pima": 2, "early_stage": 2, "synthetic_gdm": 3}


@dataclass
class RunConfig:
    # data
    dataset: str = "pima"               # pima | early_stage | synthetic_gdm
    data_dir: str = "data"
    n_silos: int = 2
    dirichlet_alpha: float = 0.5
    # draw-acceptance constraints: every silo must receive at least this
    # share of each class's rows (statistical identifiability); an optional
    # skew band (lo < hi active) additionally forces the largest silo-rate
    # deviation from the global rate into a moderate range
    dirichlet_min_rate: float = 0.1
    dirichlet_skew_lo: float = 0.0
    dirichlet_skew_hi: float = 0.0
    scarcity: float = 0.8
    n_folds: int = 5
    seeds: tuple[int, ...] = DEFAULT_SEEDS

    # graph
    knn_k: int = 10
    agr_k: int = 15
    agr_period: int = 5
    static_weights: str = "gaussian"    # gaussian | unit

    # encoder
    hidden_dim: int = 64
    attn_hidden: int = 64
    dropout: float = 0.4
    fusion_mode: str = "learned"        # learned | gcn_only | sage_only
    use_attention: bool = True

    # optimization
    learning_rate: float = 0.005
    rounds: int = 10
    local_epochs: int = 3
    reset_optimizer_each_round: bool = False

    # loss weights
    eta_pl: float = 0.8
    mu_smooth: float = 0.05
    beta_contrastive: float = 0.1
    gamma_aug: float = 0.3
    mu_prox: float = 0.01
    focal_alpha: float = 0.75
    focal_gamma: float = 2.0
    focal_mode: str = "class_conditional"   # class_conditional | uniform
    contrastive_temp: float = 0.5
    sigma_noise: float = 0.05
    pl_reduction: str = "sum"

    # pseudo-labeling and prototypes
    tau0: float = 0.90
    tau_decay: float = 0.03
    tau_min: float = 0.70
    proto_blend: float = 0.5
    use_prototype_gate: bool = True
    use_neighborhood_gate: bool = True
    share_prototypes: bool = True
    use_agr: bool = True

    # protocol
    federated: bool = True
    use_pseudo_labels: bool = True

    # calibrated head
    head_c: float = 0.5

    # run control
    method: str = "fedtgnn"
    out_dir: str = "results"
    jobs: int = 1
    dump_messages: str = ""

    def validate(self) -> None:
        if self.rounds < 1 or self.local_epochs < 1 or self.agr_period < 1:
            raise ConfigError("rounds, local_epochs and agr_period must be >= 1")
        if not 0.0 <= self.scarcity < 1.0:
            raise ConfigError(f"scarcity {self.scarcity} outside [0, 1)")
        if self.static_weights not in ("gaussian", "unit"):
            raise ConfigError(f"unknown static_weights {self.static_weights!r}")
        if self.pl_reduction not in ("sum", "mean"):
            raise ConfigError(f"unknown pl_reduction {self.pl_reduction!r}")
        if self.fusion_mode not in ("learned", "gcn_only", "sage_only"):
            raise ConfigError(f"unknown fusion_mode {self.fusion_mode!r}")

    # -- derived views ------------------------------------------------------

    def encoder_config(self, in_dim: int) -> EncoderConfig:
        return EncoderConfig(
            in_dim=in_dim,
            hidden_dim=self.hidden_dim,
            attn_hidden=self.attn_hidden,
            dropout=self.dropout,
            fusion_mode=self.fusion_mode,
            use_attention=self.use_attention,
            static_weights=self.static_weights,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            eta=self.eta_pl,
            mu_smooth=self.mu_smooth,
            beta=self.beta_contrastive,
            gamma_aug=self.gamma_aug,
            mu_prox=self.mu_prox,
            focal_alpha=self.focal_alpha,
            focal_gamma=self.focal_gamma,
            focal_mode=self.focal_mode,
            contrastive_temp=self.contrastive_temp,
            sigma_noise=self.sigma_noise,
            pl_reduction=self.pl_reduction,
        )

    def schedule(self) -> ThresholdSchedule:
        return ThresholdSchedule(self.tau0, self.tau_decay, self.tau_min)

    def echo(self) -> dict:
        """Every field, defaults included, for the reproducibility record."""
        out = dataclasses.asdict(self)
        out["seeds"] = list(self.seeds)
        return out

    def echo_kwargs(self) -> dict:
        """Constructor-ready field dict (used to ship configs to workers)."""
        out = dataclasses.asdict(self)
        out["seeds"] = tuple(self.seeds)
        return out

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


_FIELD_TYPES = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    f = _FIELD_TYPES[name]
    raw = raw.strip()
    if f.type in ("bool", bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if f.type in ("int", int):
        return int(raw)
    if f.type in ("float", float):
        return float(raw)
    if name == "seeds":
        return tuple(int(tok) for tok in raw.replace(",", " ").split())
    return raw


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse a key=value config file (sections allowed) and apply overrides."""
    values: dict = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith(("#", ";")):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            continue  # sections are organizational only
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    cfg = RunConfig(**values)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    clean = {}
    for key, val in overrides.items():
        if val is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        clean[key] = _coerce(key, str(val)) if isinstance(val, str) else val
    out = cfg.replace(**clean)
    out.validate()
    return out
