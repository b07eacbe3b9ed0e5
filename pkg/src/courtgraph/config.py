"""Architecture and latent-space configuration shared across the package."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from functools import cached_property
from itertools import product

import numpy as np

from .dynamics import SPEED_CAP, CourtSpec

MAX_JOINT_ASSIGNMENTS = 4096


@dataclass(frozen=True)
class LatentSpec:
    """Factorized discrete latent: n_vars variables with n_categories each."""

    n_vars: int = 2
    n_categories: int = 5

    def __post_init__(self):
        if self.n_vars < 1 or self.n_categories < 1:
            raise ValueError("latent dimensions must be positive")
        if self.joint_size > MAX_JOINT_ASSIGNMENTS:
            raise ValueError(
                f"joint assignment space {self.joint_size} exceeds the exact-enumeration "
                f"bound {MAX_JOINT_ASSIGNMENTS}"
            )

    @property
    def joint_size(self) -> int:
        return self.n_categories**self.n_vars

    @property
    def onehot_width(self) -> int:
        return self.n_vars * self.n_categories

    @cached_property
    def assignments(self) -> np.ndarray:
        """All joint assignments, lexicographic, shape (joint_size, n_vars)."""
        return np.array(list(product(range(self.n_categories), repeat=self.n_vars)), dtype=int)

    @cached_property
    def onehot_block(self) -> np.ndarray:
        """Concatenated per-variable one-hots, shape (joint_size, onehot_width)."""
        block = np.zeros((self.joint_size, self.onehot_width))
        for j, a in enumerate(self.assignments):
            for f_idx, cat in enumerate(a):
                block[j, f_idx * self.n_categories + cat] = 1.0
        return block

    def selection_matrix(self, var: int) -> np.ndarray:
        """(n_categories, joint_size) indicator mapping factor logits to joints."""
        sel = np.zeros((self.n_categories, self.joint_size))
        for j, a in enumerate(self.assignments):
            sel[a[var], j] = 1.0
        return sel

    def onehot_for(self, assignment) -> np.ndarray:
        out = np.zeros(self.onehot_width)
        for f_idx, cat in enumerate(assignment):
            if not 0 <= cat < self.n_categories:
                raise ValueError(f"latent assignment {tuple(assignment)} out of range")
            out[f_idx * self.n_categories + cat] = 1.0
        return out


EDGE_AGGREGATIONS = ("sum", "mean")
INFLUENCE_REDUCERS = ("bilstm", "sum", "max")


@dataclass(frozen=True)
class ModelConfig:
    """Everything that fixes the architecture and its parameter shapes."""

    node_types: tuple[str, ...]
    history_steps: int = 8
    horizon_steps: int = 15
    n_gmm: int = 16
    n_latent_vars: int = 2
    latent_categories: int = 5
    edge_radius: float = 2.0
    edge_aggregation: str = "sum"
    influence_reducer: str = "bilstm"
    ee_hidden: int = 8
    eie_hidden: int = 8
    nhe_hidden: int = 32
    fce_hidden: int = 32
    nfe_hidden: int = 32
    decoder_hidden: int = 128
    court: CourtSpec = field(default_factory=CourtSpec)
    speed_cap: float = SPEED_CAP
    log_scale_min: float = -5.0
    log_scale_max: float = 2.0
    feature_dim: int = 4  # [l, w, dl, dw]
    action_dim: int = 2

    def __post_init__(self):
        if not self.node_types:
            raise ValueError("at least one human node type is required")
        if len(set(self.node_types)) != len(self.node_types):
            raise ValueError("duplicate node types")
        object.__setattr__(self, "node_types", tuple(self.node_types))
        for name in ("history_steps", "horizon_steps", "n_gmm", "n_latent_vars",
                     "latent_categories", "ee_hidden", "eie_hidden", "nhe_hidden",
                     "fce_hidden", "nfe_hidden", "decoder_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.edge_radius <= 0:
            raise ValueError("edge_radius must be positive")
        if self.edge_aggregation not in EDGE_AGGREGATIONS:
            raise ValueError(f"edge_aggregation must be one of {EDGE_AGGREGATIONS}")
        if self.influence_reducer not in INFLUENCE_REDUCERS:
            raise ValueError(f"influence_reducer must be one of {INFLUENCE_REDUCERS}")
        self.latent  # validates the enumeration bound

    @cached_property
    def latent(self) -> LatentSpec:
        return LatentSpec(self.n_latent_vars, self.latent_categories)

    @property
    def eie_out(self) -> int:
        # bi-LSTM emits forward+backward hidden and memory vectors; the
        # elementwise reducers keep the raw edge-encoding width
        return 4 * self.eie_hidden if self.influence_reducer == "bilstm" else self.ee_hidden

    @property
    def fce_out(self) -> int:
        return 4 * self.fce_hidden

    @property
    def nfe_out(self) -> int:
        return 4 * self.nfe_hidden

    @property
    def ctx_dim(self) -> int:
        return self.eie_out + self.nhe_hidden + self.fce_out

    @property
    def z_dim(self) -> int:
        return self.latent.onehot_width

    @property
    def head_dim(self) -> int:
        # per mixture component: a weight, a 2-d mean, a 2-d log-scale
        return 5 * self.n_gmm

    def to_jsonable(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "court":
                out[f.name] = {"length_m": v.length_m, "width_m": v.width_m}
            elif isinstance(v, tuple):
                out[f.name] = list(v)
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_jsonable(cls, doc: dict) -> "ModelConfig":
        kwargs = dict(doc)
        if "court" in kwargs:
            kwargs["court"] = CourtSpec(**kwargs["court"])
        if "node_types" in kwargs:
            kwargs["node_types"] = tuple(kwargs["node_types"])
        known = {f.name for f in fields(cls)}
        unknown = set(kwargs) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**kwargs)
