"""Typed recurrent encoders, the shared-weight registry, and the GMM decoder.

The scene model instantiates one architecture per predicted node, but every
parameter is fetched from a registry keyed only by node/edge *type* and
architectural role, so two positions with the same key alias the exact same
tensors. Forward passes batch all nodes that share a key along the row axis:
a row is one (node) or one (node, latent assignment) instance.

Registry key layout (one entry per parameter tensor):

    EE/<edge-type>/<gate>         edge encoder LSTM over summed neighbor features
    EIE/<node-type>/{fwd,bwd}/..  bi-LSTM merging per-edge-type encodings
    NHE/<node-type>/..            node history LSTM
    FCE/global/{fwd,bwd}/..       bi-LSTM over the candidate agent future
    NFE/<node-type>/{fwd,bwd}/..  bi-LSTM over the node's true future (training)
    Decoder/<node-type>/init|cell|head
    Prior/<node-type>/z<i>        per-latent-variable logit heads
    Posterior/<node-type>/z<i>
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .data import TrainingExample
from .dynamics import clamp_speed_rows
from .graph import AGENT_TYPE_NAME, EdgeType, SceneGraph, agent_adjacent, neighbors_by_edge_type

LOG_2PI = math.log(2.0 * math.pi)
GATES = ("i", "f", "o", "c")


# ---------------------------------------------------------------------------
# weight registry


class WeightRegistry:
    """Lazily-created parameter store with deterministic per-key initialization.

    Each parameter's initial values are drawn from a generator seeded by
    (master seed, hash(key)), so values never depend on creation order, and
    two runs materialize bitwise-identical weights.
    """

    def __init__(self, seed: int):
        self.seed = seed
        self._params: dict[str, Tensor] = {}
        self._access_log: list[str] | None = None

    def parameter(self, key: str, shape: tuple[int, ...], init: str) -> Tensor:
        if self._access_log is not None:
            self._access_log.append(key)
        found = self._params.get(key)
        if found is not None:
            if found.values.shape != tuple(shape):
                raise ad.ShapeError(
                    f"registry key {key!r} holds shape {found.values.shape}, wanted {shape}"
                )
            return found
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, ad.stable_key_seed(key))))
        if init == "zeros":
            values = np.zeros(shape)
        elif init == "ones":
            values = np.ones(shape)
        elif init == "glorot":
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            values = rng.uniform(-limit, limit, size=shape)
        elif init == "orthogonal":
            q, r = np.linalg.qr(rng.standard_normal(shape))
            values = q * np.sign(np.diag(r))
        else:
            raise ValueError(f"unknown init {init!r}")
        p = ad.parameter(values, name=key)
        self._params[key] = p
        return p

    def lstm_cell(self, prefix: str, in_size: int, hidden: int) -> "LSTMCellWeights":
        kw = {}
        for g in GATES:
            kw[f"w_{g}"] = self.parameter(f"{prefix}/W_{g}", (in_size, hidden), "glorot")
            kw[f"u_{g}"] = self.parameter(f"{prefix}/U_{g}", (hidden, hidden), "orthogonal")
            # forget-gate bias starts at one so early memory is retained
            kw[f"b_{g}"] = self.parameter(f"{prefix}/b_{g}", (hidden,), "ones" if g == "f" else "zeros")
        return LSTMCellWeights(in_size=in_size, hidden=hidden, **kw)

    def linear(self, prefix: str, in_size: int, out_size: int) -> tuple[Tensor, Tensor]:
        w = self.parameter(f"{prefix}/W", (in_size, out_size), "glorot")
        b = self.parameter(f"{prefix}/b", (out_size,), "zeros")
        return w, b

    @property
    def params(self) -> dict[str, Tensor]:
        return self._params

    def keys(self) -> list[str]:
        return sorted(self._params)

    def param_count(self) -> int:
        return sum(p.size for p in self._params.values())

    @contextmanager
    def track_access(self):
        """Record every key fetched inside the block (for contract tests)."""
        prev = self._access_log
        self._access_log = [] if prev is None else prev
        try:
            yield self._access_log
        finally:
            self._access_log = prev

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.values.copy() for k, p in sorted(self._params.items())}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for key, values in state.items():
            arr = np.asarray(values, dtype=np.float64)
            found = self._params.get(key)
            if found is None:
                self._params[key] = ad.parameter(arr.copy(), name=key)
            else:
                if found.values.shape != arr.shape:
                    raise ad.ShapeError(
                        f"checkpoint key {key!r} shape {arr.shape} mismatches {found.values.shape}"
                    )
                found.values = arr.copy()
                found.zero_grad()


@dataclass
class LSTMCellWeights:
    """W (input), U (recurrent), b (bias) for each of the four gates."""

    in_size: int
    hidden: int
    w_i: Tensor
    u_i: Tensor
    b_i: Tensor
    w_f: Tensor
    u_f: Tensor
    b_f: Tensor
    w_o: Tensor
    u_o: Tensor
    b_o: Tensor
    w_c: Tensor
    u_c: Tensor
    b_c: Tensor


def lstm_step(cell: LSTMCellWeights, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
    """One gated recurrence step over a (rows, in_size) input batch."""

    def gate(w, u, b, squash):
        return squash(ad.add_bias(ad.add(ad.matmul(x, w), ad.matmul(h, u)), b))

    i = gate(cell.w_i, cell.u_i, cell.b_i, ad.sigmoid)
    f = gate(cell.w_f, cell.u_f, cell.b_f, ad.sigmoid)
    o = gate(cell.w_o, cell.u_o, cell.b_o, ad.sigmoid)
    c_tilde = gate(cell.w_c, cell.u_c, cell.b_c, ad.tanh)
    c_t = ad.add(ad.mul(f, c), ad.mul(i, c_tilde))
    h_t = ad.mul(o, ad.tanh(c_t))
    return h_t, c_t


def run_lstm(cell: LSTMCellWeights, steps: list[Tensor]) -> tuple[Tensor, Tensor]:
    """Run from a zero state over (rows, in) step matrices; final (h, c)."""
    if not steps:
        raise ad.ContractError("run_lstm needs at least one step")
    rows = steps[0].shape[0]
    h = ad.constant(np.zeros((rows, cell.hidden)))
    c = ad.constant(np.zeros((rows, cell.hidden)))
    for x in steps:
        h, c = lstm_step(cell, x, h, c)
    return h, c


def bilstm_summary(fwd: LSTMCellWeights, bwd: LSTMCellWeights, steps: list[Tensor]) -> Tensor:
    """Concatenated final forward and backward hidden and memory vectors."""
    hf, cf = run_lstm(fwd, steps)
    hb, cb = run_lstm(bwd, steps[::-1])
    return ad.concat([hf, cf, hb, cb], axis=1)


# ---------------------------------------------------------------------------
# feature scaling


@dataclass(frozen=True)
class FeatureScaler:
    """Fixed affine map taking raw court features into roughly [-1, 1]."""

    length_m: float
    width_m: float
    speed_cap: float

    @classmethod
    def for_config(cls, cfg: ModelConfig) -> "FeatureScaler":
        return cls(cfg.court.length_m, cfg.court.width_m, cfg.speed_cap)

    def scale_features(self, feats: np.ndarray) -> np.ndarray:
        """(n, 4) rows of [l, w, dl, dw] -> normalized copies."""
        out = np.array(feats, dtype=np.float64)
        out[..., 0] = 2.0 * out[..., 0] / self.length_m - 1.0
        out[..., 1] = 2.0 * out[..., 1] / self.width_m - 1.0
        out[..., 2:4] /= self.speed_cap
        return out

    def scale_actions(self, acts: np.ndarray) -> np.ndarray:
        return np.asarray(acts, dtype=np.float64) / self.speed_cap


# ---------------------------------------------------------------------------
# registry materialization


def edge_type_names(cfg: ModelConfig) -> list[str]:
    """All edge-type keys possible over the configured human types plus agent."""
    names = list(cfg.node_types) + [AGENT_TYPE_NAME]
    keys = set()
    for a_idx, a in enumerate(names):
        for b in names[a_idx:]:
            if a == AGENT_TYPE_NAME and b == AGENT_TYPE_NAME:
                continue  # only one conditioning agent exists
            keys.add(EdgeType(a, b).key)
    return sorted(keys)


def build_registry(cfg: ModelConfig, seed: int) -> WeightRegistry:
    """Materialize every parameter the declared type set can ever need.

    Doing this up front makes the parameter count a function of the type set
    alone, independent of how many nodes any particular scene contains.
    """
    reg = WeightRegistry(seed)
    for et in edge_type_names(cfg):
        reg.lstm_cell(f"EE/{et}", cfg.feature_dim, cfg.ee_hidden)
    reg.lstm_cell("FCE/global/fwd", cfg.feature_dim, cfg.fce_hidden)
    reg.lstm_cell("FCE/global/bwd", cfg.feature_dim, cfg.fce_hidden)
    for nt in cfg.node_types:
        if cfg.influence_reducer == "bilstm":
            reg.lstm_cell(f"EIE/{nt}/fwd", cfg.ee_hidden, cfg.eie_hidden)
            reg.lstm_cell(f"EIE/{nt}/bwd", cfg.ee_hidden, cfg.eie_hidden)
        reg.lstm_cell(f"NHE/{nt}", cfg.feature_dim, cfg.nhe_hidden)
        reg.lstm_cell(f"NFE/{nt}/fwd", cfg.action_dim, cfg.nfe_hidden)
        reg.lstm_cell(f"NFE/{nt}/bwd", cfg.action_dim, cfg.nfe_hidden)
        reg.linear(f"Decoder/{nt}/init", cfg.ctx_dim + cfg.z_dim, 2 * cfg.decoder_hidden)
        reg.lstm_cell(f"Decoder/{nt}/cell", cfg.action_dim, cfg.decoder_hidden)
        reg.linear(f"Decoder/{nt}/head", cfg.decoder_hidden, cfg.head_dim)
        for v in range(cfg.n_latent_vars):
            reg.linear(f"Prior/{nt}/z{v}", cfg.ctx_dim, cfg.latent_categories)
            reg.linear(f"Posterior/{nt}/z{v}", cfg.ctx_dim + cfg.nfe_out, cfg.latent_categories)
    return reg


# ---------------------------------------------------------------------------
# single-node encoder operations


def sum_neighbor_histories(
    histories: list[np.ndarray], aggregation: str = "sum"
) -> np.ndarray:
    """Combine same-length neighbor feature sequences stepwise; (H, 4) result."""
    lengths = {h.shape[0] for h in histories}
    if len(lengths) != 1:
        raise ad.ShapeError(f"neighbor history lengths differ: {sorted(lengths)}")
    total = np.sum(histories, axis=0)
    if aggregation == "mean":
        total = total / len(histories)
    return total


def encode_edges(
    registry: WeightRegistry,
    cfg: ModelConfig,
    node_type_name: str,
    buckets: dict[EdgeType, list[np.ndarray]],
    scaler: FeatureScaler | None = None,
) -> dict[EdgeType, Tensor]:
    """Per edge type: run that type's encoder over combined neighbor features.

    `buckets` maps each edge type to the raw (H, 4) histories of the neighbors
    in that bucket. Types with no neighbors are simply absent from the result.
    """
    scaler = scaler or FeatureScaler.for_config(cfg)
    out = {}
    for et in sorted(buckets):
        histories = buckets[et]
        if not histories:
            continue
        combined = sum_neighbor_histories(
            [scaler.scale_features(h) for h in histories], cfg.edge_aggregation
        )
        cell = registry.lstm_cell(f"EE/{et.key}", cfg.feature_dim, cfg.ee_hidden)
        steps = [ad.constant(combined[k : k + 1]) for k in range(combined.shape[0])]
        h, _ = run_lstm(cell, steps)
        out[et] = h
    return out


def encode_edge_influence(
    registry: WeightRegistry,
    cfg: ModelConfig,
    node_type_name: str,
    edge_encodings: dict[EdgeType, Tensor],
) -> Tensor:
    """Merge per-edge-type encodings into one fixed-width influence vector.

    Encodings are consumed in canonical edge-type order. With no edges the
    result is a zero vector of the same width.
    """
    ordered = [edge_encodings[et] for et in sorted(edge_encodings)]
    if not ordered:
        return ad.constant(np.zeros((1, cfg.eie_out)))
    if cfg.influence_reducer == "bilstm":
        fwd = registry.lstm_cell(f"EIE/{node_type_name}/fwd", cfg.ee_hidden, cfg.eie_hidden)
        bwd = registry.lstm_cell(f"EIE/{node_type_name}/bwd", cfg.ee_hidden, cfg.eie_hidden)
        return bilstm_summary(fwd, bwd, ordered)
    acc = ordered[0]
    for enc in ordered[1:]:
        acc = ad.add(acc, enc) if cfg.influence_reducer == "sum" else ad.maximum(acc, enc)
    return acc


def encode_history(
    registry: WeightRegistry,
    cfg: ModelConfig,
    node_type_name: str,
    history: np.ndarray,
    scaler: FeatureScaler | None = None,
) -> Tensor:
    """Final hidden state of the node type's history LSTM over (H, 4) features."""
    if history.shape[0] < 1:
        raise ad.ShapeError("history must contain at least one step")
    scaler = scaler or FeatureScaler.for_config(cfg)
    scaled = scaler.scale_features(history)
    cell = registry.lstm_cell(f"NHE/{node_type_name}", cfg.feature_dim, cfg.nhe_hidden)
    h, _ = run_lstm(cell, [ad.constant(scaled[k : k + 1]) for k in range(scaled.shape[0])])
    return h


def encode_future_conditional(
    registry: WeightRegistry,
    cfg: ModelConfig,
    agent_future: np.ndarray | None,
    adjacent: bool,
    scaler: FeatureScaler | None = None,
) -> Tensor:
    """Bi-LSTM summary of the candidate agent future, or zeros when detached.

    Nodes without an edge to the agent receive an all-zero encoding no matter
    what the candidate future contains.
    """
    if not adjacent:
        return ad.constant(np.zeros((1, cfg.fce_out)))
    if agent_future is None or agent_future.shape[0] < 1:
        raise ad.ContractError("adjacent nodes need a non-empty candidate agent future")
    scaler = scaler or FeatureScaler.for_config(cfg)
    scaled = scaler.scale_features(agent_future)
    fwd = registry.lstm_cell("FCE/global/fwd", cfg.feature_dim, cfg.fce_hidden)
    bwd = registry.lstm_cell("FCE/global/bwd", cfg.feature_dim, cfg.fce_hidden)
    return bilstm_summary(fwd, bwd, [ad.constant(scaled[k : k + 1]) for k in range(scaled.shape[0])])


def encode_node_future(
    registry: WeightRegistry,
    cfg: ModelConfig,
    node_type_name: str,
    future_actions: np.ndarray,
    training: bool,
    scaler: FeatureScaler | None = None,
) -> Tensor:
    """Bi-LSTM summary of the node's true future actions; training only."""
    if not training:
        raise ad.ContractError("the node-future encoder is only available during training")
    if future_actions.shape[0] < 1:
        raise ad.ShapeError("future must contain at least one step")
    scaler = scaler or FeatureScaler.for_config(cfg)
    scaled = scaler.scale_actions(future_actions)
    fwd = registry.lstm_cell(f"NFE/{node_type_name}/fwd", cfg.action_dim, cfg.nfe_hidden)
    bwd = registry.lstm_cell(f"NFE/{node_type_name}/bwd", cfg.action_dim, cfg.nfe_hidden)
    return bilstm_summary(fwd, bwd, [ad.constant(scaled[k : k + 1]) for k in range(scaled.shape[0])])


@dataclass
class EncodingBundle:
    """Fixed-width conditioning vectors for one node (rows are instances)."""

    edge_influence: Tensor
    history: Tensor
    future_conditional: Tensor
    node_future: Tensor | None = None

    def context(self) -> Tensor:
        return ad.concat([self.edge_influence, self.history, self.future_conditional], axis=1)


# ---------------------------------------------------------------------------
# batched scene encoding


@dataclass
class SceneEncoding:
    """Batched per-node conditioning for one prediction problem."""

    node_ids: list[str]
    type_names: list[str]
    type_groups: dict[str, list[int]]  # type name -> indices into node_ids
    ctx: Tensor  # (n, ctx_dim)
    nfe: Tensor | None  # (n, nfe_out) when training


def _assemble_rows(pieces: list[tuple[list[int], Tensor]], n: int, width: int) -> Tensor:
    """Reorder grouped row blocks into node order via a gather."""
    if not pieces:
        return ad.constant(np.zeros((n, width)))
    stacked = ad.concat([t for _, t in pieces], axis=0) if len(pieces) > 1 else pieces[0][1]
    position = np.empty(n, dtype=int)
    row = 0
    for idxs, t in pieces:
        for i in idxs:
            position[i] = row
            row += 1
    return ad.gather_rows(stacked, position)


def encode_scene(
    registry: WeightRegistry,
    cfg: ModelConfig,
    example: TrainingExample,
    training: bool,
    agent_future: np.ndarray | None = None,
) -> SceneEncoding:
    """Run all encoders for every predicted node, batching rows per weight key.

    `agent_future` overrides the example's recorded candidate agent future
    (same (S, 4) layout) without touching anything else.
    """
    scaler = FeatureScaler.for_config(cfg)
    g = example.graph
    ids = example.node_ids
    n = len(ids)
    index_of = {nid: k for k, nid in enumerate(ids)}
    type_names = [example.types[nid].name for nid in ids]
    type_groups: dict[str, list[int]] = {}
    for k, tn in enumerate(type_names):
        type_groups.setdefault(tn, []).append(k)

    scaled_hist = {nid: scaler.scale_features(h) for nid, h in example.history.items()}
    hist_len = {h.shape[0] for h in scaled_hist.values()}
    if len(hist_len) != 1:
        raise ad.ShapeError(f"history lengths differ across nodes: {sorted(hist_len)}")
    h_steps = hist_len.pop()

    # --- edge encoders, grouped by edge type
    buckets = {nid: neighbors_by_edge_type(g, nid) for nid in ids}
    seq_keys = {nid: sorted(buckets[nid]) for nid in ids}
    ee_groups: dict[str, list[str]] = {}
    for nid in ids:
        for et in seq_keys[nid]:
            ee_groups.setdefault(et.key, []).append(nid)
    ee_pieces = []
    ee_row: dict[tuple[str, str], int] = {}
    row = 0
    for et_key in sorted(ee_groups):
        members = ee_groups[et_key]
        per_step = []
        for k in range(h_steps):
            rows_k = []
            for nid in members:
                et = next(e for e in seq_keys[nid] if e.key == et_key)
                neigh = buckets[nid][et]
                combined = np.sum([scaled_hist[j][k] for j in neigh], axis=0)
                if cfg.edge_aggregation == "mean":
                    combined = combined / len(neigh)
                rows_k.append(combined)
            per_step.append(ad.constant(np.stack(rows_k)))
        cell = registry.lstm_cell(f"EE/{et_key}", cfg.feature_dim, cfg.ee_hidden)
        h, _ = run_lstm(cell, per_step)
        ee_pieces.append(h)
        for nid in members:
            ee_row[(nid, et_key)] = row
            row += 1
    ee_all = ad.concat(ee_pieces, axis=0) if ee_pieces else None

    # --- edge influence, grouped by (node type, number of edge types)
    eie_groups: dict[tuple[str, int], list[int]] = {}
    for k, nid in enumerate(ids):
        eie_groups.setdefault((type_names[k], len(seq_keys[nid])), []).append(k)
    eie_pieces = []
    for (tn, depth), members in sorted(eie_groups.items()):
        if depth == 0:
            eie_pieces.append((members, ad.constant(np.zeros((len(members), cfg.eie_out)))))
            continue
        steps = []
        for j in range(depth):
            rows_j = [ee_row[(ids[k], seq_keys[ids[k]][j].key)] for k in members]
            steps.append(ad.gather_rows(ee_all, rows_j))
        if cfg.influence_reducer == "bilstm":
            fwd = registry.lstm_cell(f"EIE/{tn}/fwd", cfg.ee_hidden, cfg.eie_hidden)
            bwd = registry.lstm_cell(f"EIE/{tn}/bwd", cfg.ee_hidden, cfg.eie_hidden)
            enc = bilstm_summary(fwd, bwd, steps)
        else:
            enc = steps[0]
            for s in steps[1:]:
                enc = ad.add(enc, s) if cfg.influence_reducer == "sum" else ad.maximum(enc, s)
        eie_pieces.append((members, enc))
    eie_rows = _assemble_rows(eie_pieces, n, cfg.eie_out)

    # --- node history, grouped by node type
    nhe_pieces = []
    for tn, members in sorted(type_groups.items()):
        steps = [
            ad.constant(np.stack([scaled_hist[ids[k]][s] for k in members]))
            for s in range(h_steps)
        ]
        cell = registry.lstm_cell(f"NHE/{tn}", cfg.feature_dim, cfg.nhe_hidden)
        h, _ = run_lstm(cell, steps)
        nhe_pieces.append((members, h))
    nhe_rows = _assemble_rows(nhe_pieces, n, cfg.nhe_hidden)

    # --- candidate agent future, shared globally, zeroed off-agent
    future = example.agent_future if agent_future is None else agent_future
    adjacent = [agent_adjacent(g, nid, example.agent_id) for nid in ids]
    adj_idx = [k for k, a in enumerate(adjacent) if a]
    far_idx = [k for k, a in enumerate(adjacent) if not a]
    fce_pieces = []
    if adj_idx:
        vec = encode_future_conditional(registry, cfg, np.asarray(future), True, scaler)
        fce_pieces.append((adj_idx, ad.repeat_rows(vec, len(adj_idx))))
    if far_idx:
        fce_pieces.append((far_idx, ad.constant(np.zeros((len(far_idx), cfg.fce_out)))))
    fce_rows = _assemble_rows(fce_pieces, n, cfg.fce_out)

    ctx = ad.concat([eie_rows, nhe_rows, fce_rows], axis=1)

    nfe_rows = None
    if training:
        nfe_pieces = []
        for tn, members in sorted(type_groups.items()):
            scaled_future = [scaler.scale_actions(example.future_actions[ids[k]]) for k in members]
            s_steps = scaled_future[0].shape[0]
            steps = [
                ad.constant(np.stack([f[s] for f in scaled_future])) for s in range(s_steps)
            ]
            fwd = registry.lstm_cell(f"NFE/{tn}/fwd", cfg.action_dim, cfg.nfe_hidden)
            bwd = registry.lstm_cell(f"NFE/{tn}/bwd", cfg.action_dim, cfg.nfe_hidden)
            nfe_pieces.append((members, bilstm_summary(fwd, bwd, steps)))
        nfe_rows = _assemble_rows(nfe_pieces, n, cfg.nfe_out)

    return SceneEncoding(
        node_ids=list(ids),
        type_names=type_names,
        type_groups=type_groups,
        ctx=ctx,
        nfe=nfe_rows,
    )


# ---------------------------------------------------------------------------
# latent heads


def prior_logits(
    registry: WeightRegistry, cfg: ModelConfig, node_type_name: str, ctx_rows: Tensor
) -> list[Tensor]:
    """Per latent variable, (rows, n_categories) logits from the context."""
    out = []
    for v in range(cfg.n_latent_vars):
        w, b = registry.linear(f"Prior/{node_type_name}/z{v}", cfg.ctx_dim, cfg.latent_categories)
        out.append(ad.add_bias(ad.matmul(ctx_rows, w), b))
    return out


def posterior_logits(
    registry: WeightRegistry,
    cfg: ModelConfig,
    node_type_name: str,
    ctx_rows: Tensor,
    nfe_rows: Tensor | None,
) -> list[Tensor]:
    """Same head structure as the prior, but also fed the true-future encoding."""
    if nfe_rows is None:
        raise ad.ContractError("posterior needs the node-future encoding")
    joint = ad.concat([ctx_rows, nfe_rows], axis=1)
    out = []
    for v in range(cfg.n_latent_vars):
        w, b = registry.linear(
            f"Posterior/{node_type_name}/z{v}", cfg.ctx_dim + cfg.nfe_out, cfg.latent_categories
        )
        out.append(ad.add_bias(ad.matmul(joint, w), b))
    return out


# ---------------------------------------------------------------------------
# GMM output distribution


@dataclass
class GMMParams:
    """One timestep's mixture over 2-d actions (diagonal components)."""

    log_weights: np.ndarray  # (K,) normalized
    means: np.ndarray  # (K, 2) m/s
    log_scales: np.ndarray  # (K, 2)

    def __post_init__(self):
        k = self.log_weights.shape[0]
        if self.means.shape != (k, 2) or self.log_scales.shape != (k, 2):
            raise ad.ShapeError("inconsistent mixture shapes")
        total = np.exp(self.log_weights).sum()
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mixture weights sum to {total}, expected 1")

    def log_density(self, u) -> float:
        """Log pdf at a 2-d action: logsumexp over diagonal Gaussian components."""
        u = np.asarray(u, dtype=np.float64)
        inv = np.exp(-self.log_scales)
        z = (u[None, :] - self.means) * inv
        comp = -0.5 * np.sum(z * z, axis=1) - np.sum(self.log_scales, axis=1) - LOG_2PI
        total = self.log_weights + comp
        m = total.max()
        return float(m + np.log(np.exp(total - m).sum()))


def gmm_log_density(params: GMMParams, u) -> float:
    return params.log_density(u)


def gmm_sample(params: GMMParams, rng: np.random.Generator, speed_cap: float) -> np.ndarray:
    """Draw one action: pick a component by weight, then its diagonal Gaussian."""
    probs = np.exp(params.log_weights)
    k = int(np.searchsorted(np.cumsum(probs), rng.random()))
    k = min(k, probs.shape[0] - 1)
    eps = rng.standard_normal(2)
    u = params.means[k] + np.exp(params.log_scales[k]) * eps
    return clamp_speed_rows(u[None, :], speed_cap)[0]


def _pair_sum_matrix(n_gmm: int) -> np.ndarray:
    """(2K, K) indicator summing interleaved x/y columns per component."""
    p = np.zeros((2 * n_gmm, n_gmm))
    for k in range(n_gmm):
        p[2 * k, k] = 1.0
        p[2 * k + 1, k] = 1.0
    return p


def _head_parts(cfg: ModelConfig, head: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    k = cfg.n_gmm
    logw = ad.log_softmax(ad.narrow(head, 1, 0, k), axis=1)
    mu = ad.narrow(head, 1, k, 2 * k)
    logsig = ad.clip(ad.narrow(head, 1, 3 * k, 2 * k), cfg.log_scale_min, cfg.log_scale_max)
    return logw, mu, logsig


def _gmm_rows_log_density(
    cfg: ModelConfig, logw: Tensor, mu: Tensor, logsig: Tensor, u_tiled: np.ndarray
) -> Tensor:
    """(rows, 1) log density of per-row targets under per-row mixtures."""
    d = ad.sub(ad.constant(u_tiled), mu)
    z = ad.mul(d, ad.exp(ad.neg(logsig)))
    sq = ad.mul(z, z)
    pairs = ad.constant(_pair_sum_matrix(cfg.n_gmm))
    quad = ad.matmul(sq, pairs)
    logdet = ad.matmul(logsig, pairs)
    comp = ad.add(
        ad.add(ad.mul(quad, ad.constant(-0.5)), ad.neg(logdet)), ad.constant(-LOG_2PI)
    )
    return ad.logsumexp(ad.add(logw, comp), axis=1, keepdims=True)


def _params_from_head_row(cfg: ModelConfig, head_row: np.ndarray) -> GMMParams:
    k = cfg.n_gmm
    logits = head_row[:k]
    logw = logits - logits.max()
    logw = logw - np.log(np.exp(logw).sum())
    return GMMParams(
        log_weights=logw,
        means=head_row[k : 3 * k].reshape(k, 2).copy(),
        log_scales=np.clip(
            head_row[3 * k : 5 * k].reshape(k, 2), cfg.log_scale_min, cfg.log_scale_max
        ),
    )


# ---------------------------------------------------------------------------
# decoder


def _decoder_init(
    registry: WeightRegistry,
    cfg: ModelConfig,
    node_type_name: str,
    ctx_rows: Tensor,
    z_block: np.ndarray,
) -> tuple[Tensor, Tensor, LSTMCellWeights, Tensor, Tensor]:
    """Project [context || one-hot z] to the decoder's initial (h, c)."""
    w0, b0 = registry.linear(
        f"Decoder/{node_type_name}/init", cfg.ctx_dim + cfg.z_dim, 2 * cfg.decoder_hidden
    )
    init_in = ad.concat([ctx_rows, ad.constant(z_block)], axis=1)
    hc = ad.add_bias(ad.matmul(init_in, w0), b0)
    h = ad.narrow(hc, 1, 0, cfg.decoder_hidden)
    c = ad.narrow(hc, 1, cfg.decoder_hidden, cfg.decoder_hidden)
    cell = registry.lstm_cell(f"Decoder/{node_type_name}/cell", cfg.action_dim, cfg.decoder_hidden)
    w_head, b_head = registry.linear(f"Decoder/{node_type_name}/head", cfg.decoder_hidden, cfg.head_dim)
    return h, c, cell, w_head, b_head


def decode_loglik(
    registry: WeightRegistry,
    cfg: ModelConfig,
    node_type_name: str,
    ctx_rows: Tensor,
    future_actions: np.ndarray,
    last_actions: np.ndarray,
) -> Tensor:
    """Teacher-forced per-assignment log-likelihood, shape (n, joint_size).

    Rows enumerate every (node, latent assignment) pair; step k's input is the
    previous ground-truth action and its target the current one.
    """
    latent = cfg.latent
    n = ctx_rows.shape[0]
    z = latent.joint_size
    s = future_actions.shape[1]
    scaler = FeatureScaler.for_config(cfg)
    z_block = np.tile(latent.onehot_block, (n, 1))
    h, c, cell, w_head, b_head = _decoder_init(
        registry, cfg, node_type_name, ad.repeat_rows(ctx_rows, z), z_block
    )
    inputs = np.concatenate(
        [scaler.scale_actions(last_actions)[:, None, :], scaler.scale_actions(future_actions[:, :-1])],
        axis=1,
    )  # (n, S, 2): last observed action first, then teacher forcing
    total = None
    for k in range(s):
        x = ad.constant(np.repeat(inputs[:, k, :], z, axis=0))
        h, c = lstm_step(cell, x, h, c)
        head = ad.add_bias(ad.matmul(h, w_head), b_head)
        logw, mu, logsig = _head_parts(cfg, head)
        u_tiled = np.tile(np.repeat(future_actions[:, k, :], z, axis=0), (1, cfg.n_gmm))
        ll_k = _gmm_rows_log_density(cfg, logw, mu, logsig, u_tiled)
        total = ll_k if total is None else ad.add(total, ll_k)
    return ad.reshape(total, (n, z))


def decode_gmm(
    registry: WeightRegistry,
    cfg: ModelConfig,
    node_type_name: str,
    bundle: EncodingBundle,
    z_assignment,
    last_action: np.ndarray,
    horizon: int | None = None,
    future_actions: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[list[GMMParams], np.ndarray]:
    """Roll the decoder for one node and one latent assignment.

    With `future_actions` the decoder is teacher-forced; otherwise it feeds
    back its own speed-capped samples drawn with `rng`. Returns the per-step
    mixtures and the (S, 2) actions that were fed forward after step one.
    """
    s = horizon if horizon is not None else cfg.horizon_steps
    scaler = FeatureScaler.for_config(cfg)
    z_block = cfg.latent.onehot_for(z_assignment)[None, :]
    h, c, cell, w_head, b_head = _decoder_init(
        registry, cfg, node_type_name, bundle.context(), z_block
    )
    if future_actions is None and rng is None:
        raise ad.ContractError("sampling rollout needs an rng")
    x = ad.constant(scaler.scale_actions(np.asarray(last_action))[None, :])
    params_seq: list[GMMParams] = []
    actions = np.zeros((s, 2))
    for k in range(s):
        h, c = lstm_step(cell, x, h, c)
        head = ad.add_bias(ad.matmul(h, w_head), b_head)
        params = _params_from_head_row(cfg, head.values[0])
        params_seq.append(params)
        if future_actions is not None:
            u = np.asarray(future_actions[k], dtype=np.float64)
        else:
            u = gmm_sample(params, rng, cfg.speed_cap)
        actions[k] = u
        x = ad.constant(scaler.scale_actions(u)[None, :])
    return params_seq, actions


def decode_sample_rows(
    registry: WeightRegistry,
    cfg: ModelConfig,
    node_type_name: str,
    ctx_row: Tensor,
    z_assignments: np.ndarray,
    last_action: np.ndarray,
    start_pos: np.ndarray,
    dt: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample `len(z_assignments)` rollouts for one node in a single batch.

    Returns (actions (count, S, 2), states (count, S+1, 2)); every action is
    speed-capped, and states follow single-integrator propagation.
    """
    count = z_assignments.shape[0]
    s = cfg.horizon_steps
    scaler = FeatureScaler.for_config(cfg)
    z_block = np.stack([cfg.latent.onehot_for(a) for a in z_assignments])
    h, c, cell, w_head, b_head = _decoder_init(
        registry, cfg, node_type_name, ad.repeat_rows(ctx_row, count), z_block
    )
    x_np = np.repeat(scaler.scale_actions(np.asarray(last_action))[None, :], count, axis=0)
    actions = np.zeros((count, s, 2))
    states = np.zeros((count, s + 1, 2))
    states[:, 0] = start_pos
    k_mix = cfg.n_gmm
    for k in range(s):
        h, c = lstm_step(cell, ad.constant(x_np), h, c)
        head = ad.add_bias(ad.matmul(h, w_head), b_head).values
        logits = head[:, :k_mix]
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        mu = head[:, k_mix : 3 * k_mix].reshape(count, k_mix, 2)
        sig = np.exp(np.clip(head[:, 3 * k_mix :].reshape(count, k_mix, 2),
                             cfg.log_scale_min, cfg.log_scale_max))
        pick = (rng.random((count, 1)) > np.cumsum(probs, axis=1)).sum(axis=1)
        pick = np.minimum(pick, k_mix - 1)
        eps = rng.standard_normal((count, 2))
        rows = np.arange(count)
        u = clamp_speed_rows(mu[rows, pick] + sig[rows, pick] * eps, cfg.speed_cap)
        actions[:, k] = u
        states[:, k + 1] = states[:, k] + u * dt
        x_np = scaler.scale_actions(u)
    return actions, states
