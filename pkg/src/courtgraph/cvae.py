"""Discrete-latent conditional objective, exact evaluation, and training.

The latent z is a small product of categoricals, so instead of estimating the
expectation over z by sampling we enumerate every joint assignment exactly:
the training objective and the evaluation likelihood are then deterministic
functions of the weights and data, and evaluation has no estimator variance.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import LatentSpec, ModelConfig
from .data import TrainingExample
from .model import (
    WeightRegistry,
    build_registry,
    decode_loglik,
    decode_sample_rows,
    encode_scene,
    posterior_logits,
    prior_logits,
)

__all__ = [
    "TrainConfig",
    "CategoricalFactors",
    "prior",
    "posterior",
    "kl_categorical",
    "elbo",
    "eval_nll",
    "eval_nll_dataset",
    "train",
    "sample_futures",
    "SampledFuture",
    "TrainResult",
]


@dataclass
class TrainConfig:
    seed: int
    learning_rate: float = 3e-3
    batch_size: int = 8
    steps: int = 230
    kl_anneal_steps: int = 50
    eval_every: int = 25
    grad_clip: float = 10.0

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("seed is mandatory")
        for name in ("learning_rate", "batch_size", "steps", "eval_every", "grad_clip"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.kl_anneal_steps < 0:
            raise ValueError("kl_anneal_steps must be nonnegative")

    def beta(self, step: int) -> float:
        """KL weight: linear ramp from 0 to 1 over the first kl_anneal_steps."""
        if self.kl_anneal_steps == 0:
            return 1.0
        return min(1.0, step / self.kl_anneal_steps)


@dataclass
class CategoricalFactors:
    """Independent categorical distributions, one row per latent variable."""

    probs: np.ndarray  # (n_vars, n_categories)

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ValueError(f"probs must be (n_vars, n_categories), got {self.probs.shape}")
        sums = self.probs.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9) or np.any(self.probs < 0.0):
            raise ValueError("each variable's probabilities must be nonnegative and sum to 1")

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "CategoricalFactors":
        logits = np.asarray(logits, dtype=np.float64)
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return cls(e / e.sum(axis=1, keepdims=True))

    @property
    def spec(self) -> LatentSpec:
        return LatentSpec(self.probs.shape[0], self.probs.shape[1])

    def joint(self) -> np.ndarray:
        """Probability of every joint assignment, in enumeration order."""
        spec = self.spec
        out = np.ones(spec.joint_size)
        for v in range(spec.n_vars):
            out = out * self.probs[v][spec.assignments[:, v]]
        return out

    def sample_assignments(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """(count, n_vars) draws via inverse-CDF; fixed rng consumption."""
        spec = self.spec
        u = rng.random((count, spec.n_vars))
        out = np.empty((count, spec.n_vars), dtype=int)
        for v in range(spec.n_vars):
            cdf = np.cumsum(self.probs[v])
            out[:, v] = np.minimum(np.searchsorted(cdf, u[:, v]), spec.n_categories - 1)
        return out


def kl_categorical(q: CategoricalFactors, p: CategoricalFactors) -> float:
    """KL(q || p) for factorized categoricals: sum of per-variable KLs.

    Zero q-probability terms contribute nothing; p assigning zero mass where q
    does not is reported as an overflow.
    """
    if q.probs.shape != p.probs.shape:
        raise ValueError(f"latent shapes differ: {q.probs.shape} vs {p.probs.shape}")
    support = q.probs > 0.0
    if np.any(support & (p.probs == 0.0)):
        raise OverflowError("KL(q||p) is infinite: p has zero mass on q's support")
    total = 0.0
    qs, ps = q.probs[support], p.probs[support]
    total += float(np.sum(qs * (np.log(qs) - np.log(ps))))
    return total


def prior(
    registry: WeightRegistry, cfg: ModelConfig, node_type_name: str, ctx_row: Tensor
) -> CategoricalFactors:
    """Latent distribution conditioned on the encoded scene only."""
    with ad.no_tape():
        logits = prior_logits(registry, cfg, node_type_name, ctx_row)
    return CategoricalFactors.from_logits(np.stack([t.values[0] for t in logits]))


def posterior(
    registry: WeightRegistry,
    cfg: ModelConfig,
    node_type_name: str,
    ctx_row: Tensor,
    nfe_row: Tensor,
) -> CategoricalFactors:
    """Approximate posterior: same heads, additionally fed the true future."""
    with ad.no_tape():
        logits = posterior_logits(registry, cfg, node_type_name, ctx_row, nfe_row)
    return CategoricalFactors.from_logits(np.stack([t.values[0] for t in logits]))


# ---------------------------------------------------------------------------
# objective


def _group_terms(registry, cfg: ModelConfig, example, enc, members, type_name, training):
    """Per-type-group tensors: (ll, logp_joint[, logq_joint]) over (n_t, Z) rows."""
    idx = np.asarray(members, dtype=int)
    ctx_t = ad.gather_rows(enc.ctx, idx)
    y = np.stack([example.future_actions[enc.node_ids[k]] for k in members])
    last = np.stack([example.history[enc.node_ids[k]][-1, 2:4] for k in members])
    ll = decode_loglik(registry, cfg, type_name, ctx_t, y, last)
    latent = cfg.latent
    selections = [ad.constant(latent.selection_matrix(v)) for v in range(latent.n_vars)]

    def joint_from(logits_list):
        total = None
        for logits, sel in zip(logits_list, selections):
            term = ad.matmul(ad.log_softmax(logits, axis=1), sel)
            total = term if total is None else ad.add(total, term)
        return total

    logp_joint = joint_from(prior_logits(registry, cfg, type_name, ctx_t))
    if not training:
        return ll, logp_joint, None
    nfe_t = ad.gather_rows(enc.nfe, idx)
    logq_joint = joint_from(posterior_logits(registry, cfg, type_name, ctx_t, nfe_t))
    return ll, logp_joint, logq_joint


def elbo(
    registry: WeightRegistry, cfg: ModelConfig, example: TrainingExample, beta: float = 1.0
) -> Tensor:
    """Evidence lower bound, exactly marginalized over all joint assignments.

    E_q[log p(y|x,z)] - beta * KL(q||p), summed over the example's nodes. The
    expectation enumerates every assignment rather than sampling.
    """
    enc = encode_scene(registry, cfg, example, training=True)
    total = None
    for type_name, members in sorted(enc.type_groups.items()):
        ll, logp_joint, logq_joint = _group_terms(
            registry, cfg, example, enc, members, type_name, training=True
        )
        q_joint = ad.exp(logq_joint)
        expected_ll = ad.tsum(ad.mul(q_joint, ll), axis=1, keepdims=True)
        kl = ad.tsum(ad.mul(q_joint, ad.sub(logq_joint, logp_joint)), axis=1, keepdims=True)
        node_terms = ad.sub(expected_ll, ad.mul(kl, ad.constant(beta)))
        part = ad.tsum(node_terms)
        total = part if total is None else ad.add(total, part)
    return total


def eval_nll(registry: WeightRegistry, cfg: ModelConfig, example: TrainingExample) -> float:
    """Exact negative log-likelihood of the node futures, summed over nodes.

    -log sum_z p(z|x) p(y|x,z), with the sum over z enumerated in full; no
    Monte Carlo variance, so repeated calls agree bitwise.
    """
    with ad.no_tape():
        enc = encode_scene(registry, cfg, example, training=False)
        total = 0.0
        for type_name, members in sorted(enc.type_groups.items()):
            ll, logp_joint, _ = _group_terms(
                registry, cfg, example, enc, members, type_name, training=False
            )
            per_node = ad.logsumexp(ad.add(logp_joint, ll), axis=1)
            total -= float(per_node.values.sum())
    return total


def eval_nll_dataset(
    registry: WeightRegistry, cfg: ModelConfig, examples: list[TrainingExample]
) -> float:
    """Dataset metric: per-example node-summed NLL, averaged over examples."""
    if not examples:
        raise ValueError("cannot evaluate an empty example list")
    return float(np.mean([eval_nll(registry, cfg, ex) for ex in examples]))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    registry: WeightRegistry
    metrics: list[dict] = field(default_factory=list)
    timings: list[dict] = field(default_factory=list)


def train(
    train_examples: list[TrainingExample],
    val_examples: list[TrainingExample],
    cfg: ModelConfig,
    tc: TrainConfig,
    registry: WeightRegistry | None = None,
    log_fn=None,
) -> TrainResult:
    """Minibatch ascent on the exact ELBO with Adam.

    Deterministic given the seed: batch selection, initialization, and every
    update depend only on (seed, data). The metrics list records the per-step
    training ELBO and periodic validation NLL; wall-clock times go to the
    separate timings list so metrics stay reproducible.
    """
    if not train_examples:
        raise ValueError("training set is empty")
    registry = registry if registry is not None else build_registry(cfg, tc.seed)
    opt = ad.OptimizerState(learning_rate=tc.learning_rate)
    batch_rng = np.random.default_rng(np.random.SeedSequence((tc.seed, 1)))
    result = TrainResult(registry=registry)

    def record(step, train_elbo, val_nll, wall_ms):
        entry = {"step": step, "train_elbo": train_elbo, "val_nll": val_nll}
        result.metrics.append(entry)
        result.timings.append({"step": step, "wall_ms": wall_ms})
        if log_fn is not None:
            log_fn(entry)

    val0 = eval_nll_dataset(registry, cfg, val_examples) if val_examples else None
    record(0, None, val0, 0.0)
    n = len(train_examples)
    for step in range(1, tc.steps + 1):
        started = time.perf_counter()
        beta = tc.beta(step - 1)
        picks = batch_rng.choice(n, size=min(tc.batch_size, n), replace=n < tc.batch_size)
        ad.zero_grads(registry.params)
        with ad.Tape() as tape:
            total = None
            for i in picks:
                term = elbo(registry, cfg, train_examples[int(i)], beta)
                total = term if total is None else ad.add(total, term)
            batch_elbo = ad.mul(total, ad.constant(1.0 / len(picks)))
            loss = ad.neg(batch_elbo)
        if not np.isfinite(loss.values):
            raise RuntimeError(
                f"training diverged at step {step}: loss={float(loss.values)!r} "
                f"(batch {sorted(int(i) for i in picks)})"
            )
        tape.backward(loss)
        ad.clip_grad_norm(registry.params, tc.grad_clip)
        ad.adam_step(registry.params, opt)
        val = None
        if val_examples and (step % tc.eval_every == 0 or step == tc.steps):
            val = eval_nll_dataset(registry, cfg, val_examples)
        wall_ms = (time.perf_counter() - started) * 1000.0
        record(step, float(batch_elbo.values), val, wall_ms)
    return result


# ---------------------------------------------------------------------------
# sampling


@dataclass
class SampledFuture:
    node_id: str
    z: tuple[int, ...]
    actions: np.ndarray  # (S, 2)
    states: np.ndarray  # (S+1, 2) starting at the node's current position


def sample_futures(
    registry: WeightRegistry,
    cfg: ModelConfig,
    example: TrainingExample,
    count: int,
    rng: np.random.Generator,
    agent_future: np.ndarray | None = None,
) -> dict[str, list[SampledFuture]]:
    """Draw `count` futures per node: z from the prior, then decoder rollouts.

    Each node consumes its own child generator (in node-id order), so one
    node's draws never depend on another node's; with a fixed seed, a node
    whose conditioning is unchanged reproduces its samples bitwise.
    """
    out: dict[str, list[SampledFuture]] = {nid: [] for nid in example.node_ids}
    if count == 0:
        return out
    children = rng.spawn(len(example.node_ids))
    with ad.no_tape():
        enc = encode_scene(registry, cfg, example, training=False, agent_future=agent_future)
        for k, nid in enumerate(enc.node_ids):
            child = children[k]
            ctx_row = ad.narrow(enc.ctx, 0, k, 1)
            dist = CategoricalFactors.from_logits(
                np.stack(
                    [t.values[0] for t in prior_logits(registry, cfg, enc.type_names[k], ctx_row)]
                )
            )
            assignments = dist.sample_assignments(count, child)
            actions, states = decode_sample_rows(
                registry,
                cfg,
                enc.type_names[k],
                ctx_row,
                assignments,
                last_action=example.history[nid][-1, 2:4],
                start_pos=example.start_state[nid],
                dt=example.dt,
                rng=child,
            )
            out[nid] = [
                SampledFuture(nid, tuple(int(c) for c in assignments[j]), actions[j], states[j])
                for j in range(count)
            ]
    return out
