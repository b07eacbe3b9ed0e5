from __future__ import annotations

import numpy as np
import pytest

from courtgraph import autodiff as ad
from courtgraph.config import ModelConfig
from courtgraph.graph import EdgeType, agent_adjacent, neighbors_by_edge_type
from courtgraph.model import (
    EncodingBundle,
    FeatureScaler,
    GMMParams,
    LSTMCellWeights,
    WeightRegistry,
    build_registry,
    decode_gmm,
    decode_loglik,
    decode_sample_rows,
    edge_type_names,
    encode_edge_influence,
    encode_edges,
    encode_future_conditional,
    encode_history,
    encode_node_future,
    encode_scene,
    gmm_log_density,
    gmm_sample,
    lstm_step,
    run_lstm,
    sum_neighbor_histories,
)
from courtgraph.dynamics import SPEED_CAP

from conftest import check_gradients
from helpers import toy_config, toy_setup

LOG_2PI = np.log(2 * np.pi)


def _cell_from_arrays(in_size, hidden, fill=0.0):
    kw = {}
    for g in ("i", "f", "o", "c"):
        kw[f"w_{g}"] = ad.parameter(np.full((in_size, hidden), fill))
        kw[f"u_{g}"] = ad.parameter(np.full((hidden, hidden), fill))
        kw[f"b_{g}"] = ad.parameter(np.full((hidden,), fill))
    return LSTMCellWeights(in_size=in_size, hidden=hidden, **kw)


def test_lstm_step_zero_weights_closed_form(rng):
    cell = _cell_from_arrays(3, 4)
    x = ad.constant(rng.normal(size=(2, 3)))
    h0 = ad.constant(rng.normal(size=(2, 4)))
    c0 = ad.constant(rng.normal(size=(2, 4)))
    h, c = lstm_step(cell, x, h0, c0)
    # zero weights force all gates to 0.5 and a zero candidate cell
    assert np.allclose(c.values, 0.5 * c0.values)
    assert np.allclose(h.values, 0.5 * np.tanh(0.5 * c0.values))


def test_lstm_step_all_zero_state_stays_zero():
    cell = _cell_from_arrays(3, 4)
    z3, z4 = ad.constant(np.zeros((1, 3))), ad.constant(np.zeros((1, 4)))
    h, c = lstm_step(cell, z3, z4, z4)
    assert np.all(h.values == 0.0)
    assert np.all(c.values == 0.0)


def test_lstm_sequence_gradients_match_finite_differences(rng):
    reg = WeightRegistry(seed=5)
    cell = reg.lstm_cell("test/cell", 3, 4)
    seq = [rng.uniform(-1, 1, (1, 3)) for _ in range(10)]

    def loss():
        h, _ = run_lstm(cell, [ad.constant(x) for x in seq])
        return ad.tsum(h)

    # all 12 gate parameter blocks
    check_gradients(loss, reg.params, tol=1e-4)


def test_registry_deterministic_and_order_independent():
    a = WeightRegistry(seed=9)
    a.parameter("X/W", (3, 3), "glorot")
    a.parameter("Y/W", (3, 3), "glorot")
    b = WeightRegistry(seed=9)
    b.parameter("Y/W", (3, 3), "glorot")
    b.parameter("X/W", (3, 3), "glorot")
    assert np.array_equal(a.params["X/W"].values, b.params["X/W"].values)
    assert np.array_equal(a.params["Y/W"].values, b.params["Y/W"].values)
    c = WeightRegistry(seed=10)
    c.parameter("X/W", (3, 3), "glorot")
    assert not np.array_equal(a.params["X/W"].values, c.params["X/W"].values)


def test_registry_aliases_equal_keys():
    reg = WeightRegistry(seed=0)
    cell_a = reg.lstm_cell("NHE/Home-PG", 4, 8)
    cell_b = reg.lstm_cell("NHE/Home-PG", 4, 8)
    assert cell_a.w_i is cell_b.w_i
    cell_a.w_i.values[0, 0] = 123.0
    assert cell_b.w_i.values[0, 0] == 123.0


def test_registry_orthogonal_init():
    reg = WeightRegistry(seed=4)
    u = reg.parameter("T/U", (6, 6), "orthogonal").values
    assert np.allclose(u @ u.T, np.eye(6), atol=1e-10)


def test_forget_gate_bias_starts_at_one():
    reg = WeightRegistry(seed=0)
    cell = reg.lstm_cell("NHE/Home-PG", 4, 8)
    assert np.all(cell.b_f.values == 1.0)
    assert np.all(cell.b_i.values == 0.0)


def test_param_count_depends_only_on_type_set():
    cfg = toy_config()
    counts = set()
    for seed in (0, 1):
        reg = build_registry(cfg, seed)
        counts.add(reg.param_count())
    assert len(counts) == 1
    # running scenes of different sizes creates no new parameters
    cfg2, reg2, examples = toy_setup()
    before = reg2.param_count()
    for ex in examples[:3]:
        with ad.no_tape():
            encode_scene(reg2, cfg2, ex, training=True)
    assert reg2.param_count() == before


def test_edge_type_names_cover_agent_pairs():
    cfg = toy_config()
    names = edge_type_names(cfg)
    assert "Agent—Away-PG" in names
    assert "Away-PG—Home-PG" in names
    assert "Agent—Agent" not in names
    # 2 human types: 3 human pairs + 2 agent pairs
    assert len(names) == 5


# ---------------------------------------------------------------------------
# encoders


def test_sum_of_single_neighbor_is_identity(rng):
    h = rng.normal(size=(4, 4))
    assert np.array_equal(sum_neighbor_histories([h]), h)


def test_sum_distinguishes_duplicates_mean_does_not(rng):
    h = rng.normal(size=(4, 4))
    assert np.allclose(sum_neighbor_histories([h, h]), 2 * h)
    assert np.allclose(sum_neighbor_histories([h, h], "mean"), h)


def test_sum_requires_equal_lengths(rng):
    with pytest.raises(ad.ShapeError):
        sum_neighbor_histories([rng.normal(size=(4, 4)), rng.normal(size=(3, 4))])


def test_encode_edges_buckets(rng):
    cfg, reg, _ = toy_setup()
    et = EdgeType("Home-PG", "Away-PG")
    h1 = rng.uniform(0, 5, (cfg.history_steps, 4))
    single = encode_edges(reg, cfg, "Home-PG", {et: [h1]})
    assert set(single) == {et}
    assert single[et].shape == (1, cfg.ee_hidden)
    # duplicated neighbor changes the encoding under sum aggregation
    double = encode_edges(reg, cfg, "Home-PG", {et: [h1, h1]})
    assert not np.allclose(single[et].values, double[et].values)
    # neighbor order within a bucket is irrelevant
    h2 = rng.uniform(0, 5, (cfg.history_steps, 4))
    ab = encode_edges(reg, cfg, "Home-PG", {et: [h1, h2]})
    ba = encode_edges(reg, cfg, "Home-PG", {et: [h2, h1]})
    assert np.allclose(ab[et].values, ba[et].values)
    # empty bucket map yields no encodings
    assert encode_edges(reg, cfg, "Home-PG", {}) == {}


def test_mean_aggregation_collapses_duplicates(rng):
    cfg, reg, _ = toy_setup(edge_aggregation="mean")
    et = EdgeType("Home-PG", "Away-PG")
    h1 = rng.uniform(0, 5, (cfg.history_steps, 4))
    single = encode_edges(reg, cfg, "Home-PG", {et: [h1]})
    double = encode_edges(reg, cfg, "Home-PG", {et: [h1, h1]})
    assert np.allclose(single[et].values, double[et].values)


def test_edge_influence_empty_is_zero_and_width_fixed(rng):
    cfg, reg, _ = toy_setup()
    empty = encode_edge_influence(reg, cfg, "Home-PG", {})
    assert empty.shape == (1, cfg.eie_out)
    assert np.all(empty.values == 0.0)
    encs = {
        EdgeType("Home-PG", "Away-PG"): ad.constant(rng.normal(size=(1, cfg.ee_hidden))),
        EdgeType("Home-PG", "Home-PG"): ad.constant(rng.normal(size=(1, cfg.ee_hidden))),
        EdgeType("Agent", "Home-PG"): ad.constant(rng.normal(size=(1, cfg.ee_hidden))),
    }
    one = encode_edge_influence(reg, cfg, "Home-PG", {next(iter(encs)): encs[next(iter(encs))]})
    three = encode_edge_influence(reg, cfg, "Home-PG", encs)
    assert one.shape == three.shape == (1, cfg.eie_out)


def test_sum_and_max_reducers(rng):
    v = rng.normal(size=(1, 4))
    encs = {
        EdgeType("Home-PG", "Away-PG"): ad.constant(v),
        EdgeType("Home-PG", "Home-PG"): ad.constant(-v),
    }
    cfg_sum, reg_sum, _ = toy_setup(influence_reducer="sum")
    out_sum = encode_edge_influence(reg_sum, cfg_sum, "Home-PG", encs)
    assert np.allclose(out_sum.values, 0.0)
    cfg_max, reg_max, _ = toy_setup(influence_reducer="max")
    out_max = encode_edge_influence(reg_max, cfg_max, "Home-PG", encs)
    assert np.allclose(out_max.values, np.abs(v))


def test_encode_history_shared_weights_and_single_step(rng):
    cfg, reg, _ = toy_setup()
    h = rng.uniform(0, 5, (cfg.history_steps, 4))
    a = encode_history(reg, cfg, "Home-PG", h)
    b = encode_history(reg, cfg, "Home-PG", h.copy())
    assert np.array_equal(a.values, b.values)
    one = encode_history(reg, cfg, "Home-PG", h[:1])
    assert one.shape == (1, cfg.nhe_hidden)
    with pytest.raises(ad.ShapeError):
        encode_history(reg, cfg, "Home-PG", h[:0])


def test_fce_zeroed_when_not_adjacent(rng):
    cfg, reg, _ = toy_setup()
    fut_a = rng.uniform(0, 5, (cfg.horizon_steps, 4))
    fut_b = rng.uniform(0, 5, (cfg.horizon_steps, 4))
    za = encode_future_conditional(reg, cfg, fut_a, adjacent=False)
    zb = encode_future_conditional(reg, cfg, fut_b, adjacent=False)
    assert np.all(za.values == 0.0)
    assert np.array_equal(za.values, zb.values)
    ea = encode_future_conditional(reg, cfg, fut_a, adjacent=True)
    eb = encode_future_conditional(reg, cfg, fut_b, adjacent=True)
    assert ea.shape == (1, cfg.fce_out)
    assert not np.allclose(ea.values, eb.values)
    with pytest.raises(ad.ContractError):
        encode_future_conditional(reg, cfg, None, adjacent=True)


def test_nfe_training_only_and_deterministic(rng):
    cfg, reg, _ = toy_setup()
    fut = rng.uniform(-3, 3, (cfg.horizon_steps, 2))
    with pytest.raises(ad.ContractError):
        encode_node_future(reg, cfg, "Home-PG", fut, training=False)
    a = encode_node_future(reg, cfg, "Home-PG", fut, training=True)
    b = encode_node_future(reg, cfg, "Home-PG", fut, training=True)
    assert np.array_equal(a.values, b.values)


def test_sampling_path_never_touches_nfe_weights():
    from courtgraph.cvae import sample_futures

    cfg, reg, examples = toy_setup()
    with reg.track_access() as log:
        sample_futures(reg, cfg, examples[0], count=3, rng=np.random.default_rng(0))
    assert log, "expected some registry access"
    assert not [k for k in log if k.startswith("NFE/")]


def test_encoder_output_width_independent_of_scene(rng):
    cfg, reg, examples = toy_setup()
    widths = set()
    for ex in examples[:4]:
        with ad.no_tape():
            enc = encode_scene(reg, cfg, ex, training=True)
        assert enc.ctx.shape == (len(ex.node_ids), cfg.ctx_dim)
        widths.add(enc.ctx.shape[1])
        assert enc.nfe.shape == (len(ex.node_ids), cfg.nfe_out)
    assert len(widths) == 1


def test_batched_scene_encoding_matches_single_node_ops():
    cfg, reg, examples = toy_setup()
    ex = examples[0]
    scaler = FeatureScaler.for_config(cfg)
    with ad.no_tape():
        enc = encode_scene(reg, cfg, ex, training=True)
        for k, nid in enumerate(enc.node_ids):
            tn = enc.type_names[k]
            buckets = neighbors_by_edge_type(ex.graph, nid)
            raw = {et: [ex.history[j] for j in members] for et, members in buckets.items()}
            ee = encode_edges(reg, cfg, tn, raw, scaler)
            eie = encode_edge_influence(reg, cfg, tn, ee)
            nhe = encode_history(reg, cfg, tn, ex.history[nid], scaler)
            fce = encode_future_conditional(
                reg, cfg, ex.agent_future, agent_adjacent(ex.graph, nid, ex.agent_id), scaler
            )
            expected = np.concatenate([eie.values, nhe.values, fce.values], axis=1)
            assert np.allclose(enc.ctx.values[k : k + 1], expected, atol=1e-12)
            nfe = encode_node_future(reg, cfg, tn, ex.future_actions[nid], True, scaler)
            assert np.allclose(enc.nfe.values[k : k + 1], nfe.values, atol=1e-12)


# ---------------------------------------------------------------------------
# GMM


def _uniform_gmm(k=1, means=None, log_scales=None):
    means = np.zeros((k, 2)) if means is None else np.asarray(means, dtype=float)
    scales = np.zeros((k, 2)) if log_scales is None else np.asarray(log_scales, dtype=float)
    return GMMParams(
        log_weights=np.full(k, -np.log(k)),
        means=means,
        log_scales=scales,
    )


def test_gmm_standard_normal_peak():
    params = _uniform_gmm()
    assert gmm_log_density(params, (0.0, 0.0)) == pytest.approx(-LOG_2PI, abs=1e-10)


def test_gmm_two_component_hand_value():
    params = _uniform_gmm(2, means=[[1.0, 0.0], [-1.0, 0.0]])
    # 0.5*N((0,0);(1,0),I) + 0.5*N((0,0);(-1,0),I) = e^{-1/2}/(2*pi)
    assert gmm_log_density(params, (0.0, 0.0)) == pytest.approx(-0.5 - LOG_2PI, abs=1e-10)


def test_gmm_density_integrates_to_one(rng):
    params = GMMParams(
        log_weights=np.log([0.45, 0.35, 0.2]),
        means=rng.uniform(-1.5, 1.5, (3, 2)),
        log_scales=rng.uniform(-0.4, 0.4, (3, 2)),
    )
    xs = np.linspace(-8.0, 8.0, 201)
    # quadrature oracle over the grid
    dens = np.empty((xs.size, xs.size))
    for i, x in enumerate(xs):
        for j, y in enumerate(xs):
            dens[i, j] = np.exp(params.log_density((x, y)))
    total = np.trapezoid(np.trapezoid(dens, xs, axis=1), xs)
    assert total == pytest.approx(1.0, abs=1e-3)


def test_gmm_sampling_frequencies_match_weights():
    weights = np.array([0.4, 0.3, 0.2, 0.1])
    means = np.array([[4.0, 0.0], [0.0, 4.0], [-4.0, 0.0], [0.0, -4.0]])
    params = GMMParams(np.log(weights), means, np.full((4, 2), np.log(0.1)))
    rng = np.random.default_rng(77)
    draws = np.stack([gmm_sample(params, rng, SPEED_CAP) for _ in range(100_000)])
    # Monte Carlo oracle: classify by nearest component mean
    dists = np.linalg.norm(draws[:, None, :] - means[None], axis=2)
    counts = np.bincount(dists.argmin(axis=1), minlength=4) / draws.shape[0]
    assert np.all(np.abs(counts - weights) <= 0.01)


def test_gmm_degenerate_component_collapses_to_mean():
    params = GMMParams(np.zeros(1), np.array([[2.0, 3.0]]), np.full((1, 2), np.log(1e-9)))
    rng = np.random.default_rng(3)
    for _ in range(10):
        s = gmm_sample(params, rng, SPEED_CAP)
        assert np.allclose(s, [2.0, 3.0], atol=1e-6)


def test_gmm_samples_respect_speed_cap():
    params = GMMParams(np.zeros(1), np.array([[20.0, 20.0]]), np.full((1, 2), np.log(5.0)))
    rng = np.random.default_rng(5)
    for _ in range(500):
        s = gmm_sample(params, rng, SPEED_CAP)
        assert np.hypot(*s) <= SPEED_CAP + 1e-12


def test_mixture_weights_must_normalize():
    with pytest.raises(ValueError):
        GMMParams(np.log([0.5, 0.4]), np.zeros((2, 2)), np.zeros((2, 2)))


# ---------------------------------------------------------------------------
# decoder


def _bundle_for(cfg, reg, rng):
    return EncodingBundle(
        edge_influence=ad.constant(rng.normal(size=(1, cfg.eie_out))),
        history=ad.constant(rng.normal(size=(1, cfg.nhe_hidden))),
        future_conditional=ad.constant(rng.normal(size=(1, cfg.fce_out))),
    )


def test_decode_gmm_teacher_mode_shapes(rng):
    cfg, reg, _ = toy_setup()
    bundle = _bundle_for(cfg, reg, rng)
    y = rng.uniform(-3, 3, (cfg.horizon_steps, 2))
    params_seq, actions = decode_gmm(
        reg, cfg, "Home-PG", bundle, (0, 1), last_action=np.zeros(2), future_actions=y
    )
    assert len(params_seq) == cfg.horizon_steps
    for p in params_seq:
        assert np.exp(p.log_weights).sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(np.exp(p.log_scales) > 0)
    assert np.array_equal(actions, y)
    with pytest.raises(ValueError):
        decode_gmm(reg, cfg, "Home-PG", bundle, (0, 99), np.zeros(2), future_actions=y)


def test_decode_gmm_sampling_mode_speed_cap(rng):
    cfg, reg, _ = toy_setup()
    bundle = _bundle_for(cfg, reg, rng)
    params_seq, actions = decode_gmm(
        reg, cfg, "Home-PG", bundle, (1, 2), last_action=np.array([1.0, 0.0]),
        rng=np.random.default_rng(11),
    )
    assert actions.shape == (cfg.horizon_steps, 2)
    assert np.all(np.linalg.norm(actions, axis=1) <= SPEED_CAP + 1e-12)


def test_decode_default_horizon_matches_config(rng):
    cfg, reg, _ = toy_setup(horizon_steps=15)
    bundle = _bundle_for(cfg, reg, rng)
    params_seq, _ = decode_gmm(
        reg, cfg, "Home-PG", bundle, (0, 0), np.zeros(2), rng=np.random.default_rng(0)
    )
    assert len(params_seq) == 15  # 600 ms at 40 ms per step


def test_decode_loglik_matches_single_node_decoder(rng):
    cfg, reg, examples = toy_setup()
    ex = examples[0]
    with ad.no_tape():
        enc = encode_scene(reg, cfg, ex, training=False)
        for tn, members in enc.type_groups.items():
            idx = np.asarray(members)
            ctx_t = ad.gather_rows(enc.ctx, idx)
            y = np.stack([ex.future_actions[enc.node_ids[k]] for k in members])
            last = np.stack([ex.history[enc.node_ids[k]][-1, 2:4] for k in members])
            ll = decode_loglik(reg, cfg, tn, ctx_t, y, last)
            assert ll.shape == (len(members), cfg.latent.joint_size)
            # cross-check one (node, assignment) cell against the rollout path
            k0 = 0
            assignment = tuple(cfg.latent.assignments[2])
            row = ad.narrow(enc.ctx, 0, members[k0], 1)
            bundle = EncodingBundle(
                edge_influence=ad.narrow(row, 1, 0, cfg.eie_out),
                history=ad.narrow(row, 1, cfg.eie_out, cfg.nhe_hidden),
                future_conditional=ad.narrow(row, 1, cfg.eie_out + cfg.nhe_hidden, cfg.fce_out),
            )
            params_seq, _ = decode_gmm(
                reg, cfg, tn, bundle, assignment, last[k0], future_actions=y[k0]
            )
            expected = sum(p.log_density(y[k0][s]) for s, p in enumerate(params_seq))
            assert ll.values[k0, 2] == pytest.approx(expected, rel=1e-9)


def test_decode_sample_rows_propagates_states(rng):
    cfg, reg, examples = toy_setup()
    ex = examples[0]
    nid = ex.node_ids[0]
    with ad.no_tape():
        enc = encode_scene(reg, cfg, ex, training=False)
        z = np.array([[0, 0], [1, 2], [2, 1]])
        actions, states = decode_sample_rows(
            reg, cfg, enc.type_names[0], ad.narrow(enc.ctx, 0, 0, 1), z,
            last_action=ex.history[nid][-1, 2:4], start_pos=ex.start_state[nid],
            dt=ex.dt, rng=np.random.default_rng(8),
        )
    assert actions.shape == (3, cfg.horizon_steps, 2)
    assert states.shape == (3, cfg.horizon_steps + 1, 2)
    recon = states[:, :-1] + actions * ex.dt
    assert np.allclose(recon, states[:, 1:], atol=1e-12)
    assert np.all(np.linalg.norm(actions, axis=2) <= SPEED_CAP + 1e-12)
