"""Play files, dataset windowing, and the synthetic interaction generator.

A play is a contiguous stretch of tracked game time: per player, a position
sequence sampled every dt seconds. Velocities are not recorded; they are
recovered by forward differences and speed-capped. The synthetic generator
produces goal-switching, mutually repelling players whose futures are
multimodal by construction, which stands in for real tracking data at desk
scale.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .dynamics import SPEED_CAP, CourtSpec, CourtState, clamp_speed_rows
from .graph import ROLES, NodeType, SceneGraph, build_graph

log = logging.getLogger(__name__)

PLAY_FORMAT_VERSION = 1
FEET_TO_M = 0.3048


class SchemaError(ValueError):
    """A play file or record violates the expected schema."""


@dataclass
class PlayerTrack:
    team: str
    role: str
    positions: np.ndarray  # (P, 2) meters

    @property
    def node_type(self) -> NodeType:
        return NodeType(self.team, self.role)


@dataclass
class Play:
    play_id: str
    dt: float
    agent_id: str
    players: dict[str, PlayerTrack]
    game_id: str = ""
    # synthetic diagnostics: per player, goal index in effect for each transition
    modes: dict[str, np.ndarray] | None = None

    @property
    def n_frames(self) -> int:
        return next(iter(self.players.values())).positions.shape[0]

    def actions(self) -> dict[str, np.ndarray]:
        """Per player, speed-capped forward-difference velocities, shape (P-1, 2)."""
        out = {}
        for pid, track in self.players.items():
            diffs = np.diff(track.positions, axis=0) / self.dt
            out[pid] = clamp_speed_rows(diffs)
        return out


@dataclass
class TrainingExample:
    """One windowed prediction problem: histories in, future actions out."""

    play_id: str
    t_index: int  # position index of the prediction timestep
    dt: float
    agent_id: str
    node_ids: list[str]  # prediction targets, ascending, excludes the agent
    types: dict[str, NodeType]  # all entities; agent carries the Agent marker
    history: dict[str, np.ndarray]  # id -> (H, 4) rows of [l, w, dl, dw]
    future_actions: dict[str, np.ndarray]  # id -> (S, 2), targets only
    start_state: dict[str, np.ndarray]  # id -> (2,) position at t_index
    agent_future: np.ndarray  # (S, 4) agent state+action over the horizon
    graph: SceneGraph


# ---------------------------------------------------------------------------
# play file I/O


def write_plays(path, plays: list[Play], court: CourtSpec = CourtSpec()) -> None:
    if not plays:
        raise ValueError("refusing to write an empty play file")
    dts = {p.dt for p in plays}
    if len(dts) > 1:
        raise ValueError(f"plays disagree on dt: {sorted(dts)}")
    doc = {
        "format_version": PLAY_FORMAT_VERSION,
        "dt_ms": plays[0].dt * 1000.0,
        "court": {"length_m": court.length_m, "width_m": court.width_m},
        "plays": [
            {
                "play_id": p.play_id,
                "game_id": p.game_id,
                "agent_id": p.agent_id,
                "players": [
                    {
                        "id": pid,
                        "team": tr.team,
                        "role": tr.role,
                        "xy": tr.positions.tolist(),
                    }
                    for pid, tr in sorted(p.players.items())
                ],
            }
            for p in plays
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def _require(mapping, key, ctx):
    if key not in mapping:
        raise SchemaError(f"{ctx}: missing required field {key!r}")
    return mapping[key]


def parse_plays(path, clip_out_of_bounds: bool = False) -> tuple[list[Play], CourtSpec]:
    """Load and validate a play file; returns the plays and the court spec.

    Out-of-bounds positions are rejected with record context, or clipped onto
    the court when `clip_out_of_bounds` is set.
    """
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError(f"{path}: not valid JSON: {e}") from e
    version = _require(doc, "format_version", str(path))
    if version != PLAY_FORMAT_VERSION:
        raise SchemaError(f"{path}: unsupported format_version {version!r}")
    dt = float(_require(doc, "dt_ms", str(path))) / 1000.0
    if dt <= 0:
        raise SchemaError(f"{path}: dt_ms must be positive")
    court_doc = _require(doc, "court", str(path))
    court = CourtSpec(float(court_doc["length_m"]), float(court_doc["width_m"]))
    plays = []
    for i, pd in enumerate(_require(doc, "plays", str(path))):
        ctx = f"{path}: plays[{i}]"
        play_id = _require(pd, "play_id", ctx)
        agent_id = _require(pd, "agent_id", ctx)
        players = {}
        lengths = set()
        for j, rec in enumerate(_require(pd, "players", ctx)):
            rctx = f"{ctx}.players[{j}]"
            pid = _require(rec, "id", rctx)
            team = _require(rec, "team", rctx)
            role = _require(rec, "role", rctx)
            try:
                NodeType(team, role)
            except ValueError as e:
                raise SchemaError(f"{rctx}: {e}") from e
            xy = np.asarray(_require(rec, "xy", rctx), dtype=np.float64)
            if xy.ndim != 2 or xy.shape[1] != 2 or xy.shape[0] < 2:
                raise SchemaError(f"{rctx}: xy must be an (n>=2, 2) array, got {xy.shape}")
            if not np.all(np.isfinite(xy)):
                raise SchemaError(f"{rctx}: non-finite position")
            lo = np.array([0.0, 0.0])
            hi = np.array([court.length_m, court.width_m])
            if np.any(xy < lo) or np.any(xy > hi):
                if clip_out_of_bounds:
                    xy = np.clip(xy, lo, hi)
                else:
                    bad = int(np.argmax(np.any((xy < lo) | (xy > hi), axis=1)))
                    raise SchemaError(f"{rctx}: position out of court bounds at frame {bad}")
            if pid in players:
                raise SchemaError(f"{rctx}: duplicate player id {pid!r}")
            players[pid] = PlayerTrack(team=team, role=role, positions=xy)
            lengths.add(xy.shape[0])
        if len(lengths) != 1:
            raise SchemaError(f"{ctx}: players have unequal sequence lengths {sorted(lengths)}")
        if agent_id not in players:
            raise SchemaError(f"{ctx}: agent_id {agent_id!r} not among players")
        plays.append(
            Play(
                play_id=play_id,
                dt=dt,
                agent_id=agent_id,
                players=players,
                game_id=pd.get("game_id", ""),
            )
        )
    return plays, court


def sportvu_csv_to_plays(
    path, agent_id: str | None = None, units: str = "feet"
) -> tuple[list[Play], CourtSpec]:
    """Import tracking rows with SportVU-convention columns.

    Required headers: play_id, game_clock, player_id, x, y. Optional: team,
    role. The game clock counts down, so frames are ordered by descending
    clock; dt is the median clock decrement. Coordinates default to feet and
    are converted to meters. Missing teams alternate by first appearance;
    missing roles are dealt per team in ascending player-id order.
    """
    if units not in ("feet", "meters"):
        raise SchemaError(f"unknown units {units!r}")
    scale = FEET_TO_M if units == "feet" else 1.0
    rows_by_play: dict[str, list[dict]] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        required = {"play_id", "game_clock", "player_id", "x", "y"}
        headers = set(reader.fieldnames or ())
        if not required <= headers:
            raise SchemaError(f"{path}: missing CSV columns {sorted(required - headers)}")
        for n, row in enumerate(reader):
            try:
                rows_by_play.setdefault(row["play_id"], []).append(
                    {
                        "clock": float(row["game_clock"]),
                        "pid": row["player_id"],
                        "x": float(row["x"]) * scale,
                        "y": float(row["y"]) * scale,
                        "team": row.get("team") or None,
                        "role": row.get("role") or None,
                    }
                )
            except ValueError as e:
                raise SchemaError(f"{path}: line {n + 2}: {e}") from e
    plays = []
    court = CourtSpec()
    all_dts = []
    for play_id in sorted(rows_by_play):
        rows = rows_by_play[play_id]
        clocks = sorted({r["clock"] for r in rows}, reverse=True)
        if len(clocks) < 2:
            raise SchemaError(f"{path}: play {play_id!r} has fewer than 2 frames")
        all_dts.extend(a - b for a, b in zip(clocks, clocks[1:]))
        by_frame: dict[float, dict[str, dict]] = {c: {} for c in clocks}
        for r in rows:
            by_frame[r["clock"]][r["pid"]] = r
        pids = sorted({r["pid"] for r in rows})
        teams = {}
        seen_teams = []
        for pid in pids:
            t = next((r["team"] for r in rows if r["pid"] == pid and r["team"]), None)
            if t is not None and t not in seen_teams:
                seen_teams.append(t)
            teams[pid] = t
        role_counter = {"Home": 0, "Away": 0}
        players = {}
        for pid in pids:
            raw_team = teams[pid]
            if raw_team is None:
                team = "Home" if pids.index(pid) < len(pids) // 2 else "Away"
            else:
                team = "Home" if seen_teams.index(raw_team) == 0 else "Away"
            role = next((r["role"] for r in rows if r["pid"] == pid and r["role"]), None)
            if role is None:
                role = ROLES[role_counter[team] % len(ROLES)]
                role_counter[team] += 1
            track = []
            for c in clocks:
                if pid not in by_frame[c]:
                    raise SchemaError(
                        f"{path}: play {play_id!r}: player {pid!r} missing at clock {c}"
                    )
                rec = by_frame[c][pid]
                track.append((rec["x"], rec["y"]))
            players[pid] = PlayerTrack(team=team, role=role, positions=np.asarray(track))
        plays.append(
            Play(
                play_id=play_id,
                dt=1.0,  # patched below once the global median dt is known
                agent_id=agent_id if agent_id is not None else pids[0],
                players=players,
            )
        )
        if plays[-1].agent_id not in players:
            raise SchemaError(f"{path}: agent id {plays[-1].agent_id!r} not in play {play_id!r}")
    dt = float(np.median(all_dts))
    if dt <= 0:
        raise SchemaError(f"{path}: game clock is not strictly decreasing")
    for p in plays:
        p.dt = dt
    return plays, court


# ---------------------------------------------------------------------------
# windowing


def window_count(n_frames: int, history_steps: int, horizon_steps: int) -> int:
    """Closed form for the number of windows a play of n_frames supports."""
    return max(0, n_frames - history_steps - horizon_steps)


def window_dataset(
    plays: list[Play], history_steps: int, horizon_steps: int, radius: float
) -> list[TrainingExample]:
    """Slice plays into per-timestep prediction problems.

    At prediction index t the input covers H steps of every entity's position
    and velocity up to and including t, plus the agent's future; the target is
    each human's next S velocities. Plays too short for one full window are
    skipped with a warning.
    """
    if history_steps < 1 or horizon_steps < 1:
        raise ValueError("history and horizon must each be at least one step")
    h, s = history_steps, horizon_steps
    examples = []
    for play in plays:
        n = play.n_frames
        if window_count(n, h, s) == 0:
            log.warning(
                "skipping play %s: %d frames is shorter than %d needed for one window",
                play.play_id, n, h + s + 1,
            )
            continue
        acts = play.actions()
        ids = sorted(play.players)
        node_ids = [i for i in ids if i != play.agent_id]
        types = {
            i: NodeType.agent() if i == play.agent_id else play.players[i].node_type
            for i in ids
        }
        feats = {
            i: np.concatenate([play.players[i].positions[:-1], acts[i]], axis=1) for i in ids
        }
        for t in range(h - 1, n - 1 - s):
            states = {i: CourtState(*play.players[i].positions[t]) for i in ids}
            g = build_graph(states, types, radius)
            a_states = play.players[play.agent_id].positions[t + 1 : t + 1 + s]
            a_acts = acts[play.agent_id][t + 1 : t + 1 + s]
            examples.append(
                TrainingExample(
                    play_id=play.play_id,
                    t_index=t,
                    dt=play.dt,
                    agent_id=play.agent_id,
                    node_ids=node_ids,
                    types=types,
                    history={i: feats[i][t - h + 1 : t + 1] for i in ids},
                    future_actions={i: acts[i][t + 1 : t + 1 + s] for i in node_ids},
                    start_state={i: play.players[i].positions[t].copy() for i in ids},
                    agent_future=np.concatenate([a_states, a_acts], axis=1),
                    graph=g,
                )
            )
    return examples


def split_plays(plays: list[Play], n_validation: int) -> tuple[list[Play], list[Play]]:
    """Deterministic hold-out: the last n plays (by id order) become validation."""
    ordered = sorted(plays, key=lambda p: p.play_id)
    if n_validation <= 0 or n_validation >= len(ordered):
        raise ValueError(
            f"validation plays must be in (0, {len(ordered)}), got {n_validation}"
        )
    return ordered[:-n_validation], ordered[-n_validation:]


# ---------------------------------------------------------------------------
# synthetic generator

DEFAULT_ATTRACTORS = ((5.0, 4.0), (5.0, 11.0), (23.0, 4.0), (23.0, 11.0))
DEFAULT_TYPE_CYCLE = ("Home-PG", "Away-PG", "Home-SG", "Away-SG")
REPEL_RADIUS = 1.0  # m
REPEL_GAIN = 8.0  # m/s at zero separation, linear falloff


@dataclass
class SynthConfig:
    """Goal-switching interaction process standing in for real tracking data."""

    n_plays: int = 40
    n_players: tuple[int, int] = (4, 6)  # inclusive range, counts the agent
    n_modes: int = 3
    attractors: tuple[tuple[float, float], ...] = DEFAULT_ATTRACTORS
    switch_prob: float = 0.04
    noise_scale: float = 0.5  # m/s std on actions
    play_length: int = 60  # position frames per play
    seed: int = 0
    dt: float = 0.04
    court: CourtSpec = field(default_factory=CourtSpec)
    type_cycle: tuple[str, ...] = DEFAULT_TYPE_CYCLE

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("seed is mandatory")
        if not 0.0 <= self.switch_prob <= 1.0:
            raise ValueError(f"switch_prob must be in [0, 1], got {self.switch_prob}")
        if not 1 <= self.n_modes <= len(self.attractors):
            raise ValueError("n_modes must fit within the attractor list")
        if self.play_length < 2 or self.n_plays < 1:
            raise ValueError("play_length >= 2 and n_plays >= 1 required")
        lo, hi = self.n_players
        if not 2 <= lo <= hi:
            raise ValueError(f"n_players range invalid: {self.n_players}")
        if self.noise_scale < 0 or self.dt <= 0:
            raise ValueError("noise_scale >= 0 and dt > 0 required")


def synth_generate(config: SynthConfig) -> list[Play]:
    """Simulate plays of goal-seeking, mutually repelling players.

    Each player holds one of n_modes attractor goals, moves toward it under
    speed-capped single-integrator control with Gaussian action noise,
    resamples its goal with switch_prob per step, and is pushed away from any
    other player within one meter. The goal index active at every transition
    is kept on the play for diagnostics.
    """
    plays = []
    goals = np.asarray(config.attractors[: config.n_modes], dtype=np.float64)
    lo = np.array([0.0, 0.0])
    hi = np.array([config.court.length_m, config.court.width_m])
    for p_idx in range(config.n_plays):
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, p_idx)))
        n = int(rng.integers(config.n_players[0], config.n_players[1] + 1))
        ids = ["agent"] + [f"h{k}" for k in range(1, n)]
        pos = rng.uniform(lo + 2.0, hi - 2.0, size=(n, 2))
        goal_idx = rng.integers(0, config.n_modes, size=n)
        pref_speed = rng.uniform(2.5, 6.5, size=n)
        frames = [pos.copy()]
        mode_log = []
        for _ in range(config.play_length - 1):
            switch = rng.random(n) < config.switch_prob
            if np.any(switch):
                goal_idx = np.where(switch, rng.integers(0, config.n_modes, size=n), goal_idx)
            mode_log.append(goal_idx.copy())
            to_goal = goals[goal_idx] - pos
            dist = np.linalg.norm(to_goal, axis=1, keepdims=True)
            step_limit = dist / config.dt  # do not overshoot the goal
            mag = np.minimum(pref_speed[:, None], step_limit)
            u = np.where(dist > 1e-12, to_goal / np.maximum(dist, 1e-12) * mag, 0.0)
            # pairwise repulsion within REPEL_RADIUS, linear in proximity
            delta = pos[:, None, :] - pos[None, :, :]
            d = np.linalg.norm(delta, axis=2)
            np.fill_diagonal(d, np.inf)
            w = np.where(d < REPEL_RADIUS, REPEL_GAIN * (1.0 - d / REPEL_RADIUS), 0.0)
            u += np.sum(w[:, :, None] * delta / np.maximum(d, 1e-12)[:, :, None], axis=1)
            u += rng.normal(0.0, config.noise_scale, size=(n, 2))
            u = clamp_speed_rows(u)
            nxt = np.clip(pos + u * config.dt, lo, hi)
            pos = nxt
            frames.append(pos.copy())
        stack = np.stack(frames)  # (P, n, 2)
        modes = np.stack(mode_log).T if mode_log else np.zeros((n, 0), dtype=int)
        players = {}
        for k, pid in enumerate(ids):
            type_name = config.type_cycle[k % len(config.type_cycle)]
            nt = NodeType.from_name(type_name)
            players[pid] = PlayerTrack(team=nt.team, role=nt.role, positions=stack[:, k, :])
        plays.append(
            Play(
                play_id=f"synth-{p_idx:04d}",
                dt=config.dt,
                agent_id="agent",
                players=players,
                game_id="synth",
                modes={pid: modes[k] for k, pid in enumerate(ids)},
            )
        )
    return plays
