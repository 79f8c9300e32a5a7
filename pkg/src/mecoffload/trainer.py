"""Multi-agent actor-critic training over the offloading environment.

Each user runs its own actor (and critic); one critic is shared by the
server side.  Critics are centralized: they see the fixed-size global view
of the candidate's server plus the candidate's own state and action.  Actors
are decentralized and see only the local observation.  Experiences are
replayed with reward/TD-error composite priorities, and the squared Bellman
error is weighted by those priorities.

Benchmark policies swap the selection rule (co-selection, random,
max-channel-gain) and the server refinement ranking (critic Q scores, FCFS
by arrival, cheapest-offload-first, tightest-deadline-first).
"""
from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass

import numpy as np

from .config import EnvConfig, TrainConfig
from .coselect import assignment_array, co_select, instance_from_estimates
from .hybrid import (ACTION_DIM, Candidate, build_global_view, encode_state,
                     map_user_action, refine, slot_width, state_dim, view_dim)
from .replay import Experience, PriorityBuffer
from .simcore import (Environment, SlotDecision, offload_energy,
                      processing_delay, transmission_delay)
from .tinynet import Mlp, TrainingError, adam_init, adam_step, load_mlp, save_mlp, soft_update

CSV_COLUMNS = ("episode", "mean_reward", "mean_cost", "timeout_pct",
               "participation_pct", "below_bmin_pct", "actor_loss",
               "critic_loss", "noise_scale")


class Policy(enum.Enum):
    """Selection/refinement behavior of a run."""

    UCMS = "ucms"
    RD_UCMS = "rd_ucms"
    PLAIN_MADDPG = "maddpg"
    OFFLOADCOST = "offload_cost"
    DEADLINE = "deadline"

    @classmethod
    def from_name(cls, name: str) -> "Policy":
        for member in cls:
            if member.value == name:
                return member
        raise ValueError(f"unknown policy {name!r}; "
                         f"expected one of {[m.value for m in cls]}")


def baseline_behavior(policy: Policy) -> tuple[str, str]:
    """(selection rule, refinement rule) pair implementing the policy."""
    table = {
        Policy.UCMS: ("coselect", "q_score"),
        Policy.RD_UCMS: ("random", "q_score"),
        Policy.PLAIN_MADDPG: ("max_gain", "fcfs"),
        Policy.OFFLOADCOST: ("max_gain", "min_cost"),
        Policy.DEADLINE: ("max_gain", "deadline"),
    }
    return table[policy]


def critic_input_dim(cfg: EnvConfig) -> int:
    return view_dim(cfg) + slot_width(cfg)


def center(features: np.ndarray) -> np.ndarray:
    """Shift [0, 1] features to [-0.5, 0.5] for critic inputs.

    Zero-mean features keep the critics' large negative value offset in the
    bias path instead of leaking it into input weights (which would bias
    every action gradient downward early in training); view padding and the
    zeroed slots of denied candidates stay exactly 0, now the neutral value.
    """
    return features - 0.5


class AgentBundle:
    """Per-user actors and critics, the shared server critic, and their targets."""

    HIDDEN = (64, 512)

    def __init__(self, env_cfg: EnvConfig, train_cfg: TrainConfig,
                 rng: np.random.Generator):
        self.env_cfg = env_cfg
        self.num_users = env_cfg.num_users
        sdim = state_dim(env_cfg)
        cdim = critic_input_dim(env_cfg)
        actor_dims = (sdim, *self.HIDDEN, ACTION_DIM)
        critic_dims = (cdim, *self.HIDDEN, 1)
        self.actors = [Mlp(actor_dims, "sigmoid", rng)
                       for _ in range(self.num_users)]
        self.user_critics = [Mlp(critic_dims, "identity", rng)
                             for _ in range(self.num_users)]
        self.server_critic = Mlp(critic_dims, "identity", rng)
        self.target_actors = [net.copy() for net in self.actors]
        self.target_user_critics = [net.copy() for net in self.user_critics]
        self.target_server_critic = self.server_critic.copy()
        self.actor_opts = [adam_init(net.parameters(), train_cfg.actor_lr)
                           for net in self.actors]
        self.user_critic_opts = [adam_init(net.parameters(), train_cfg.critic_lr)
                                 for net in self.user_critics]
        self.server_critic_opt = adam_init(self.server_critic.parameters(),
                                           train_cfg.critic_lr)
        self.updates_done = 0

    def all_parameters(self) -> list[np.ndarray]:
        params: list[np.ndarray] = []
        for net in (*self.actors, *self.user_critics, self.server_critic,
                    *self.target_actors, *self.target_user_critics,
                    self.target_server_critic):
            params.extend(net.parameters())
        return params

    def save(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        meta = {"num_users": self.num_users, "updates_done": self.updates_done}
        with open(os.path.join(directory, "bundle.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh)
        for u in range(self.num_users):
            save_mlp(self.actors[u], os.path.join(directory, f"actor_{u:03d}.net"))
            save_mlp(self.target_actors[u],
                     os.path.join(directory, f"target_actor_{u:03d}.net"))
            save_mlp(self.user_critics[u],
                     os.path.join(directory, f"user_critic_{u:03d}.net"))
            save_mlp(self.target_user_critics[u],
                     os.path.join(directory, f"target_user_critic_{u:03d}.net"))
        save_mlp(self.server_critic, os.path.join(directory, "server_critic.net"))
        save_mlp(self.target_server_critic,
                 os.path.join(directory, "target_server_critic.net"))

    def load(self, directory: str) -> None:
        with open(os.path.join(directory, "bundle.json"), "r", encoding="utf-8") as fh:
            meta = json.load(fh)
        if meta["num_users"] != self.num_users:
            raise ValueError("checkpoint was written for a different user count")
        self.updates_done = int(meta.get("updates_done", 0))
        for u in range(self.num_users):
            self.actors[u] = load_mlp(os.path.join(directory, f"actor_{u:03d}.net"))
            self.target_actors[u] = load_mlp(
                os.path.join(directory, f"target_actor_{u:03d}.net"))
            self.user_critics[u] = load_mlp(
                os.path.join(directory, f"user_critic_{u:03d}.net"))
            self.target_user_critics[u] = load_mlp(
                os.path.join(directory, f"target_user_critic_{u:03d}.net"))
        self.server_critic = load_mlp(os.path.join(directory, "server_critic.net"))
        self.target_server_critic = load_mlp(
            os.path.join(directory, "target_server_critic.net"))


def act(bundle: AgentBundle, states: np.ndarray, noise_scale: float,
        rng: np.random.Generator) -> np.ndarray:
    """Actor actions with additive Gaussian exploration, clamped to [0, 1]."""
    n = bundle.num_users
    actions = np.empty((n, ACTION_DIM))
    for u in range(n):
        actions[u] = bundle.actors[u].forward(states[u])
    actions += rng.standard_normal(actions.shape) * noise_scale
    return np.clip(actions, 0.0, 1.0)


def select_servers(selection: str, env: Environment,
                   rng: np.random.Generator) -> np.ndarray:
    """User->server assignment under the connection cap; -1 means local-only."""
    cfg = env.cfg
    n, m_count = env.n_users, env.n_servers
    if selection == "coselect":
        delay_est, energy_est = env.offload_estimates()
        instance = instance_from_estimates(delay_est, energy_est, cfg.z_max,
                                           cfg.rho1, cfg.rho2)
        return assignment_array(co_select(instance), n)
    out = np.full(n, -1, dtype=int)
    counts = np.zeros(m_count, dtype=int)
    for u in range(n):
        open_servers = [m for m in range(m_count) if counts[m] < cfg.z_max]
        if not open_servers:
            continue
        if selection == "random":
            m = open_servers[int(rng.integers(len(open_servers)))]
        elif selection == "max_gain":
            m = max(open_servers,
                    key=lambda s: (float(env.devices[u].gains_db[s]), -s))
        else:
            raise ValueError(f"unknown selection rule {selection!r}")
        out[u] = m
        counts[m] += 1
    return out


def _refinement_scores(kind: str, env: Environment, bundle: AgentBundle,
                       server_idx: int, roster_view: np.ndarray,
                       candidates: list[Candidate], proposed_power: np.ndarray,
                       rng: np.random.Generator) -> dict[int, float]:
    cfg = env.cfg
    if kind == "q_score":
        # Relative Q values from the shared server critic; random before any
        # training has happened so early episodes do not degenerate.
        if bundle.updates_done == 0:
            return {c.user: float(rng.uniform()) for c in candidates}
        rows = np.stack([np.concatenate([roster_view, center(c.state),
                                         center(c.action)])
                         for c in candidates])
        q = bundle.server_critic.forward(rows).ravel()
        return {c.user: float(q[i]) for i, c in enumerate(candidates)}
    scores: dict[int, float] = {}
    for c in candidates:
        task = env.tasks[c.user]
        gain = float(env.devices[c.user].gains_db[server_idx])
        tx = transmission_delay(task, float(proposed_power[c.user]), gain, cfg)
        total = processing_delay(task, cfg.server_freq_hz) + tx
        if kind == "fcfs":
            scores[c.user] = -tx
        elif kind == "min_cost":
            energy = offload_energy(float(proposed_power[c.user]), tx)
            scores[c.user] = -(cfg.rho1 * total + cfg.rho2 * energy)
        elif kind == "deadline":
            scores[c.user] = -(task.deadline_s - total)
        else:
            raise ValueError(f"unknown refinement rule {kind!r}")
    return scores


@dataclass
class EpisodeResult:
    mean_reward: float
    mean_cost: float
    total_cost: float
    timeout_pct: float
    participation_pct: float
    below_bmin_pct: float


def run_episode(env: Environment, bundle: AgentBundle, policy: Policy,
                noise_scale: float, noise_rng: np.random.Generator,
                select_rng: np.random.Generator,
                buffer: PriorityBuffer | None = None,
                trace: list | None = None) -> EpisodeResult:
    """Roll one episode: select, act, map, refine, advance; store transitions.

    When `trace` is given, one dict per slot is appended with the selection,
    pre-decisions, approvals and mapped allocations (debugging aid).
    """
    cfg = env.cfg
    n = env.n_users
    selection, refinement = baseline_behavior(policy)
    env.reset()
    horizon = cfg.slots_per_episode

    reward_sum = cost_sum = 0.0
    timeouts = offloads = below_bmin = 0

    for t in range(1, horizon + 1):
        states = np.stack([encode_state(env.devices[u], env.tasks[u], cfg)
                           for u in range(n)])
        assignment = select_servers(selection, env, select_rng)
        env.apply_matching(assignment)
        actions = act(bundle, states, noise_scale, noise_rng)
        mapped = [map_user_action(actions[u], cfg) for u in range(n)]
        proposed_power = np.array([mp[2] for mp in mapped])

        approvals = np.zeros(n, dtype=np.int8)
        for m in range(env.n_servers):
            roster = env.servers[m].roster
            if not roster:
                continue
            candidates = [Candidate(u, states[u], actions[u],
                                    env.tasks[u].size_bits)
                          for u in roster if mapped[u][0]]
            if not candidates:
                continue
            roster_view = build_global_view(roster, center(states),
                                            center(actions), cfg)
            scores = _refinement_scores(refinement, env, bundle, m,
                                        roster_view, candidates,
                                        proposed_power, select_rng)
            server_action = refine(env.servers[m], candidates, scores)
            for user, flag in server_action.approvals.items():
                approvals[user] = flag

        decisions = [
            SlotDecision(
                user=u,
                offload=bool(approvals[u]),
                server=int(assignment[u]) if approvals[u] else None,
                local_freq_hz=mapped[u][1],
                tx_power_dbm=mapped[u][2],
            )
            for u in range(n)
        ]
        outcomes = env.advance_slot(decisions)
        next_states = np.stack([encode_state(env.devices[u], env.tasks[u], cfg)
                                for u in range(n)])
        rewards = np.array([o.reward for o in outcomes])

        if trace is not None:
            trace.append({
                "slot": t,
                "assignment": assignment.tolist(),
                "pre_decision": [bool(mapped[u][0]) for u in range(n)],
                "offloaded": approvals.astype(int).tolist(),
                "local_freq_hz": [mapped[u][1] for u in range(n)],
                "tx_power_dbm": [mapped[u][2] for u in range(n)],
                "reward": rewards.tolist(),
            })

        if buffer is not None:
            buffer.push(Experience(
                states=states,
                actions=actions,
                approvals=approvals.copy(),
                rewards=rewards,
                next_states=next_states,
                assignment=assignment.copy(),
                terminal=(t == horizon),
            ))

        reward_sum += float(rewards.sum())
        cost_sum += float(sum(o.cost for o in outcomes))
        timeouts += sum(o.timed_out for o in outcomes)
        offloads += int(approvals.sum())
        below_bmin += sum(d.battery_j < cfg.battery_min_j for d in env.devices)

    steps = n * horizon
    return EpisodeResult(
        mean_reward=reward_sum / steps,
        mean_cost=cost_sum / steps,
        total_cost=cost_sum,
        timeout_pct=100.0 * timeouts / steps,
        participation_pct=100.0 * offloads / steps,
        below_bmin_pct=100.0 * below_bmin / steps,
    )


# -- training updates ---------------------------------------------------------

def _experience_positions(exp: Experience, num_servers: int) -> np.ndarray:
    """Slot index of each user inside its server's global view (-1 if none)."""
    pos = np.full(exp.assignment.shape[0], -1, dtype=int)
    for m in range(num_servers):
        roster = np.flatnonzero(exp.assignment == m)
        pos[roster] = np.arange(roster.size)
    return pos


def _current_rows(batch: list[Experience], cfg: EnvConfig) -> np.ndarray:
    """Critic inputs [view | own state | own action] from stored transitions."""
    n = cfg.num_users
    vdim, sdim = view_dim(cfg), state_dim(cfg)
    rows = np.zeros((len(batch) * n, critic_input_dim(cfg)))
    for b, exp in enumerate(batch):
        states_c = center(exp.states)
        actions_c = center(exp.actions)
        views: dict[int, np.ndarray] = {}
        for m in range(cfg.num_servers):
            roster = np.flatnonzero(exp.assignment == m)
            if roster.size:
                views[m] = build_global_view(roster, states_c, actions_c, cfg)
        for u in range(n):
            row = rows[b * n + u]
            m = int(exp.assignment[u])
            if m >= 0:
                row[:vdim] = views[m]
            row[vdim:vdim + sdim] = states_c[u]
            row[vdim + sdim:] = actions_c[u]
    return rows


def compute_targets(bundle: AgentBundle, batch: list[Experience],
                    cfg: EnvConfig, gamma: float) -> np.ndarray:
    """Bellman targets per (experience, user), from target networks only.

    Next actions come from the target actors.  Users whose offload request
    was not approved get zeroed own-state/own-action candidate slots; the
    terminal slot of an episode does not bootstrap.
    """
    n = cfg.num_users
    vdim, sdim = view_dim(cfg), state_dim(cfg)
    batch_size = len(batch)
    next_states = np.stack([exp.next_states for exp in batch])  # (B, N, S)
    next_actions = np.empty((batch_size, n, ACTION_DIM))
    for u in range(n):
        next_actions[:, u, :] = bundle.target_actors[u].forward(next_states[:, u, :])

    rows = np.zeros((batch_size * n, critic_input_dim(cfg)))
    for b, exp in enumerate(batch):
        states_c = center(next_states[b])
        actions_c = center(next_actions[b])
        views: dict[int, np.ndarray] = {}
        for m in range(cfg.num_servers):
            roster = np.flatnonzero(exp.assignment == m)
            if roster.size:
                views[m] = build_global_view(roster, states_c, actions_c, cfg)
        for u in range(n):
            row = rows[b * n + u]
            m = int(exp.assignment[u])
            if m >= 0:
                row[:vdim] = views[m]
            if exp.approvals[u]:
                row[vdim:vdim + sdim] = states_c[u]
                row[vdim + sdim:] = actions_c[u]
    q_next = bundle.target_server_critic.forward(rows).reshape(batch_size, n)
    rewards = np.stack([exp.rewards for exp in batch])
    live = ~np.array([exp.terminal for exp in batch])
    return rewards + gamma * q_next * live[:, None]


def target_q(bundle: AgentBundle, exp: Experience, cfg: EnvConfig,
             gamma: float) -> np.ndarray:
    """Per-user target values for a single experience."""
    return compute_targets(bundle, [exp], cfg, gamma)[0]


def critic_update(bundle: AgentBundle, batch: list[Experience],
                  priorities: np.ndarray, cfg: EnvConfig,
                  train_cfg: TrainConfig,
                  rows: np.ndarray | None = None
                  ) -> tuple[float, np.ndarray, np.ndarray]:
    """Priority-weighted MSE updates of the server critic and every user critic.

    `priorities` carries one weight per experience; the training loop passes
    the sampled priorities (default) or inverse-importance weights when the
    ablation switch is on.  Returns (server loss, per-user losses,
    per-experience mean |TD error|).
    """
    n = cfg.num_users
    batch_size = len(batch)
    targets = compute_targets(bundle, batch, cfg, train_cfg.gamma)  # (B, N)
    if rows is None:
        rows = _current_rows(batch, cfg)
    eta = np.repeat(np.asarray(priorities, dtype=float), n)         # row-major (b, u)

    acts = bundle.server_critic._forward_all(rows)
    q = acts[-1].ravel()
    err = targets.ravel() - q
    server_loss = float(np.mean(eta * err * err))
    if not np.isfinite(server_loss):
        raise TrainingError(f"non-finite server critic loss {server_loss}")
    upstream = (-2.0 * eta * err / err.size)[:, None]
    grads, _ = bundle.server_critic.backward(rows, upstream, acts=acts)
    flat = [g for pair in grads for g in pair]
    adam_step(bundle.server_critic_opt, bundle.server_critic.parameters(), flat)

    user_losses = np.empty(n)
    pri = np.asarray(priorities, dtype=float)
    for u in range(n):
        rows_u = rows[u::n]
        y_u = targets[:, u]
        acts_u = bundle.user_critics[u]._forward_all(rows_u)
        q_u = acts_u[-1].ravel()
        err_u = y_u - q_u
        user_losses[u] = float(np.mean(pri * err_u * err_u))
        if not np.isfinite(user_losses[u]):
            raise TrainingError(f"non-finite critic loss for user {u}")
        upstream_u = (-2.0 * pri * err_u / batch_size)[:, None]
        grads_u, _ = bundle.user_critics[u].backward(rows_u, upstream_u,
                                                     acts=acts_u)
        flat_u = [g for pair in grads_u for g in pair]
        adam_step(bundle.user_critic_opts[u], bundle.user_critics[u].parameters(),
                  flat_u)

    td_abs = np.abs(err).reshape(batch_size, n).mean(axis=1)
    return server_loss, user_losses, td_abs


def actor_objective(bundle: AgentBundle, batch: list[Experience],
                    cfg: EnvConfig, user: int) -> float:
    """Mean server-critic value with `user`'s action regenerated by its actor."""
    rows_u, _ = _rows_with_fresh_action(bundle, batch, cfg, user,
                                        _current_rows(batch, cfg))
    return float(np.mean(bundle.server_critic.forward(rows_u)))


def _rows_with_fresh_action(bundle: AgentBundle, batch: list[Experience],
                            cfg: EnvConfig, user: int, base_rows: np.ndarray
                            ) -> tuple[np.ndarray, dict]:
    """Critic rows for `user` with its stored action replaced by the online
    actor's output, in both the candidate slot and its global-view slot."""
    n = cfg.num_users
    vdim, sdim = view_dim(cfg), state_dim(cfg)
    width = slot_width(cfg)
    states_u = np.stack([exp.states[user] for exp in batch])
    positions = np.array([_experience_positions(exp, cfg.num_servers)[user]
                          for exp in batch])
    cand_cols = vdim + sdim
    rows_u = base_rows[user::n].copy()
    fresh = bundle.actors[user].forward(states_u)                     # (B, 3)
    fresh_c = center(fresh)   # constant shift, gradient passes through
    rows_u[:, cand_cols:cand_cols + ACTION_DIM] = fresh_c
    in_view = np.flatnonzero(positions >= 0)
    col0 = positions[in_view] * width + sdim
    for k in range(ACTION_DIM):
        rows_u[in_view, col0 + k] = fresh_c[in_view, k]
    layout = {"states_u": states_u, "in_view": in_view, "col0": col0,
              "cand_cols": cand_cols}
    return rows_u, layout


def actor_gradients(bundle: AgentBundle, batch: list[Experience], cfg: EnvConfig,
                    rows: np.ndarray | None = None
                    ) -> list[list[np.ndarray]]:
    """Per-user policy gradients of the mean critic value (ascent direction)."""
    base_rows = _current_rows(batch, cfg) if rows is None else rows
    batch_size = len(batch)
    out: list[list[np.ndarray]] = []
    for u in range(cfg.num_users):
        rows_u, layout = _rows_with_fresh_action(bundle, batch, cfg, u,
                                                 base_rows)
        upstream = np.full((batch_size, 1), 1.0 / batch_size)
        input_grad = bundle.server_critic.input_gradient(rows_u, upstream)
        cand = layout["cand_cols"]
        dq_da = input_grad[:, cand:cand + ACTION_DIM].copy()
        in_view, col0 = layout["in_view"], layout["col0"]
        for k in range(ACTION_DIM):
            dq_da[in_view, k] += input_grad[in_view, col0 + k]
        grads, _ = bundle.actors[u].backward(layout["states_u"], dq_da)
        out.append([g for pair in grads for g in pair])
    return out


def actor_update(bundle: AgentBundle, batch: list[Experience],
                 cfg: EnvConfig, rows: np.ndarray | None = None) -> np.ndarray:
    """Deterministic policy-gradient ascent through the server critic.

    For each user, its stored action is replaced by the online actor's output
    (in both its global-view slot and the candidate slot), the mean critic
    value is differentiated w.r.t. that action, and the chain rule pushes the
    gradient into the actor.  Returns per-user gradient norms.
    """
    gradients = actor_gradients(bundle, batch, cfg, rows=rows)
    norms = np.empty(cfg.num_users)
    for u, flat in enumerate(gradients):
        norms[u] = float(np.sqrt(sum(float((g * g).sum()) for g in flat)))
        ascent = [-g for g in flat]
        adam_step(bundle.actor_opts[u], bundle.actors[u].parameters(), ascent)
    return norms


def update_round(bundle: AgentBundle, buffer: PriorityBuffer,
                 cfg: EnvConfig, train_cfg: TrainConfig,
                 sample_rng: np.random.Generator) -> tuple[float, float]:
    """One sample/update/soft-update/priority-refresh round.

    Returns (server critic loss, mean actor gradient norm).
    """
    batch, ids, priorities = buffer.sample(train_cfg.batch_size, sample_rng)
    if train_cfg.importance_correction:
        # ablation: standard inverse-importance weights instead of the
        # literal priority weighting of the squared error
        probs = priorities / buffer.total_priority()
        weights = 1.0 / (len(buffer) * probs)
        weights = weights / weights.max()
    else:
        weights = priorities
    rows = _current_rows(batch, cfg)
    server_loss, _user_losses, td_abs = critic_update(bundle, batch, weights,
                                                      cfg, train_cfg, rows=rows)
    norms = actor_update(bundle, batch, cfg, rows=rows)
    soft_update(bundle.target_server_critic, bundle.server_critic, train_cfg.tau)
    for u in range(bundle.num_users):
        soft_update(bundle.target_user_critics[u], bundle.user_critics[u],
                    train_cfg.tau)
        soft_update(bundle.target_actors[u], bundle.actors[u], train_cfg.tau)
    reward_mag = np.array([float(np.mean(np.abs(exp.rewards))) for exp in batch])
    buffer.update_priorities(ids, reward_mag, td_abs)
    bundle.updates_done += 1
    return server_loss, float(np.mean(norms))


def train(env: Environment, train_cfg: TrainConfig, policy: Policy,
          bundle: AgentBundle | None = None,
          checkpoint_dir: str | None = None,
          verbose_dir: str | None = None) -> tuple[list[dict], AgentBundle]:
    """Full training loop; returns (per-episode log rows, trained bundle).

    On a non-finite loss or gradient the current bundle is checkpointed (when
    a directory is given) and the error re-raised.  With `verbose_dir`,
    per-slot decision traces go to decisions.jsonl and a per-round priority
    histogram to priority_hist.csv in that directory.
    """
    base = np.random.SeedSequence(train_cfg.seed, spawn_key=(1,))
    init_ss, noise_ss, select_ss, sample_ss = base.spawn(4)
    init_rng = np.random.default_rng(init_ss)
    noise_rng = np.random.default_rng(noise_ss)
    select_rng = np.random.default_rng(select_ss)
    sample_rng = np.random.default_rng(sample_ss)

    if bundle is None:
        bundle = AgentBundle(env.cfg, train_cfg, init_rng)
    buffer = PriorityBuffer(train_cfg.buffer_capacity, train_cfg.reward_weight,
                            train_cfg.td_weight, train_cfg.priority_floor)
    trace_fh = hist_fh = None
    if verbose_dir is not None:
        os.makedirs(verbose_dir, exist_ok=True)
        trace_fh = open(os.path.join(verbose_dir, "decisions.jsonl"), "w",
                        encoding="utf-8", newline="\n")
        hist_fh = open(os.path.join(verbose_dir, "priority_hist.csv"), "w",
                       encoding="utf-8", newline="\n")
        hist_fh.write("episode,round,p_min,p_max,"
                      + ",".join(f"bin{i}" for i in range(10)) + "\n")
    log: list[dict] = []
    try:
        for episode in range(1, train_cfg.episodes + 1):
            noise_scale = max(train_cfg.noise_floor,
                              train_cfg.noise_start
                              * train_cfg.noise_decay ** (episode - 1))
            trace: list | None = [] if trace_fh is not None else None
            result = run_episode(env, bundle, policy, noise_scale, noise_rng,
                                 select_rng, buffer, trace=trace)
            if trace_fh is not None:
                for entry in trace:
                    trace_fh.write(json.dumps({"episode": episode, **entry},
                                              sort_keys=True) + "\n")
            critic_losses: list[float] = []
            actor_norms: list[float] = []
            if len(buffer) >= train_cfg.batch_size:
                for round_idx in range(train_cfg.updates_per_episode):
                    loss, norm = update_round(bundle, buffer, env.cfg,
                                              train_cfg, sample_rng)
                    critic_losses.append(loss)
                    actor_norms.append(norm)
                    if hist_fh is not None:
                        pri = buffer.priorities()
                        counts, _ = np.histogram(pri, bins=10)
                        hist_fh.write(
                            f"{episode},{round_idx},{pri.min()},{pri.max()},"
                            + ",".join(str(int(c)) for c in counts) + "\n")
            log.append({
                "episode": episode,
                "mean_reward": result.mean_reward,
                "mean_cost": result.mean_cost,
                "timeout_pct": result.timeout_pct,
                "participation_pct": result.participation_pct,
                "below_bmin_pct": result.below_bmin_pct,
                "actor_loss": float(np.mean(actor_norms)) if actor_norms else 0.0,
                "critic_loss": float(np.mean(critic_losses)) if critic_losses else 0.0,
                "noise_scale": noise_scale,
            })
    except TrainingError:
        if checkpoint_dir is not None:
            bundle.save(checkpoint_dir)
        raise
    finally:
        if trace_fh is not None:
            trace_fh.close()
        if hist_fh is not None:
            hist_fh.close()
    return log, bundle
