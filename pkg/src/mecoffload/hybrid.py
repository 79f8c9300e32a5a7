"""Hybrid decision plumbing: observation encoding, actor-output mapping,
server-side refinement of offload requests, and the fixed-size global views
the centralized critics consume.

Per-user observations are min-max normalized vectors of length 6 + M:
[size, cycles/bit, deadline, local freq, tx power, battery, gains...].
Actor outputs are 3-vectors in [0, 1]: [offload pre-decision, frequency
fraction, power fraction].
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .config import EnvConfig
from .simcore import DeviceState, ServerState, TaskSpec

ACTION_DIM = 3
X_RAW, F_RAW, P_RAW = 0, 1, 2

_TOL = 1e-9


def state_dim(cfg: EnvConfig) -> int:
    return 6 + cfg.num_servers


def slot_width(cfg: EnvConfig) -> int:
    """Width of one (state, action) slot inside a global view."""
    return state_dim(cfg) + ACTION_DIM


def view_dim(cfg: EnvConfig) -> int:
    return cfg.z_max * slot_width(cfg)


def _norm(value: float, lo: float, hi: float, name: str) -> float:
    span = hi - lo
    if value < lo - _TOL * max(1.0, abs(lo)) or value > hi + _TOL * max(1.0, abs(hi)):
        raise ValueError(f"{name}={value} outside [{lo}, {hi}]")
    if span == 0.0:
        return 0.0
    return (value - lo) / span


def encode_state(device: DeviceState, task: TaskSpec, cfg: EnvConfig) -> np.ndarray:
    """Normalize the per-user observation into [0, 1] components."""
    size_lo, size_hi = cfg.task_size_bits
    cyc_lo, cyc_hi = cfg.cycles_per_bit
    dl_lo, dl_hi = cfg.deadline_s
    gain_lo, gain_hi = cfg.gain_db
    out = np.empty(state_dim(cfg))
    out[0] = _norm(task.size_bits, size_lo, size_hi, "task size")
    out[1] = _norm(task.cycles_per_bit, cyc_lo, cyc_hi, "cycles per bit")
    out[2] = _norm(task.deadline_s, dl_lo, dl_hi, "deadline")
    out[3] = _norm(device.local_freq_hz, cfg.local_freq_min_hz,
                   cfg.local_freq_max_hz, "local frequency")
    out[4] = _norm(device.tx_power_dbm, cfg.tx_power_min_dbm,
                   cfg.tx_power_max_dbm, "tx power")
    if device.battery_j < -_TOL or device.battery_j > cfg.battery_max_j * (1 + _TOL):
        raise ValueError(f"battery={device.battery_j} outside [0, {cfg.battery_max_j}]")
    out[5] = device.battery_j / cfg.battery_max_j if cfg.battery_max_j > 0 else 0.0
    for m in range(cfg.num_servers):
        out[6 + m] = _norm(float(device.gains_db[m]), gain_lo, gain_hi, "gain")
    return out


def decode_state(vec: np.ndarray, cfg: EnvConfig) -> tuple[TaskSpec, DeviceState]:
    """Invert encode_state (used for round-trip checks and debugging)."""
    size_lo, size_hi = cfg.task_size_bits
    cyc_lo, cyc_hi = cfg.cycles_per_bit
    dl_lo, dl_hi = cfg.deadline_s
    gain_lo, gain_hi = cfg.gain_db
    task = TaskSpec(
        size_bits=size_lo + vec[0] * (size_hi - size_lo),
        cycles_per_bit=cyc_lo + vec[1] * (cyc_hi - cyc_lo),
        deadline_s=dl_lo + vec[2] * (dl_hi - dl_lo),
    )
    device = DeviceState(
        local_freq_hz=cfg.local_freq_min_hz + vec[3] * (cfg.local_freq_max_hz
                                                        - cfg.local_freq_min_hz),
        tx_power_dbm=cfg.tx_power_min_dbm + vec[4] * (cfg.tx_power_max_dbm
                                                      - cfg.tx_power_min_dbm),
        battery_j=vec[5] * cfg.battery_max_j,
        gains_db=gain_lo + np.asarray(vec[6:]) * (gain_hi - gain_lo),
        kappa=cfg.kappa,
    )
    return task, device


def map_user_action(action: np.ndarray, cfg: EnvConfig
                    ) -> tuple[bool, float, float]:
    """Map raw [0, 1] actor outputs to (pre-decision, freq Hz, power dBm).

    The frequency and power mappings floor at the minimum budgets, so the
    allocation constraints hold by construction.  A pre-decision value of
    exactly 0.5 requests offloading.
    """
    x_raw, f_raw, p_raw = (float(action[X_RAW]), float(action[F_RAW]),
                           float(action[P_RAW]))
    for name, v in (("x", x_raw), ("f", f_raw), ("p", p_raw)):
        if v < -_TOL or v > 1.0 + _TOL:
            raise ValueError(f"raw action {name}={v} outside [0, 1]")
    pre_decision = x_raw >= 0.5
    freq_hz = max(cfg.local_freq_min_hz, f_raw * cfg.local_freq_max_hz)
    power_dbm = max(cfg.tx_power_min_dbm, p_raw * cfg.tx_power_max_dbm)
    return pre_decision, freq_hz, power_dbm


class Candidate(NamedTuple):
    """One offload request pending server approval."""

    user: int
    state: np.ndarray
    action: np.ndarray
    size_bits: float


@dataclass(frozen=True)
class ServerAction:
    """Per-user approval flags for one server's offload requests."""

    approvals: dict[int, int]

    def approved(self) -> list[int]:
        return sorted(u for u, flag in self.approvals.items() if flag)


def refine(server: ServerState, candidates: Sequence[Candidate],
           scores: dict[int, float]) -> ServerAction:
    """Approve offload requests under the subchannel and storage budgets.

    When neither budget binds, every candidate is approved.  Otherwise
    candidates are taken greedily in descending score order (ties by user id
    ascending), skipping any candidate whose size would overflow the
    remaining storage; denied users fall back to local computing.
    """
    roster = set(server.roster)
    for c in candidates:
        if c.user not in roster:
            raise ValueError(f"candidate {c.user} is not on this server's roster")
    total_size = sum(c.size_bits for c in candidates)
    if len(candidates) <= server.subchannels and total_size <= server.storage_budget_bits:
        return ServerAction(approvals={c.user: 1 for c in candidates})

    for c in candidates:
        if c.user not in scores:
            raise ValueError(f"missing refinement score for user {c.user}")
    approvals = {c.user: 0 for c in candidates}
    remaining_storage = server.storage_budget_bits
    remaining_slots = server.subchannels
    for c in sorted(candidates, key=lambda c: (-scores[c.user], c.user)):
        if remaining_slots <= 0:
            break
        if c.size_bits > remaining_storage:
            continue
        approvals[c.user] = 1
        remaining_slots -= 1
        remaining_storage -= c.size_bits
    return ServerAction(approvals=approvals)


def build_global_view(roster: Sequence[int], states: dict[int, np.ndarray],
                      actions: dict[int, np.ndarray], cfg: EnvConfig) -> np.ndarray:
    """Concatenate the roster's (state, action) pairs, zero-padded to z_max.

    Users appear in ascending id order so the layout is independent of call
    order.
    """
    if len(roster) > cfg.z_max:
        raise ValueError(f"roster of {len(roster)} exceeds z_max={cfg.z_max}")
    width = slot_width(cfg)
    sdim = state_dim(cfg)
    out = np.zeros(view_dim(cfg))
    for k, user in enumerate(sorted(roster)):
        base = k * width
        out[base:base + sdim] = states[user]
        out[base + sdim:base + width] = actions[user]
    return out
