"""Environment physics: task generation, delay/energy models, server queueing,
battery dynamics, cost/penalty/reward, and the slot-advance state machine.

All functions compute in canonical SI units (bits, seconds, hertz, joules,
watts).  Power budgets travel as dBm and channel gains as dB up to the point
of use; conversion happens inside the physics ops.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .config import MB_BITS, EnvConfig


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


@dataclass(frozen=True)
class TaskSpec:
    """One slot's task for one device: payload, compute density, deadline."""

    size_bits: float
    cycles_per_bit: float
    deadline_s: float


@dataclass
class DeviceState:
    """Per-user allocation state, battery and per-server channel gains."""

    local_freq_hz: float
    tx_power_dbm: float
    battery_j: float
    gains_db: np.ndarray  # shape (num_servers,)
    kappa: float


@dataclass
class ServerState:
    """Per-server CPU free-times, storage budget, subchannels and roster."""

    cpu_free_times_s: np.ndarray  # shape (num_cpus,)
    storage_budget_bits: float
    subchannels: int
    cpu_freq_hz: float
    roster: tuple[int, ...] = ()


@dataclass(frozen=True)
class SlotDecision:
    """Final per-user decision for one slot (constraints already enforced)."""

    user: int
    offload: bool
    server: int | None
    local_freq_hz: float
    tx_power_dbm: float


@dataclass(frozen=True)
class SlotOutcome:
    """Per-user result of one slot."""

    delay_s: float
    energy_j: float
    cost: float
    penalty: float
    timed_out: bool
    reward: float


class ScheduledTask(NamedTuple):
    arrival_s: float
    proc_s: float
    queue_free_s: float  # CPU free-time popped when this task was placed
    finish_s: float


def generate_task(rng: np.random.Generator, cfg: EnvConfig) -> TaskSpec:
    """Draw one task uniformly from the configured ranges (size in MB -> bits)."""
    size_mb = rng.uniform(*cfg.task_size_mb)
    cycles = rng.uniform(*cfg.cycles_per_bit)
    deadline = rng.uniform(*cfg.deadline_s)
    return TaskSpec(size_bits=size_mb * MB_BITS, cycles_per_bit=cycles,
                    deadline_s=deadline)


def local_delay(task: TaskSpec, freq_hz: float) -> float:
    """Seconds to run the task on the device CPU."""
    if freq_hz <= 0.0:
        raise ValueError("local frequency must be positive")
    return task.size_bits * task.cycles_per_bit / freq_hz


def local_energy(task: TaskSpec, freq_hz: float, kappa: float) -> float:
    """Joules consumed running the task locally (quadratic in frequency)."""
    if freq_hz <= 0.0:
        raise ValueError("local frequency must be positive")
    return kappa * task.size_bits * task.cycles_per_bit * freq_hz ** 2


def uplink_rate(tx_power_dbm: float, gain_db: float, cfg: EnvConfig) -> float:
    """Subchannel transmission rate in bits/s.

    The noise power is folded into the normalized gain, so SNR is the product
    of the linear transmit power and the linear gain.
    """
    snr = dbm_to_watts(tx_power_dbm) * db_to_linear(gain_db)
    return cfg.bandwidth_hz / cfg.num_subchannels * math.log2(1.0 + snr)


def transmission_delay(task: TaskSpec, tx_power_dbm: float, gain_db: float,
                       cfg: EnvConfig) -> float:
    rate = uplink_rate(tx_power_dbm, gain_db, cfg)
    if rate <= 0.0:
        return math.inf
    return task.size_bits / rate


def processing_delay(task: TaskSpec, server_freq_hz: float) -> float:
    if server_freq_hz <= 0.0:
        raise ValueError("server frequency must be positive")
    return task.size_bits * task.cycles_per_bit / server_freq_hz


def schedule_server(offloaded: Sequence[tuple[int, float, float]],
                    server: ServerState) -> dict[int, ScheduledTask]:
    """Place offloaded tasks onto the server CPUs in arrival order.

    `offloaded` holds (user, arrival_s, proc_s) triples.  Tasks are taken in
    ascending arrival order (ties by user id); each pops the earliest CPU
    free-time q, starts at max(arrival, q) and runs for proc_s.  The total
    offload delay per user is the finish time.
    """
    if len(server.cpu_free_times_s) < 1:
        raise ValueError("server must have at least one CPU")
    heap = [float(q) for q in server.cpu_free_times_s]
    if any(q < 0.0 for q in heap):
        raise ValueError("CPU free-times must be non-negative")
    heapq.heapify(heap)
    out: dict[int, ScheduledTask] = {}
    for user, arrival, proc in sorted(offloaded, key=lambda e: (e[1], e[0])):
        if arrival < 0.0 or proc < 0.0:
            raise ValueError("arrival and processing times must be non-negative")
        q = heapq.heappop(heap)
        start = max(arrival, q)
        finish = start + proc
        heapq.heappush(heap, finish)
        out[user] = ScheduledTask(arrival_s=arrival, proc_s=proc,
                                  queue_free_s=q, finish_s=finish)
    return out


def offload_energy(tx_power_dbm: float, tx_delay_s: float) -> float:
    """Joules the device spends transmitting for tx_delay_s."""
    if tx_delay_s < 0.0:
        raise ValueError("transmission delay must be non-negative")
    return dbm_to_watts(tx_power_dbm) * tx_delay_s


def slot_totals(offload: bool, local_pair: tuple[float, float],
                offload_pair: tuple[float, float]) -> tuple[float, float]:
    """Select the (delay, energy) pair the binary decision actually incurs."""
    return offload_pair if offload else local_pair


def cost(delay_s: float, energy_j: float, rho1: float, rho2: float) -> float:
    """Weighted delay/energy cost of one task."""
    if rho1 < 0.0 or rho2 < 0.0:
        raise ValueError("cost weights must be non-negative")
    return rho1 * delay_s + rho2 * energy_j


def penalty(delay_s: float, deadline_s: float, battery_j: float,
            battery_min_j: float, rho1: float, rho2: float) -> float:
    """Non-positive penalty for deadline and battery-threshold violations."""
    return (rho1 * min(deadline_s - delay_s, 0.0)
            + rho2 * min(battery_j - battery_min_j, 0.0))


def reward(mean_cost: float, penalty_value: float) -> float:
    """Per-user reward: negated mean cost plus the (non-positive) penalty."""
    return -mean_cost + penalty_value


def battery_step(battery_j: float, consumed_j: float, harvested_j: float,
                 battery_max_j: float) -> float:
    """Battery update, clamped to [0, battery_max]."""
    if battery_j < 0.0 or consumed_j < 0.0 or harvested_j < 0.0:
        raise ValueError("battery quantities must be non-negative")
    return min(max(battery_j - consumed_j + harvested_j, 0.0), battery_max_j)


class Environment:
    """Slot-stepped simulator for N devices and M servers.

    Single writer per instance.  All randomness flows from the seed given at
    construction; the draw order per slot is fixed (tasks in user order, then
    gains in user order), so identical seeds and decisions reproduce
    trajectories bit for bit.
    """

    def __init__(self, cfg: EnvConfig, seed: int | None = None):
        self.cfg = cfg
        self._rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.slot = 0
        self.devices: list[DeviceState] = []
        self.tasks: list[TaskSpec] = []
        self.servers: list[ServerState] = []
        self.reset()

    @property
    def n_users(self) -> int:
        return self.cfg.num_users

    @property
    def n_servers(self) -> int:
        return self.cfg.num_servers

    def reset(self) -> None:
        """Start a fresh episode: full batteries, minimum allocations, slot 1."""
        cfg = self.cfg
        self.slot = 1
        self.devices = [
            DeviceState(
                local_freq_hz=cfg.local_freq_min_hz,
                tx_power_dbm=cfg.tx_power_min_dbm,
                battery_j=cfg.battery_max_j,
                gains_db=np.zeros(cfg.num_servers),
                kappa=cfg.kappa,
            )
            for _ in range(cfg.num_users)
        ]
        self.tasks = [TaskSpec(1.0, 1.0, 1.0)] * cfg.num_users
        self._draw_slot()
        self.servers = [self._fresh_server() for _ in range(cfg.num_servers)]

    def _fresh_server(self) -> ServerState:
        cfg = self.cfg
        return ServerState(
            cpu_free_times_s=np.zeros(cfg.num_cpus),
            storage_budget_bits=cfg.storage_bits,
            subchannels=cfg.num_subchannels,
            cpu_freq_hz=cfg.server_freq_hz,
            roster=(),
        )

    def _draw_slot(self) -> None:
        cfg = self.cfg
        self.tasks = [generate_task(self._rng, cfg) for _ in range(cfg.num_users)]
        lo, hi = cfg.gain_db
        for device in self.devices:
            device.gains_db = self._rng.uniform(lo, hi, cfg.num_servers)

    def apply_matching(self, assignment: Sequence[int]) -> None:
        """Record this slot's user->server assignment (-1 means unassigned)."""
        rosters: list[list[int]] = [[] for _ in range(self.n_servers)]
        for user, server in enumerate(assignment):
            if server < 0:
                continue
            if server >= self.n_servers:
                raise ValueError(f"assignment references unknown server {server}")
            rosters[server].append(user)
        for m, server_state in enumerate(self.servers):
            server_state.roster = tuple(sorted(rosters[m]))

    def offload_estimates(self, tx_power_dbm: np.ndarray | None = None
                          ) -> tuple[np.ndarray, np.ndarray]:
        """Per-(user, server) offload delay/energy assuming empty queues.

        Uses each device's current tx power unless explicit powers are given.
        Returns (delay_est, energy_est), both shaped (N, M).
        """
        cfg = self.cfg
        if tx_power_dbm is None:
            powers = np.array([d.tx_power_dbm for d in self.devices])
        else:
            powers = np.asarray(tx_power_dbm, dtype=float)
        gains = np.stack([d.gains_db for d in self.devices])        # (N, M)
        sizes = np.array([t.size_bits for t in self.tasks])
        cycles = np.array([t.cycles_per_bit for t in self.tasks])
        watts = 10.0 ** ((powers - 30.0) / 10.0)
        snr = watts[:, None] * 10.0 ** (gains / 10.0)
        rate = cfg.bandwidth_hz / cfg.num_subchannels * np.log2(1.0 + snr)
        with np.errstate(divide="ignore"):
            tx_delay = np.where(rate > 0.0, sizes[:, None] / rate, np.inf)
        proc = (sizes * cycles)[:, None] / cfg.server_freq_hz
        delay_est = proc + tx_delay
        energy_est = watts[:, None] * tx_delay
        return delay_est, energy_est

    def advance_slot(self, decisions: Sequence[SlotDecision]) -> list[SlotOutcome]:
        """Execute one slot of decisions and move the environment to the next.

        Computes every per-user outcome, applies the battery update, then
        redraws tasks and gains and resets server queues/storage (slots are
        independent epochs; unfinished work is discarded).
        """
        cfg = self.cfg
        n = self.n_users
        if len(decisions) != n:
            raise ValueError(f"expected {n} decisions, got {len(decisions)}")
        by_user: dict[int, SlotDecision] = {}
        for d in decisions:
            if not 0 <= d.user < n:
                raise ValueError(f"decision references unknown user {d.user}")
            if d.user in by_user:
                raise ValueError(f"duplicate decision for user {d.user}")
            if d.offload:
                if d.server is None or not 0 <= d.server < self.n_servers:
                    raise ValueError(
                        f"decision for user {d.user} references unknown server "
                        f"{d.server}")
            by_user[d.user] = d

        delays = np.zeros(n)
        energies = np.zeros(n)

        # Offloaded tasks queue per server; local tasks are independent.
        per_server: dict[int, list[tuple[int, float, float]]] = {}
        tx_delays: dict[int, float] = {}
        for user in range(n):
            d = by_user[user]
            if not d.offload:
                continue
            task = self.tasks[user]
            gain = float(self.devices[user].gains_db[d.server])
            tx = transmission_delay(task, d.tx_power_dbm, gain, cfg)
            proc = processing_delay(task, cfg.server_freq_hz)
            tx_delays[user] = tx
            per_server.setdefault(d.server, []).append((user, tx, proc))

        finish: dict[int, float] = {}
        for m, entries in per_server.items():
            placed = schedule_server(entries, self.servers[m])
            for user, rec in placed.items():
                finish[user] = rec.finish_s

        for user in range(n):
            d = by_user[user]
            task = self.tasks[user]
            local_pair = (local_delay(task, d.local_freq_hz),
                          local_energy(task, d.local_freq_hz, cfg.kappa))
            if d.offload:
                off_pair = (finish[user],
                            offload_energy(d.tx_power_dbm, tx_delays[user]))
            else:
                off_pair = (0.0, 0.0)
            delays[user], energies[user] = slot_totals(d.offload, local_pair,
                                                       off_pair)

        costs = np.array([cost(delays[u], energies[u], cfg.rho1, cfg.rho2)
                          for u in range(n)])
        mean_cost = float(np.mean(costs))

        outcomes: list[SlotOutcome] = []
        for user in range(n):
            device = self.devices[user]
            device.battery_j = battery_step(device.battery_j, float(energies[user]),
                                            cfg.harvested_j, cfg.battery_max_j)
            pen = penalty(float(delays[user]), self.tasks[user].deadline_s,
                          device.battery_j, cfg.battery_min_j, cfg.rho1, cfg.rho2)
            outcomes.append(SlotOutcome(
                delay_s=float(delays[user]),
                energy_j=float(energies[user]),
                cost=float(costs[user]),
                penalty=pen,
                timed_out=bool(delays[user] > self.tasks[user].deadline_s),
                reward=reward(mean_cost, pen),
            ))
            device.local_freq_hz = by_user[user].local_freq_hz
            device.tx_power_dbm = by_user[user].tx_power_dbm

        self.slot += 1
        self._draw_slot()
        self.servers = [self._fresh_server() for _ in range(cfg.num_servers)]
        return outcomes
