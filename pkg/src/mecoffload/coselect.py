"""Capacity-constrained user/server co-selection.

Users rank servers by estimated offload cost, servers rank applicants by
estimated offload delay, and a deferred-acceptance loop matches them under
the per-server connection cap.  Accepted users are never bumped: a server
that rejects anyone is full, so the rejection list shrinks every round.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InfeasibleMatchingError(RuntimeError):
    """Raised when users remain but no server has capacity and fallback is off."""


@dataclass(frozen=True)
class SelectionInstance:
    """Per-(user, server) offload estimates plus capacity and cost weights.

    `delay_est` and `energy_est` are (N, M) arrays aligned with `user_ids`
    and `server_ids`.
    """

    user_ids: tuple[int, ...]
    server_ids: tuple[int, ...]
    delay_est: np.ndarray
    energy_est: np.ndarray
    z_max: int
    rho1: float
    rho2: float

    def __post_init__(self) -> None:
        n, m = len(self.user_ids), len(self.server_ids)
        if len(set(self.user_ids)) != n or len(set(self.server_ids)) != m:
            raise ValueError("ids must be unique")
        if self.delay_est.shape != (n, m) or self.energy_est.shape != (n, m):
            raise ValueError("estimate arrays must be shaped (N, M)")
        if np.any(self.delay_est < 0.0) or np.any(self.energy_est < 0.0):
            raise ValueError("estimates must be non-negative")
        if self.z_max < 1:
            raise ValueError("z_max must be positive")


@dataclass
class RoundLog:
    """Application/acceptance events of one matching round."""

    open_servers: list[int] = field(default_factory=list)
    applications: dict[int, int] = field(default_factory=dict)  # user -> server
    accepted: dict[int, int] = field(default_factory=dict)
    rejected: list[int] = field(default_factory=list)
    fallback: list[int] = field(default_factory=list)


@dataclass
class Matching:
    """Total user->server map plus per-server rosters.

    Users that could not be placed (capacity exhausted) map to None and run
    locally for the slot.
    """

    assignment: dict[int, int | None]
    rosters: dict[int, list[int]]
    rounds: list[RoundLog] | None = None


def user_selection_value(instance: SelectionInstance, user_idx: int,
                         server_idx: int) -> float:
    """The user-side ranking key: weighted offload delay + energy estimate."""
    return (instance.rho1 * float(instance.delay_est[user_idx, server_idx])
            + instance.rho2 * float(instance.energy_est[user_idx, server_idx]))


def server_selection_value(instance: SelectionInstance, user_idx: int,
                           server_idx: int) -> float:
    """The server-side ranking key: estimated total offload delay."""
    return float(instance.delay_est[user_idx, server_idx])


def co_select(instance: SelectionInstance, *, allow_local_fallback: bool = True,
              record_rounds: bool = False) -> Matching:
    """Match users to servers by iterated application/acceptance.

    Each round every still-rejected user applies to its best-valued server
    among those with remaining capacity; each server accepts applicants in
    ascending server-side value up to its remaining capacity and rejects the
    rest.  Ties break by id ascending on both sides.  If every server fills
    while users remain, the leftovers are assigned None (local fallback)
    unless fallback is disabled, in which case the instance is infeasible.
    """
    users = sorted(instance.user_ids)
    servers = sorted(instance.server_ids)
    uidx = {u: i for i, u in enumerate(instance.user_ids)}
    sidx = {s: j for j, s in enumerate(instance.server_ids)}

    assignment: dict[int, int | None] = {}
    rosters: dict[int, list[int]] = {s: [] for s in servers}
    rounds: list[RoundLog] = []

    unassigned = list(users)
    max_rounds = max(1, len(users) * len(servers))
    while unassigned:
        if len(rounds) > max_rounds:
            raise RuntimeError("co-selection failed to terminate")
        log = RoundLog()
        open_servers = [s for s in servers if len(rosters[s]) < instance.z_max]
        log.open_servers = list(open_servers)
        if not open_servers:
            if not allow_local_fallback:
                raise InfeasibleMatchingError(
                    f"{len(unassigned)} users left with every server full")
            for u in unassigned:
                assignment[u] = None
            log.fallback = list(unassigned)
            unassigned = []
            rounds.append(log)
            break

        applications: dict[int, list[int]] = {s: [] for s in open_servers}
        for u in unassigned:
            target = min(open_servers,
                         key=lambda s: (user_selection_value(instance, uidx[u],
                                                             sidx[s]), s))
            applications[target].append(u)
            log.applications[u] = target

        still_rejected: list[int] = []
        for s in open_servers:
            capacity = instance.z_max - len(rosters[s])
            ranked = sorted(applications[s],
                            key=lambda u: (server_selection_value(
                                instance, uidx[u], sidx[s]), u))
            for u in ranked[:capacity]:
                rosters[s].append(u)
                assignment[u] = s
                log.accepted[u] = s
            still_rejected.extend(ranked[capacity:])
        log.rejected = sorted(still_rejected)
        unassigned = sorted(still_rejected)
        rounds.append(log)

    for s in rosters:
        rosters[s].sort()
    return Matching(assignment=assignment, rosters=rosters,
                    rounds=rounds if record_rounds else None)


def instance_from_estimates(delay_est: np.ndarray, energy_est: np.ndarray,
                            z_max: int, rho1: float, rho2: float) -> SelectionInstance:
    """Build an instance with positional ids from (N, M) estimate arrays."""
    n, m = delay_est.shape
    return SelectionInstance(
        user_ids=tuple(range(n)),
        server_ids=tuple(range(m)),
        delay_est=np.asarray(delay_est, dtype=float),
        energy_est=np.asarray(energy_est, dtype=float),
        z_max=z_max,
        rho1=rho1,
        rho2=rho2,
    )


def assignment_array(matching: Matching, num_users: int) -> np.ndarray:
    """Dense user->server array with -1 for local-fallback users."""
    out = np.full(num_users, -1, dtype=int)
    for user, server in matching.assignment.items():
        if server is not None:
            out[user] = server
    return out


def matching_to_dict(matching: Matching) -> dict:
    doc = {
        "assignment": {str(u): s for u, s in sorted(matching.assignment.items())},
        "rosters": {str(s): r for s, r in sorted(matching.rosters.items())},
    }
    if matching.rounds is not None:
        doc["rounds"] = [
            {
                "open_servers": r.open_servers,
                "applications": {str(u): s for u, s in sorted(r.applications.items())},
                "accepted": {str(u): s for u, s in sorted(r.accepted.items())},
                "rejected": r.rejected,
                "fallback": r.fallback,
            }
            for r in matching.rounds
        ]
    return doc
