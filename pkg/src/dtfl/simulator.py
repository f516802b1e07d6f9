"""Virtual-clock resource simulation for heterogeneous clients.

Client compute, link transfer, and server compute times are computed
analytically from the tier profile, each client's resources, and optional
multiplicative noise. No wall-clock measurement is involved, so runs are
reproducible to the byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .rng import derive_rng
from .scheduler import TierProfileTable, comm_seconds

MBPS = 125_000.0  # bytes per second in one megabit per second

# tier index meaning "no split": the client trains the whole model
FULL_MODEL_TIER = 0


@dataclass(frozen=True)
class ResourceProfile:
    """A client's relative compute speed and link bandwidth (bytes/s)."""

    cpu_factor: float
    bandwidth: float

    def __post_init__(self):
        if self.cpu_factor <= 0 or self.bandwidth <= 0:
            raise InputError("cpu_factor and bandwidth must be positive")


def default_profile_pool() -> list[ResourceProfile]:
    """Five device classes spanning fast workstations to weak edge nodes."""
    return [
        ResourceProfile(4.0, 100 * MBPS),
        ResourceProfile(2.0, 30 * MBPS),
        ResourceProfile(1.0, 30 * MBPS),
        ResourceProfile(0.2, 30 * MBPS),
        ResourceProfile(0.1, 10 * MBPS),
    ]


@dataclass(frozen=True)
class ChurnPolicy:
    """Every `period` rounds, a `fraction` of clients redraw their profile."""

    period: int
    fraction: float
    pool: tuple[ResourceProfile, ...]

    def __post_init__(self):
        if self.period < 1:
            raise InputError(f"churn period must be >= 1, got {self.period}")
        if not 0.0 <= self.fraction <= 1.0:
            raise InputError(f"churn fraction must lie in [0,1], got {self.fraction}")
        if not self.pool:
            raise InputError("churn pool must be non-empty")


@dataclass
class ClientRoundTime:
    """Simulated per-round times for one client, all in seconds."""

    client_id: int
    tier: int
    client_s: float
    comm_s: float
    server_s: float
    bandwidth: float

    @property
    def total(self) -> float:
        return max(self.client_s + self.comm_s, self.server_s + self.comm_s)


@dataclass
class RoundReport:
    """Everything observable about one completed round."""

    round_index: int
    times: list[ClientRoundTime]
    makespan: float
    cumulative_seconds: float
    train_loss: float | None = None
    test_accuracy: float | None = None
    train_accuracy: float | None = None


def simulate_client_compute(
    profile: TierProfileTable,
    tier: int,
    n_batches: int,
    cpu_factor: float,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> float:
    """Client-side compute seconds for one round.

    Reference per-batch time scaled by batch count and inverse cpu speed,
    with optional lognormal jitter.
    """
    if n_batches < 0 or cpu_factor <= 0:
        raise InputError("batch count must be >= 0 and cpu_factor positive")
    if tier == FULL_MODEL_TIER:
        per_batch = profile.full_seconds_per_batch
    else:
        per_batch = profile.cost(tier).client_seconds_per_batch
    seconds = per_batch * n_batches / cpu_factor
    if noise_sigma > 0.0:
        if rng is None:
            raise InputError("noise requires an rng")
        seconds *= float(np.exp(noise_sigma * rng.standard_normal()))
    return seconds


def simulate_comm(
    profile: TierProfileTable, tier: int, n_batches: int, bandwidth: float
) -> float:
    """Link seconds for one round: activations and labels per batch plus
    model download and upload. Deterministic."""
    if tier == FULL_MODEL_TIER:
        if bandwidth <= 0:
            raise InputError(f"bandwidth must be positive, got {bandwidth}")
        return 2.0 * profile.full_model_bytes / bandwidth
    return comm_seconds(profile, tier, n_batches, bandwidth)


def simulate_server_compute(
    profile: TierProfileTable, tier: int, n_batches: int
) -> float:
    """Server-side compute seconds for one round, at the reference rate."""
    if tier == FULL_MODEL_TIER:
        return 0.0
    return profile.cost(tier).server_seconds_per_batch * n_batches


@dataclass
class ResourceSimulator:
    """Owns per-client resources and the virtual clock.

    advance_round turns a tier assignment into per-client times, moves the
    clock by the round makespan, and applies profile churn on schedule.
    Noise and churn draw from streams keyed by round and client, so
    trajectories are identical across scheduling modes under one seed.
    """

    table: TierProfileTable
    profiles: dict[int, ResourceProfile]
    seed: int
    churn: ChurnPolicy | None = None
    noise_sigma: float = 0.0
    clock: float = field(default=0.0, init=False)

    def bandwidth(self, client_id: int) -> float:
        return self.profiles[client_id].bandwidth

    def advance_round(
        self, round_index: int, tiers: dict[int, int], n_batches: dict[int, int]
    ) -> RoundReport:
        """Simulate one round for the assigned clients.

        tiers maps client id to its assigned tier (FULL_MODEL_TIER for
        unsplit training). Churn fires after the round completes, so the
        profiles seen by the next scheduling decision are already current.
        """
        if not tiers:
            raise InputError("cannot simulate an empty round")
        times = []
        for client_id in sorted(tiers):
            tier = tiers[client_id]
            prof = self.profiles[client_id]
            nb = n_batches[client_id]
            rng = None
            if self.noise_sigma > 0.0:
                rng = derive_rng(self.seed, "noise", round_index, client_id)
            times.append(
                ClientRoundTime(
                    client_id=client_id,
                    tier=tier,
                    client_s=simulate_client_compute(
                        self.table, tier, nb, prof.cpu_factor, self.noise_sigma, rng
                    ),
                    comm_s=simulate_comm(self.table, tier, nb, prof.bandwidth),
                    server_s=simulate_server_compute(self.table, tier, nb),
                    bandwidth=prof.bandwidth,
                )
            )
        makespan = max(t.total for t in times)
        self.clock += makespan
        self._apply_churn(round_index)
        return RoundReport(
            round_index=round_index,
            times=times,
            makespan=makespan,
            cumulative_seconds=self.clock,
        )

    def _apply_churn(self, round_index: int) -> None:
        if self.churn is None or self.churn.fraction == 0.0:
            return
        if (round_index + 1) % self.churn.period != 0:
            return
        rng = derive_rng(self.seed, "churn", round_index)
        ids = sorted(self.profiles)
        count = max(1, round(self.churn.fraction * len(ids)))
        chosen = rng.choice(len(ids), size=count, replace=False)
        for pos in sorted(chosen):
            pick = int(rng.integers(len(self.churn.pool)))
            self.profiles[ids[pos]] = self.churn.pool[pick]
