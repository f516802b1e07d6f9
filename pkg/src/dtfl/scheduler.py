"""Tier cost profiling and round-time-balancing tier assignment.

The server profiles every tier of the model once at a reference compute
rate. At runtime each client's observed round time, minus its communication
share, feeds an exponential moving average of its compute capability. Tier
estimates extrapolate that average through the profiled cost ratios, and the
assignment gives every client the deepest tier that stays under the best
achievable round makespan.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, ProtocolError
from .numerics import layer_train_flops
from .split_model import BlockStack, cut_width, stack_layers, validate_cuts

logger = logging.getLogger(__name__)

# observed round times at or below the comm estimate leave no usable compute
# signal; clamp the net to this floor instead of going non-positive
MIN_NET_SECONDS = 1e-6


@dataclass
class TierCost:
    """Per-tier reference costs, per batch where noted."""

    transfer_bytes_per_batch: float
    client_model_bytes: float
    client_seconds_per_batch: float
    server_seconds_per_batch: float


@dataclass
class TierProfileTable:
    """Reference cost profile for every tier plus the unsplit model."""

    tiers: list[TierCost]
    full_seconds_per_batch: float
    full_model_bytes: float
    batch_size: int

    def __post_init__(self):
        if not self.tiers:
            raise InputError("profile table needs at least one tier")
        client = [t.client_seconds_per_batch for t in self.tiers]
        server = [t.server_seconds_per_batch for t in self.tiers]
        if any(c <= 0 for c in client) or any(s <= 0 for s in server):
            raise InputError("profiled times must be positive")
        if any(b <= a for a, b in zip(client, client[1:])):
            raise InputError("client time must increase strictly with tier")
        if any(b >= a for a, b in zip(server, server[1:])):
            raise InputError("server time must decrease strictly with tier")

    @property
    def num_tiers(self) -> int:
        return len(self.tiers)

    def cost(self, tier: int) -> TierCost:
        if tier < 1 or tier > len(self.tiers):
            raise InputError(f"tier must lie in [1, {len(self.tiers)}], got {tier}")
        return self.tiers[tier - 1]


def profile_tiers(
    stack: BlockStack,
    cuts: list[int],
    batch_size: int,
    flops_per_second: float,
) -> TierProfileTable:
    """Analytically cost every tier of the stack at a reference rate.

    Costs count training flops (forward plus backward) of each side,
    including the auxiliary head on the client and the classifier on the
    server. Transfer covers cut activations and labels per batch; model
    bytes cover the client-side parameters downloaded and uploaded per
    round.
    """
    validate_cuts(cuts, len(stack.blocks))
    if batch_size < 1:
        raise InputError(f"batch size must be >= 1, got {batch_size}")
    if flops_per_second <= 0:
        raise InputError("reference rate must be positive")
    num_classes = stack.num_classes
    block_flops = [
        sum(layer_train_flops(l, batch_size) for l in block) for block in stack.blocks
    ]
    block_params = [
        sum(l.weights.size + l.bias.size for l in block) for block in stack.blocks
    ]
    classifier_flops = layer_train_flops(stack.classifier, batch_size)
    tiers: list[TierCost] = []
    for cut in cuts:
        width = cut_width(stack, cut)
        # the aux head is one linear layer: width -> num_classes
        aux_flops = 6 * batch_size * width * num_classes + 3 * batch_size * num_classes
        aux_params = width * num_classes + num_classes
        client_flops = sum(block_flops[:cut]) + aux_flops
        server_flops = sum(block_flops[cut:]) + classifier_flops
        transfer = batch_size * (width * 8 + 8)
        model_bytes = 8 * (sum(block_params[:cut]) + aux_params)
        tiers.append(
            TierCost(
                transfer_bytes_per_batch=float(transfer),
                client_model_bytes=float(model_bytes),
                client_seconds_per_batch=client_flops / flops_per_second,
                server_seconds_per_batch=server_flops / flops_per_second,
            )
        )
    full_flops = sum(block_flops) + classifier_flops
    full_params = sum(block_params) + stack.classifier.weights.size
    full_params += stack.classifier.bias.size
    return TierProfileTable(
        tiers=tiers,
        full_seconds_per_batch=full_flops / flops_per_second,
        full_model_bytes=float(8 * full_params),
        batch_size=batch_size,
    )


def comm_seconds(
    profile: TierProfileTable, tier: int, n_batches: int, bandwidth: float
) -> float:
    """Round communication time: activation uploads plus model down/upload."""
    if bandwidth <= 0:
        raise InputError(f"bandwidth must be positive, got {bandwidth}")
    cost = profile.cost(tier)
    payload = cost.transfer_bytes_per_batch * n_batches + 2.0 * cost.client_model_bytes
    return payload / bandwidth


@dataclass
class ClientHistory:
    """What the scheduler knows about one client.

    Net compute seconds per round are collected per tier; each tier keeps
    its own moving average. bandwidth holds the most recently reported link
    speed in bytes per second; n_batches is the client's fixed per-round
    batch count.
    """

    client_id: int
    bandwidth: float
    n_batches: int
    ema_alpha: float = 0.5
    observations: dict[int, list[float]] = field(default_factory=dict)
    ema: dict[int, float] = field(default_factory=dict)
    last_tier: int | None = None


def record_observation(
    hist: ClientHistory,
    profile: TierProfileTable,
    tier: int,
    measured_seconds: float,
    bandwidth: float,
) -> None:
    """Fold one measured round time into the client's compute average.

    bandwidth must be the link speed that was in effect during the measured
    round so the communication share subtracts out correctly; it is also
    retained as the client's latest known speed.
    """
    if measured_seconds <= 0:
        raise InputError(f"measured time must be positive, got {measured_seconds}")
    net = measured_seconds - comm_seconds(profile, tier, hist.n_batches, bandwidth)
    if net < MIN_NET_SECONDS:
        logger.warning(
            "client %d: measured time %.3g s at tier %d leaves no compute share, "
            "clamping",
            hist.client_id,
            measured_seconds,
            tier,
        )
        net = MIN_NET_SECONDS
    hist.observations.setdefault(tier, []).append(net)
    if tier in hist.ema:
        hist.ema[tier] = hist.ema_alpha * net + (1.0 - hist.ema_alpha) * hist.ema[tier]
    else:
        hist.ema[tier] = net
    hist.last_tier = tier
    hist.bandwidth = bandwidth


@dataclass
class TimeEstimate:
    """Predicted per-round times for one client at one tier."""

    client_s: float
    comm_s: float
    server_s: float

    @property
    def total(self) -> float:
        # client and server legs overlap only through the link
        return max(self.client_s + self.comm_s, self.server_s + self.comm_s)


def estimate_times(
    hist: ClientHistory, profile: TierProfileTable, tier: int
) -> TimeEstimate:
    """Predict the client's round time at a candidate tier.

    The compute estimate scales the client's averaged net time at its most
    recently observed tier by the profiled cost ratio between candidate and
    anchor. A client never seen before is assumed to match the reference
    rate.
    """
    cost = profile.cost(tier)
    comm = comm_seconds(profile, tier, hist.n_batches, hist.bandwidth)
    server = cost.server_seconds_per_batch * hist.n_batches
    if hist.last_tier is None:
        client = cost.client_seconds_per_batch * hist.n_batches
    else:
        anchor = profile.cost(hist.last_tier).client_seconds_per_batch
        client = (cost.client_seconds_per_batch / anchor) * hist.ema[hist.last_tier]
    return TimeEstimate(client_s=client, comm_s=comm, server_s=server)


@dataclass
class Assignment:
    """Tier choice per client plus the makespan those choices target."""

    tiers: dict[int, int]
    t_max: float


def minmax_assign(times: np.ndarray) -> tuple[np.ndarray, float]:
    """Assign tiers from a (clients, tiers) matrix of predicted times.

    The achievable makespan is the worst over clients of each client's best
    tier; every client then takes its deepest tier that stays within it.
    Uses only comparisons and selections, so the result is exact.
    """
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 2 or times.size == 0:
        raise InputError(f"need a non-empty 2-d time matrix, got shape {times.shape}")
    per_client_best = times.min(axis=1)
    t_max = float(per_client_best.max())
    feasible = times <= t_max
    # deepest feasible tier per row; every row has one by construction
    tiers = times.shape[1] - 1 - np.argmax(feasible[:, ::-1], axis=1)
    return tiers + 1, t_max


def schedule(
    histories: dict[int, ClientHistory],
    profile: TierProfileTable,
    participants: list[int] | None = None,
) -> Assignment:
    """Pick a tier for every participating client."""
    if participants is None:
        participants = list(histories)
    if not participants:
        raise ProtocolError("cannot schedule an empty participant set")
    ordered = [histories[c] for c in sorted(participants)]
    times = np.array(
        [
            [
                estimate_times(h, profile, tier).total
                for tier in range(1, profile.num_tiers + 1)
            ]
            for h in ordered
        ]
    )
    tiers, t_max = minmax_assign(times)
    return Assignment(
        tiers={h.client_id: int(t) for h, t in zip(ordered, tiers)},
        t_max=t_max,
    )
