"""One federated round end to end.

Clients train their model part against a local auxiliary loss, upload the
cut activations, the server trains its part on those uploads, and the
resulting full models are averaged into the next global model. Client and
server updates are decoupled: no server gradient ever reaches a client.
"""

from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Partition, iterate_batches
from .errors import InputError, ProtocolError, ShapeError
from .numerics import (
    DenseLayer,
    OptimKind,
    OptimState,
    clone_layer,
    optimizer_step,
    sequence_backward,
    sequence_forward,
    sequence_params,
    softmax_xent,
)
from .privacy import PrivacyConfig, dcor, dcor_backward, patch_shuffle
from .rng import derive_rng
from .simulator import FULL_MODEL_TIER, ResourceSimulator, RoundReport
from .split_model import (
    BlockStack,
    TierSplit,
    client_layers,
    forward_aux,
    forward_client,
    merge_split,
    server_layers,
    split,
    stack_layers,
)

logger = logging.getLogger(__name__)


class AggregationMode(enum.Enum):
    UNIFORM = "uniform"
    DATA_WEIGHTED = "data_weighted"


@dataclass
class GlobalModelState:
    """The canonical model plus the per-tier auxiliary heads.

    Splits handed to clients are value snapshots; only aggregate() writes
    back. Aux heads are created lazily from a stream keyed by tier, so
    their initialization does not depend on which round first uses a tier.
    """

    stack: BlockStack
    cuts: list[int]
    seed: int
    round_index: int = 0
    aux_heads: dict[int, DenseLayer] = field(default_factory=dict)

    def make_split(self, tier: int) -> TierSplit:
        part = split(
            self.stack,
            tier,
            self.cuts,
            aux_head=self.aux_heads.get(tier),
            rng=derive_rng(self.seed, "aux-head", tier),
        )
        if tier not in self.aux_heads:
            self.aux_heads[tier] = clone_layer(part.aux_head)
        return part


@dataclass
class ClientUpdateResult:
    """What one client sends back: activations, labels, trained parts."""

    client_id: int
    tier: int
    z_batches: list[np.ndarray]
    label_batches: list[np.ndarray]
    part: TierSplit
    local_loss: float
    n_samples: int


def client_update(
    client_id: int,
    part: TierSplit,
    batches: list[tuple[np.ndarray, np.ndarray]],
    optim: OptimState,
    epochs: int = 1,
    privacy: PrivacyConfig | None = None,
    patch_rng: np.random.Generator | None = None,
) -> ClientUpdateResult:
    """Train the client part against its auxiliary head.

    Per batch: forward to the cut, auxiliary logits, blended local loss,
    backward through head and client blocks, one optimizer step. The
    activations retained for upload are the pre-step forward values, patch
    shuffled when the privacy config asks for it.
    """
    if epochs < 1:
        raise InputError(f"epochs must be >= 1, got {epochs}")
    alpha = privacy.alpha_for(client_id) if privacy else 0.0
    shuffling = privacy is not None and privacy.patch_shuffle
    if shuffling and patch_rng is None:
        raise InputError("patch shuffling needs an rng")
    if not batches:
        logger.warning("client %d: empty partition, skipping update", client_id)
        return ClientUpdateResult(client_id, part.tier, [], [], part, 0.0, 0)
    params = sequence_params(client_layers(part)) + sequence_params([part.aux_head])
    z_batches: list[np.ndarray] = []
    label_batches: list[np.ndarray] = []
    losses: list[float] = []
    for _ in range(epochs):
        for x, y in batches:
            z = forward_client(part, x)
            logits = forward_aux(part, z)
            task_loss, dlogits = softmax_xent(logits, y)
            loss = task_loss
            if alpha > 0.0:
                dlogits = (1.0 - alpha) * dlogits
            dz, aux_grads = sequence_backward([part.aux_head], dlogits)
            if alpha > 0.0:
                # a single-sample batch has no pairwise distances; its
                # penalty is zero by convention
                penalty = dcor(x, z) if len(y) >= 2 else 0.0
                loss = (1.0 - alpha) * task_loss + alpha * penalty
                if penalty > 0.0:
                    dz = dz + dcor_backward(x, z, grad_scale=alpha)
            _, block_grads = sequence_backward(client_layers(part), dz)
            upload = patch_shuffle(z, privacy.patch_size, patch_rng) if shuffling else z
            z_batches.append(upload)
            label_batches.append(y)
            losses.append(loss)
            optimizer_step(optim, params, block_grads + aux_grads)
    return ClientUpdateResult(
        client_id=client_id,
        tier=part.tier,
        z_batches=z_batches,
        label_batches=label_batches,
        part=part,
        local_loss=float(np.mean(losses)),
        n_samples=sum(len(y) for _, y in batches),
    )


def server_update(
    part: TierSplit,
    z_batches: list[np.ndarray],
    label_batches: list[np.ndarray],
    optim: OptimState,
) -> float:
    """Train the server part on uploaded activations, one step per batch.

    Returns the mean server-side loss. The uploads are detached values, so
    nothing here can influence the client part.
    """
    if len(z_batches) != len(label_batches):
        raise ShapeError(
            f"{len(z_batches)} activation batches vs {len(label_batches)} label batches"
        )
    layers = server_layers(part)
    params = sequence_params(layers)
    losses = []
    for z, y in zip(z_batches, label_batches):
        logits = sequence_forward(layers, z)
        loss, dlogits = softmax_xent(logits, y)
        _, grads = sequence_backward(layers, dlogits)
        optimizer_step(optim, params, grads)
        losses.append(loss)
    return float(np.mean(losses)) if losses else 0.0


@dataclass
class Contribution:
    """One client's aggregation payload: its full model after the round."""

    client_id: int
    tier: int
    stack: BlockStack
    aux_head: DenseLayer | None
    n_samples: int


def _weights(policy: AggregationMode, sample_counts: list[int]) -> np.ndarray:
    k = len(sample_counts)
    if policy is AggregationMode.UNIFORM:
        return np.full(k, 1.0 / k)
    total = float(sum(sample_counts))
    if total <= 0:
        raise ProtocolError("data-weighted aggregation with no samples")
    return np.array(sample_counts, dtype=np.float64) / total


def average_layers(layers: list[DenseLayer], weights: np.ndarray) -> DenseLayer:
    first = layers[0]
    for layer in layers[1:]:
        if (
            layer.weights.shape != first.weights.shape
            or layer.activation is not first.activation
        ):
            raise ProtocolError("cannot average layers of different shapes")
    weights_sum = sum(w * l.weights for w, l in zip(weights, layers))
    bias_sum = sum(w * l.bias for w, l in zip(weights, layers))
    return DenseLayer(weights_sum, bias_sum, first.activation)


def average_stacks(stacks: list[BlockStack], weights: np.ndarray) -> BlockStack:
    """Blockwise weighted average of structurally identical models."""
    first = stacks[0]
    for other in stacks[1:]:
        if len(other.blocks) != len(first.blocks) or any(
            len(a) != len(b) for a, b in zip(other.blocks, first.blocks)
        ):
            raise ProtocolError("missing block: models do not align")
    blocks = [
        [
            average_layers([s.blocks[bi][li] for s in stacks], weights)
            for li in range(len(first.blocks[bi]))
        ]
        for bi in range(len(first.blocks))
    ]
    classifier = average_layers([s.classifier for s in stacks], weights)
    return BlockStack(blocks, classifier)


def aggregate(
    state: GlobalModelState,
    contributions: list[Contribution],
    policy: AggregationMode,
) -> None:
    """Fold client results into the global model and per-tier aux heads.

    Aux heads average only among clients that shared the tier this round,
    with weights renormalized inside the tier; untouched tiers keep their
    heads.
    """
    if not contributions:
        raise ProtocolError("empty round: nothing to aggregate")
    weights = _weights(policy, [c.n_samples for c in contributions])
    state.stack = average_stacks([c.stack for c in contributions], weights)
    by_tier: dict[int, list[tuple[DenseLayer, float]]] = {}
    for contrib, weight in zip(contributions, weights):
        if contrib.aux_head is not None:
            by_tier.setdefault(contrib.tier, []).append((contrib.aux_head, weight))
    for tier, pairs in by_tier.items():
        total = sum(w for _, w in pairs)
        state.aux_heads[tier] = average_layers(
            [head for head, _ in pairs],
            np.array([w / total for _, w in pairs]),
        )
    state.round_index += 1


def evaluate(stack: BlockStack, dataset: Dataset) -> tuple[float, float]:
    """Full-model cross-entropy and accuracy over a dataset."""
    logits = sequence_forward(stack_layers(stack), dataset.features)
    loss, _ = softmax_xent(logits, dataset.labels)
    accuracy = float(np.mean(np.argmax(logits, axis=1) == dataset.labels))
    for layer in stack_layers(stack):
        layer.cache = None
    return loss, accuracy


@dataclass
class RoundContext:
    """Everything a round needs besides the model and the assignment."""

    dataset: Dataset
    partition: Partition
    batch_size: int
    local_epochs: int
    optim_kind: OptimKind
    learning_rate: float
    aggregation: AggregationMode
    privacy: PrivacyConfig | None = None
    test_set: Dataset | None = None
    jobs: int = 1

    def make_optim(self) -> OptimState:
        return OptimState(self.optim_kind, self.learning_rate)

    def round_batches(self, cid: int, seed: int, round_index: int):
        rng = derive_rng(seed, "batches", round_index, cid)
        return iterate_batches(self.dataset, self.partition[cid], self.batch_size, rng)

    def n_batches(self, cid: int) -> int:
        per_epoch = math.ceil(len(self.partition[cid]) / self.batch_size)
        return per_epoch * self.local_epochs


def _fan_out(fn, ids: list[int], jobs: int) -> list:
    if jobs <= 1 or len(ids) <= 1:
        return [fn(c) for c in ids]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, ids))


def _active_participants(tiers: dict[int, int], partition: Partition) -> list[int]:
    if not tiers:
        raise ProtocolError("empty round: no participants")
    active = []
    for cid in sorted(tiers):
        if len(partition[cid]) == 0:
            logger.warning("client %d has no data, skipping this round", cid)
            continue
        active.append(cid)
    if not active:
        raise ProtocolError("empty round: no participant has data")
    return active


def _finish_round(
    state: GlobalModelState,
    contributions: list[Contribution],
    ctx: RoundContext,
    sim: ResourceSimulator,
    round_index: int,
    tiers: dict[int, int],
) -> RoundReport:
    contributions.sort(key=lambda c: c.client_id)
    aggregate(state, contributions, ctx.aggregation)
    n_batches = {c.client_id: ctx.n_batches(c.client_id) for c in contributions}
    report = sim.advance_round(round_index, tiers, n_batches)
    report.train_loss, report.train_accuracy = evaluate(state.stack, ctx.dataset)
    if ctx.test_set is not None and len(ctx.test_set) > 0:
        _, report.test_accuracy = evaluate(state.stack, ctx.test_set)
    return report


def run_round(
    state: GlobalModelState,
    tiers: dict[int, int],
    sim: ResourceSimulator,
    ctx: RoundContext,
    round_index: int,
) -> RoundReport:
    """Execute one split-training round for the assigned clients.

    Client tasks are independent and may run on a worker pool; results are
    re-ordered by client id before aggregation so parallelism cannot change
    the outcome.
    """
    active = _active_participants(tiers, ctx.partition)
    splits = {cid: state.make_split(tiers[cid]) for cid in active}

    def task(cid: int) -> ClientUpdateResult:
        patch_rng = None
        if ctx.privacy is not None and ctx.privacy.patch_shuffle:
            patch_rng = derive_rng(state.seed, "patch", round_index, cid)
        result = client_update(
            cid,
            splits[cid],
            ctx.round_batches(cid, state.seed, round_index),
            ctx.make_optim(),
            ctx.local_epochs,
            ctx.privacy,
            patch_rng,
        )
        server_update(
            result.part, result.z_batches, result.label_batches, ctx.make_optim()
        )
        return result

    results = _fan_out(task, active, ctx.jobs)
    contributions = [
        Contribution(
            client_id=r.client_id,
            tier=r.tier,
            stack=merge_split(r.part),
            aux_head=r.part.aux_head,
            n_samples=r.n_samples,
        )
        for r in results
    ]
    active_tiers = {cid: tiers[cid] for cid in active}
    return _finish_round(state, contributions, ctx, sim, round_index, active_tiers)


def fedavg_round(
    state: GlobalModelState,
    participants: list[int],
    sim: ResourceSimulator,
    ctx: RoundContext,
    round_index: int,
) -> RoundReport:
    """Baseline round: every client trains the entire model, no split."""
    tiers = {cid: FULL_MODEL_TIER for cid in participants}
    active = _active_participants(tiers, ctx.partition)

    def task(cid: int) -> Contribution:
        model = BlockStack(
            [[clone_layer(l) for l in block] for block in state.stack.blocks],
            clone_layer(state.stack.classifier),
        )
        layers = stack_layers(model)
        params = sequence_params(layers)
        optim = ctx.make_optim()
        batches = ctx.round_batches(cid, state.seed, round_index)
        for _ in range(ctx.local_epochs):
            for x, y in batches:
                logits = sequence_forward(layers, x)
                _, dlogits = softmax_xent(logits, y)
                _, grads = sequence_backward(layers, dlogits)
                optimizer_step(optim, params, grads)
        return Contribution(
            client_id=cid,
            tier=FULL_MODEL_TIER,
            stack=model,
            aux_head=None,
            n_samples=len(ctx.partition[cid]),
        )

    contributions = _fan_out(task, active, ctx.jobs)
    active_tiers = {cid: FULL_MODEL_TIER for cid in active}
    return _finish_round(state, contributions, ctx, sim, round_index, active_tiers)
