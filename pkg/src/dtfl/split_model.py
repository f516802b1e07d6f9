"""Splitting a layered model into client and server halves per tier.

A model is a stack of blocks followed by a classifier. A tier picks a cut
point: blocks up to the cut run on the client, the rest plus the classifier
run on the server, and a small auxiliary head lets the client train its half
against the labels without waiting for server gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, ShapeError
from .numerics import (
    Activation,
    DenseLayer,
    clone_layer,
    dense_forward,
    init_dense,
    sequence_forward,
)

Block = list[DenseLayer]


@dataclass
class BlockStack:
    """Full model: feature blocks then a linear classifier producing logits."""

    blocks: list[Block]
    classifier: DenseLayer

    @property
    def input_dim(self) -> int:
        return self.blocks[0][0].in_dim

    @property
    def num_classes(self) -> int:
        return self.classifier.out_dim


def build_stack(
    input_dim: int,
    block_widths: list[int],
    num_classes: int,
    rng: np.random.Generator,
) -> BlockStack:
    """Build a stack of single-layer relu blocks plus an identity classifier."""
    if not block_widths:
        raise InputError("need at least one block")
    blocks: list[Block] = []
    prev = input_dim
    for width in block_widths:
        blocks.append([init_dense(prev, width, Activation.RELU, rng)])
        prev = width
    classifier = init_dense(prev, num_classes, Activation.IDENTITY, rng)
    return BlockStack(blocks, classifier)


def default_cuts(num_tiers: int) -> list[int]:
    """Tier m cuts after block m."""
    if num_tiers < 1:
        raise InputError("need at least one tier")
    return list(range(1, num_tiers + 1))


def validate_cuts(cuts: list[int], num_blocks: int) -> None:
    if not cuts:
        raise InputError("cuts must be non-empty")
    if any(c < 1 or c > num_blocks for c in cuts):
        raise InputError(f"cuts must lie in [1, {num_blocks}], got {cuts}")
    if any(b <= a for a, b in zip(cuts, cuts[1:])):
        raise InputError(f"cuts must be strictly increasing, got {cuts}")


def cut_width(stack: BlockStack, cut: int) -> int:
    """Feature width flowing across the network at the given cut point."""
    return stack.blocks[cut - 1][-1].out_dim


def make_aux_head(width: int, num_classes: int, rng: np.random.Generator) -> DenseLayer:
    """Single linear layer mapping cut features to class logits."""
    return init_dense(width, num_classes, Activation.IDENTITY, rng)


@dataclass
class TierSplit:
    """A value snapshot of the model split at one tier.

    Mutating a split never touches the stack it came from; changes flow back
    only through explicit aggregation.
    """

    tier: int
    cut: int
    client_blocks: list[Block]
    aux_head: DenseLayer
    server_blocks: list[Block]
    classifier: DenseLayer


def split(
    stack: BlockStack,
    tier: int,
    cuts: list[int],
    aux_head: DenseLayer | None = None,
    rng: np.random.Generator | None = None,
) -> TierSplit:
    """Snapshot the stack split at the tier's cut point.

    Pass an existing aux_head to reuse trained head parameters; otherwise a
    fresh head is drawn from rng.
    """
    validate_cuts(cuts, len(stack.blocks))
    if tier < 1 or tier > len(cuts):
        raise InputError(f"tier must lie in [1, {len(cuts)}], got {tier}")
    cut = cuts[tier - 1]
    width = cut_width(stack, cut)
    if aux_head is None:
        if rng is None:
            raise InputError("need an rng to initialize a fresh aux head")
        aux_head = make_aux_head(width, stack.num_classes, rng)
    else:
        if aux_head.in_dim != width:
            raise ShapeError(
                f"aux head expects width {aux_head.in_dim}, cut provides {width}"
            )
        aux_head = clone_layer(aux_head)
    client = [[clone_layer(l) for l in block] for block in stack.blocks[:cut]]
    server = [[clone_layer(l) for l in block] for block in stack.blocks[cut:]]
    return TierSplit(
        tier=tier,
        cut=cut,
        client_blocks=client,
        aux_head=aux_head,
        server_blocks=server,
        classifier=clone_layer(stack.classifier),
    )


def merge_split(part: TierSplit) -> BlockStack:
    """Reassemble a full stack from a split's current parameters."""
    blocks = [[clone_layer(l) for l in block] for block in part.client_blocks]
    blocks += [[clone_layer(l) for l in block] for block in part.server_blocks]
    return BlockStack(blocks, clone_layer(part.classifier))


def client_layers(part: TierSplit) -> list[DenseLayer]:
    """Client-side trainable layers, aux head excluded."""
    return [l for block in part.client_blocks for l in block]


def server_layers(part: TierSplit) -> list[DenseLayer]:
    """Server-side trainable layers, classifier included last."""
    return [l for block in part.server_blocks for l in block] + [part.classifier]


def stack_layers(stack: BlockStack) -> list[DenseLayer]:
    return [l for block in stack.blocks for l in block] + [stack.classifier]


def forward_client(part: TierSplit, x: np.ndarray) -> np.ndarray:
    """Run the client blocks, producing the cut activations."""
    return sequence_forward(client_layers(part), x)


def forward_aux(part: TierSplit, z: np.ndarray) -> np.ndarray:
    """Aux head logits from cut activations."""
    return dense_forward(part.aux_head, z)


def forward_server(part: TierSplit, z: np.ndarray) -> np.ndarray:
    """Server blocks plus classifier, from cut activations to logits."""
    return sequence_forward(server_layers(part), z)


def forward_stack(stack: BlockStack, x: np.ndarray) -> np.ndarray:
    """Full unsplit forward pass to logits."""
    return sequence_forward(stack_layers(stack), x)
