"""Privacy defenses for the uploaded activations.

A distance-correlation penalty trains the client part to decorrelate its
output from the raw input, and patch shuffling permutes feature segments of
what goes over the wire.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, ShapeError

# below this the correlation is treated as exactly zero and the gradient
# clamps to zero (the statistic is not differentiable at 0)
DCOR_EPS = 1e-12


@dataclass
class PrivacyConfig:
    """How client updates protect the uploaded activations.

    alpha in [0,1] weights the decorrelation penalty against the task loss.
    client_alphas overrides alpha per client id.
    """

    alpha: float = 0.0
    patch_shuffle: bool = False
    patch_size: int = 1
    client_alphas: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        for value in [self.alpha, *self.client_alphas.values()]:
            if not 0.0 <= value <= 1.0:
                raise InputError(f"alpha must lie in [0,1], got {value}")
        if self.patch_size < 1:
            raise InputError(f"patch size must be >= 1, got {self.patch_size}")

    def alpha_for(self, client_id: int) -> float:
        return self.client_alphas.get(client_id, self.alpha)


def _pairwise_distances(x: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", x, x)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def _double_center(m: np.ndarray) -> np.ndarray:
    return m - m.mean(axis=0) - m.mean(axis=1)[:, None] + m.mean()


def _dcor_parts(x: np.ndarray, z: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.ndim != 2 or z.ndim != 2:
        raise ShapeError("dcor expects 2-d arrays")
    if x.shape[0] != z.shape[0]:
        raise ShapeError(f"{x.shape[0]} rows vs {z.shape[0]} rows")
    if x.shape[0] < 2:
        raise InputError("dcor needs at least 2 samples")
    b = _pairwise_distances(z)
    a_c = _double_center(_pairwise_distances(x))
    b_c = _double_center(b)
    cov = float(np.mean(a_c * b_c))
    var_x = float(np.mean(a_c * a_c))
    var_z = float(np.mean(b_c * b_c))
    if var_x <= 0.0 or var_z <= 0.0:
        value = 0.0
    else:
        value = float(np.sqrt(max(cov, 0.0) / np.sqrt(var_x * var_z)))
    return value, b, a_c, b_c, cov, var_x, var_z


def dcor(x: np.ndarray, z: np.ndarray) -> float:
    """Distance correlation between row-paired samples, in [0, 1].

    Uses the biased pairwise-distance estimator; either argument being
    constant gives 0 by convention.
    """
    return _dcor_parts(x, z)[0]


def dcor_backward(x: np.ndarray, z: np.ndarray, grad_scale: float = 1.0) -> np.ndarray:
    """Gradient of grad_scale * dcor(x, z) with respect to z.

    Zero wherever the statistic is pinned at 0 (constant inputs, duplicate
    rows contribute nothing through their zero distances).
    """
    value, b, a_c, b_c, cov, var_x, var_z = _dcor_parts(x, z)
    z = np.asarray(z, dtype=np.float64)
    if value < DCOR_EPS:
        return np.zeros_like(z)
    n = z.shape[0]
    scale = np.sqrt(var_x * var_z)
    # d(dcor)/d(b_kl), already routed through the double-centering
    grad_b = (a_c - (cov / var_z) * b_c) / (2.0 * value * n * n * scale)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(b > 0.0, 2.0 * grad_b / b, 0.0)
    grad_z = w.sum(axis=1)[:, None] * z - w @ z
    return grad_scale * grad_z


def private_client_loss(task_loss: float, x: np.ndarray, z: np.ndarray, alpha: float) -> float:
    """Blend of task loss and input-activation correlation penalty."""
    if not 0.0 <= alpha <= 1.0:
        raise InputError(f"alpha must lie in [0,1], got {alpha}")
    if alpha == 0.0:
        return float(task_loss)
    return (1.0 - alpha) * float(task_loss) + alpha * dcor(x, z)


def patch_shuffle(z: np.ndarray, patch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Permute contiguous feature segments independently per sample.

    A trailing segment shorter than patch_size stays in place. Each row
    keeps its values as a multiset.
    """
    if patch_size < 1:
        raise InputError(f"patch size must be >= 1, got {patch_size}")
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError("patch_shuffle expects a 2-d array")
    rows, width = z.shape
    num_patches = width // patch_size
    if rows == 0 or num_patches <= 1:
        return z.copy()
    body = num_patches * patch_size
    perms = np.argsort(rng.random((rows, num_patches)), axis=1)
    shuffled = np.take_along_axis(
        z[:, :body].reshape(rows, num_patches, patch_size),
        perms[:, :, None],
        axis=1,
    ).reshape(rows, body)
    return np.concatenate([shuffled, z[:, body:]], axis=1)
