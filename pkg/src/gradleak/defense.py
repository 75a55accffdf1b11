"""Gradient-identical artifact batches for batches without first-layer exclusivity.

Perturbations ``Delta`` (one column per sample, stacked sample-major as a
vector of length ``M * d0``) must satisfy ``W_0 Delta = 0`` so every hidden
activation is unchanged, and ``sum_m alpha_m Delta_m^T = 0`` so the
first-layer weight gradient is unchanged. ``alpha_m`` is the layer-1
backprop vector of sample ``m``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateWeights, EmptySubspace, PreconditionFailed, ShapeMismatch
from .exclusivity import exan_counts
from .linalg import DEFAULT_RANK_TOL, null_space_basis, numerical_rank, pinv
from .model import (
    ActivationPattern,
    Batch,
    FcnParams,
    average_gradient,
    backprop_vectors,
    forward_trace,
    loss_vectors,
)


@dataclass
class PerturbationSubspace:
    basis: np.ndarray  # (M * d0, dim), orthonormal columns
    p0: np.ndarray  # I - W0^+ W0
    a_matrix: np.ndarray  # (d1, M), column m = alpha_m
    batch_size: int
    input_dim: int

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def as_perturbation(self, v: np.ndarray) -> np.ndarray:
        """Reshape a stacked vector to per-sample rows, shape (M, d0)."""
        return np.asarray(v).reshape(self.batch_size, self.input_dim)


@dataclass
class BoundReport:
    eta: np.ndarray  # (M, d0 - rank W0)
    lower_bound: float
    achieved_norm: float

    def to_dict(self) -> dict:
        return {
            "eta": self.eta.tolist(),
            "lower_bound": self.lower_bound,
            "achieved_norm": self.achieved_norm,
        }


def alpha_matrix(params: FcnParams, batch: Batch) -> np.ndarray:
    """Columns are the layer-1 backprop vectors of the batch samples."""
    logits, _, masks = forward_trace(params, batch.inputs)
    g = loss_vectors(logits, batch.labels)
    deltas = backprop_vectors(params, masks, g)
    return deltas[1].T.copy()


def _check_preconditions(params: FcnParams, batch: Batch) -> None:
    if params.depth < 1:
        raise PreconditionFailed("model needs at least one hidden layer")
    d0, d1 = params.dims[0], params.dims[1]
    W0 = params.weights[0]
    if not np.any(W0):
        raise DegenerateWeights("W0 is the zero matrix")
    if not d1 < d0:
        raise PreconditionFailed(f"need d1 < d0, got d1={d1}, d0={d0}")
    M = batch.size
    if not M > d1:
        raise PreconditionFailed(f"need M > d1, got M={M}, d1={d1}")
    if params.first_layer_relu:
        _, _, masks = forward_trace(params, batch.inputs)
        counts = exan_counts(ActivationPattern(masks[:1])).counts[:, 0]
        if np.any(counts > 0):
            raise PreconditionFailed(
                f"first-layer exclusivity present (ExAN counts {counts.tolist()})"
            )


def stacked_operator(W0: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Matrix of the map ``vec(Delta) -> (W0 Delta_m for all m, A Delta^T)``."""
    d1, d0 = W0.shape
    M = A.shape[1]
    top = np.kron(np.eye(M), W0)
    bottom = np.kron(A, np.eye(d0))
    return np.vstack([top, bottom])


def perturbation_subspace(params: FcnParams, batch: Batch, rank_tol: float = DEFAULT_RANK_TOL) -> PerturbationSubspace:
    _check_preconditions(params, batch)
    W0 = params.weights[0]
    A = alpha_matrix(params, batch)
    basis = null_space_basis(stacked_operator(W0, A), rank_tol)
    p0 = np.eye(W0.shape[1]) - pinv(W0, rank_tol) @ W0
    return PerturbationSubspace(basis, p0, A, batch.size, params.input_dim)


def projection_route(subspace: PerturbationSubspace, q: np.ndarray, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Map an arbitrary ``q`` of shape (d0, M) into the subspace by projections.

    ``P0 q (I - A^+ A)`` solves both defining equations; it is the
    cross-check for the null-space construction. Returns shape (M, d0).
    """
    A = subspace.a_matrix
    M = A.shape[1]
    proj = np.eye(M) - pinv(A, rank_tol) @ A
    return (subspace.p0 @ q @ proj).T


def _box_scale(x: np.ndarray, delta: np.ndarray) -> float:
    up = delta > 0
    down = delta < 0
    limits = np.concatenate([(1.0 - x[up]) / delta[up], (-1.0 - x[down]) / delta[down]])
    return float(max(limits.min(), 0.0)) if limits.size else 0.0


def sample_artifact_batch(
    batch: Batch,
    subspace: PerturbationSubspace,
    rng_seed: int,
    box: bool = True,
    coefficients: np.ndarray | None = None,
) -> Batch:
    """Add a random perturbation from the subspace to ``batch``.

    With ``box`` the perturbation is scaled by the largest factor that keeps
    every coordinate in ``[-1, 1]``.
    """
    if subspace.dim == 0:
        raise EmptySubspace("perturbation subspace is trivial")
    if batch.size != subspace.batch_size or batch.inputs.shape[1] != subspace.input_dim:
        raise ShapeMismatch("batch does not match the subspace")
    if coefficients is None:
        coefficients = np.random.default_rng(rng_seed).standard_normal(subspace.dim)
    delta = subspace.as_perturbation(subspace.basis @ coefficients)
    x = batch.inputs
    if box:
        t = _box_scale(x, delta)
        out = np.clip(x + t * delta, -1.0, 1.0)
    else:
        out = x + delta
    return Batch(out, batch.labels.copy(), batch.raster_shape)


def perturbation_lower_bound(params: FcnParams, batch: Batch, rank_tol: float = DEFAULT_RANK_TOL) -> BoundReport:
    """Closed-form lower bound on the largest box-feasible perturbation norm.

    Computes ``sum_i |eta_i|^2 - Tr(A^+ A Y^T Y)`` and, independently,
    ``|P1 q*|^2`` with ``q* = eta_1 (+) ... (+) eta_M``; the two must agree.
    """
    _check_preconditions(params, batch)
    W0 = params.weights[0]
    A = alpha_matrix(params, batch)
    d0 = W0.shape[1]
    # null-space coordinates of W0 from its SVD input-space singular vectors
    _, s, vt = np.linalg.svd(W0, full_matrices=True)
    rank = numerical_rank(W0, rank_tol)
    E = vt[rank:].T  # (d0, d0 - rank)
    p0 = np.eye(d0) - pinv(W0, rank_tol) @ W0
    eta = np.abs((E.T @ p0 @ batch.inputs.T).T)  # (M, d0 - rank)
    Y = eta.T
    aa = pinv(A, rank_tol) @ A
    closed = float(np.sum(eta**2) - np.trace(aa @ Y.T @ Y))
    q = eta.ravel()
    P1 = np.eye(q.size) - np.kron(aa, np.eye(E.shape[1]))
    direct = float(np.sum((P1 @ q) ** 2))
    return BoundReport(eta, closed, direct)


def max_relative_gradient_diff(params: FcnParams, original: Batch, artifact: Batch) -> float:
    if original.inputs.shape != artifact.inputs.shape:
        raise ShapeMismatch("batches differ in shape")
    if not np.array_equal(original.labels, artifact.labels):
        raise ShapeMismatch("batches differ in labels")
    g = average_gradient(params, original).flat()
    h = average_gradient(params, artifact).flat()
    return float(np.max(np.abs(g - h) / (np.abs(g) + 1e-30)))


def verify_gradient_invariance(params: FcnParams, original: Batch, artifact: Batch, tol: float = 1e-8):
    """Returns ``(max_relative_diff, passed)``."""
    diff = max_relative_gradient_diff(params, original, artifact)
    return diff, diff <= tol
