"""Exclusively activated neurons (ExANs) and batch classification."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import CurationFailed
from .model import ActivationPattern, Batch, FcnParams, forward_trace


@dataclass
class ExanTable:
    """``indices[m][l-1]`` lists the ExANs of sample ``m`` at ReLU layer ``l``."""

    indices: list

    @property
    def counts(self) -> np.ndarray:
        """Array of shape (M, H) with the ExAN count per sample and layer."""
        return np.array([[len(ix) for ix in per_sample] for per_sample in self.indices], dtype=np.int64).reshape(
            len(self.indices), -1
        )

    @property
    def batch_size(self) -> int:
        return len(self.indices)

    @property
    def depth(self) -> int:
        return len(self.indices[0]) if self.indices else 0


def exan_counts(patterns: ActivationPattern) -> ExanTable:
    """Neuron ``j`` is an ExAN of sample ``m`` iff only ``m`` activates it."""
    M = patterns.batch_size
    indices = [[] for _ in range(M)]
    for mk in patterns.masks:
        mk = np.asarray(mk, dtype=bool)
        exclusive = mk & (mk.sum(axis=0) == 1)[None, :]
        for m in range(M):
            indices[m].append(np.flatnonzero(exclusive[m]))
    return ExanTable(indices)


class State(enum.Enum):
    INSECURE = "Insecure"
    SECURE = "Secure"
    OTHER = "Other"


@dataclass
class ExclusivityState:
    state: State
    evidence: list = field(default_factory=list)
    same_first_layer_pattern: bool | None = None

    def to_dict(self) -> dict:
        return {
            "state": self.state.value,
            "evidence": self.evidence,
            "same_first_layer_pattern": self.same_first_layer_pattern,
        }


def classify_batch(table: ExanTable, m: int, d1: int, patterns: ActivationPattern | None = None) -> ExclusivityState:
    counts = table.counts
    H = table.depth
    evidence = []
    insecure = True
    secure = m > d1
    for i in range(table.batch_size):
        row = counts[i]
        last_ok = bool(H >= 1 and row[H - 1] >= 2)
        inner_ok = bool(np.all(row[: H - 1] >= 1)) if H > 1 else True
        first_zero = bool(H >= 1 and row[0] == 0)
        insecure &= last_ok and inner_ok
        secure &= first_zero
        evidence.append(
            {
                "sample": i,
                "exan_counts": [int(c) for c in row],
                "last_layer_ge2": last_ok,
                "inner_layers_ge1": inner_ok,
                "first_layer_zero": first_zero,
            }
        )
    same = None
    if patterns is not None and patterns.depth:
        first = np.asarray(patterns.masks[0], dtype=bool)
        same = bool(np.all(first == first[:1]))
    if insecure and table.batch_size > 0:
        st = State.INSECURE
    elif secure and table.batch_size > 0:
        st = State.SECURE
    else:
        st = State.OTHER
    return ExclusivityState(st, evidence, same)


def audit_batch(params: FcnParams, batch: Batch) -> ExclusivityState:
    _, _, masks = forward_trace(params, batch.inputs)
    pat = ActivationPattern(masks)
    return classify_batch(exan_counts(pat), batch.size, params.dims[1], pat)


class UniformSampler:
    """I.i.d. uniform inputs on ``[-1, 1]^d0`` with uniform labels."""

    def __init__(self, d0: int, n_classes: int, raster_shape=None):
        self.d0 = d0
        self.n_classes = n_classes
        self.raster_shape = raster_shape

    def __call__(self, rng: np.random.Generator, batch_size: int) -> Batch:
        x = rng.uniform(-1.0, 1.0, size=(batch_size, self.d0))
        y = rng.integers(0, self.n_classes, size=batch_size)
        return Batch(x, y, self.raster_shape)


def _trial_rngs(rng_seed: int, trials: int):
    for child in np.random.SeedSequence(rng_seed).spawn(trials):
        yield np.random.default_rng(child)


def _is_insecure(params: FcnParams, batch: Batch) -> bool:
    return audit_batch(params, batch).state is State.INSECURE


def insecure_proportion(params: FcnParams, sampler, trials: int, batch_size: int, rng_seed: int) -> float:
    """Fraction of sampled batches that satisfy the insecure boundary condition."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    hits = sum(_is_insecure(params, sampler(rng, batch_size)) for rng in _trial_rngs(rng_seed, trials))
    return hits / trials


def curate_insecure_batch(params: FcnParams, sampler, max_trials: int, rng_seed: int, batch_size: int = 8):
    """Rejection-sample batches until one is insecure.

    Returns ``(batch, trial_count)``; raises :class:`CurationFailed` otherwise.
    """
    if max_trials < 1:
        raise ValueError("max_trials must be >= 1")
    for t, rng in enumerate(_trial_rngs(rng_seed, max_trials), start=1):
        batch = sampler(rng, batch_size)
        if _is_insecure(params, batch):
            return batch, t
    raise CurationFailed(max_trials)
