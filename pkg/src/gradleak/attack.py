"""Deterministic batch reconstruction from the average gradient.

Pipeline: loss-vector ratios and labels from the last weight gradient,
activation patterns layer by layer, bias-calibrated linear system, LSMR.
"""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import nnls

from .errors import (
    AttackStageError,
    DidNotConverge,
    GroupOverlap,
    NoGroups,
    NotApplicable,
    PatternAmbiguous,
    ShapeMismatch,
    SubsetSumAmbiguous,
)
from .exclusivity import State, classify_batch, exan_counts
from .linalg import SparseSystem, SystemBuilder, lsmr_solve
from .model import ActivationPattern, Batch, FcnParams, GradientBundle, backprop_vectors

log = logging.getLogger(__name__)

G1_POLICIES = ("two-thirds", "bias-refine")


@dataclass
class LossProfile:
    batch_size: int
    exan_groups: list
    ratio_table: np.ndarray
    labels: np.ndarray
    g1_values: np.ndarray
    loss_vectors: np.ndarray
    ref_class: int = 0
    policy: str = "bias-refine"
    flags: list = field(default_factory=list)


@dataclass
class AttackOptions:
    zero_tol: float = 1e-9
    group_tol: float = 1e-6
    g1_policy: str = "bias-refine"
    subset_tol: float = 1e-8
    cone_tol: float = 1e-6
    strict_subset: bool = False
    # ambiguous last-layer neurons are settled by the solve residual when the
    # number of joint assignments stays below this
    max_assignments: int = 256
    # relative residual above which the solve is rejected; "auto" = 1e-6 for
    # bias-refine, disabled for two-thirds (its scales are only approximate)
    residual_tol: float | str | None = "auto"
    atol: float = 1e-12
    btol: float = 1e-12
    max_iter: int | None = None
    # LSMR stops near its relative tolerances; re-solving for the residual
    # recovers the remaining digits of well-conditioned systems
    refine_steps: int = 1


@dataclass
class ReconResult:
    inputs: np.ndarray
    labels: np.ndarray
    residual_norm: float
    diagnostics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def to_batch(self, raster_shape=None) -> Batch:
        return Batch(self.inputs, self.labels, raster_shape)


# ---------------------------------------------------------------- stage 1


def _close(a, b, tol):
    return np.abs(a - b) <= tol * np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)


def _cluster_columns(R: np.ndarray, key_row: int, tol: float) -> list:
    """Groups of column positions whose full ratio vectors agree within ``tol``."""
    key = R[key_row]
    order = np.argsort(key, kind="stable")
    runs, cur = [], [order[0]]
    for a, b in zip(order[:-1], order[1:]):
        if _close(key[a], key[b], tol):
            cur.append(b)
        else:
            runs.append(cur)
            cur = [b]
    runs.append(cur)

    groups = []
    for run in runs:
        if len(run) < 2:
            continue
        pending = list(run)
        found = []
        while pending:
            center = pending[0]
            same = [p for p in pending if np.all(_close(R[:, p], R[:, center], tol))]
            pending = [p for p in pending if p not in same]
            if len(same) >= 2:
                found.append(sorted(same))
        if len(found) > 1:
            raise GroupOverlap(f"{len(found)} distinct ratio groups share one key value")
        groups.extend(found)
    return groups


def _fit_scales_bias(ratios, groups, grad: GradientBundle, params: FcnParams | None) -> np.ndarray:
    """Least-squares fit of the per-sample loss-vector scales.

    Anchors: ``M * db_H = sum_m g^m`` and, when the model is known, the
    last hidden bias gradient at each sample's exclusive neurons, where
    ``M * db_{H-1}[k] = s_m (W_H^T r^m)_k`` holds with a single term.
    """
    M, K = ratios.shape
    rows = [ratios.T]
    rhs = [M * grad.bias_grads[-1]]
    if params is not None and params.depth >= 1:
        u = ratios @ params.weights[-1]
        bh = grad.bias_grads[-2]
        for m, grp in enumerate(groups):
            block = np.zeros((len(grp), M))
            block[:, m] = u[m, grp]
            rows.append(block)
            rhs.append(M * bh[grp])
    A = np.vstack(rows)
    b = np.concatenate(rhs)
    s, *_ = np.linalg.lstsq(A, b, rcond=None)
    return s


def infer_loss_profile(
    grad: GradientBundle,
    zero_tol: float = 1e-9,
    group_tol: float = 1e-6,
    g1_policy: str = "bias-refine",
    params: FcnParams | None = None,
) -> LossProfile:
    """Recover batch size, last-layer ExAN groups, labels and loss vectors."""
    if g1_policy not in G1_POLICIES:
        raise ValueError(f"unknown g1 policy {g1_policy!r}")
    G = grad.weight_grads[-1]
    K = G.shape[0]
    if K < 2:
        raise NoGroups("need at least two classes")
    gmax = np.abs(G).max()
    if not np.isfinite(gmax) or gmax == 0.0:
        raise NoGroups("last-layer gradient is zero")
    usable = np.abs(G) > zero_tol * gmax
    nnz = usable.sum(axis=1)
    ref = 0 if nnz[0] == nnz.max() else int(np.argmax(nnz))
    cols = np.flatnonzero(usable[ref])
    if cols.size < 2:
        raise NoGroups("fewer than two usable columns")
    R = G[:, cols] / G[ref, cols]
    key_row = 1 if ref == 0 else 0
    groups = [cols[g] for g in _cluster_columns(R, key_row, group_tol)]
    if not groups:
        raise NoGroups("no repeated ratio values in the last-layer gradient")
    groups.sort(key=lambda g: int(g[0]))
    M = len(groups)

    flags = []
    ratios = np.empty((M, K))
    labels = np.empty(M, dtype=np.int64)
    signs = np.empty(M)
    for m, grp in enumerate(groups):
        block = G[:, grp]
        ratios[m] = np.mean(block / block[ref], axis=1)
        ratios[m, ref] = 1.0
        rep = grp[int(np.argmax(np.abs(block).sum(axis=0)))]
        neg = np.flatnonzero(G[:, rep] < 0)
        if neg.size == 1:
            labels[m] = neg[0]
        else:
            labels[m] = ref
            flags.append({"sample": m, "issue": f"{neg.size} negative loss-vector entries"})
        signs[m] = np.sign(G[ref, rep])

    if g1_policy == "two-thirds":
        mags = np.abs(ratios)
        mags[np.arange(M), labels] = 0.0
        delta = 1.0 / mags.sum(axis=1)
        g1 = signs * (2.0 / 3.0) * delta
    else:
        g1 = _fit_scales_bias(ratios, groups, grad, params)
        bad = np.flatnonzero(np.sign(g1) != signs)
        for m in bad:
            flags.append({"sample": int(m), "issue": "fitted scale has the wrong sign"})

    if grad.batch_size_hint is not None and grad.batch_size_hint != M:
        log.warning("inferred batch size %d differs from hint %d", M, grad.batch_size_hint)
        flags.append({"issue": f"batch size hint {grad.batch_size_hint} != inferred {M}"})

    return LossProfile(
        batch_size=M,
        exan_groups=groups,
        ratio_table=ratios,
        labels=labels,
        g1_values=g1,
        loss_vectors=ratios * g1[:, None],
        ref_class=ref,
        policy=g1_policy,
        flags=flags,
    )


# ---------------------------------------------------------------- stage 2


def _subset_bits(n: int) -> np.ndarray:
    idx = np.arange(1 << n, dtype=np.int64)
    return ((idx[:, None] >> np.arange(n)) & 1).astype(bool)


def subset_sum_candidates(values, target: float, tol: float, limit: int = 64) -> list:
    """All 0/1 vectors ``a`` with ``|a @ values - target| <= tol`` (meet in the middle)."""
    v = np.asarray(values, dtype=np.float64)
    n = v.size
    h = n // 2
    left_bits, right_bits = _subset_bits(h), _subset_bits(n - h)
    left = left_bits @ v[:h]
    right = right_bits @ v[h:]
    order = np.argsort(right)
    rs = right[order]
    lo = np.searchsorted(rs, target - left - tol, side="left")
    hi = np.searchsorted(rs, target - left + tol, side="right")
    out = []
    for li in np.flatnonzero(hi > lo):
        for ri in order[lo[li] : hi[li]]:
            out.append(np.concatenate([left_bits[li], right_bits[ri]]))
            if len(out) > limit:
                return out
    return out


def _cone_residual(col: np.ndarray, gvecs: np.ndarray, members: np.ndarray) -> float:
    """Relative distance of ``col`` from the cone spanned by the member loss vectors."""
    norm = np.linalg.norm(col)
    if norm == 0.0:
        return 0.0 if not members.any() else 1.0
    if not members.any():
        return 1.0
    _, res = nnls(gvecs[members].T, col)
    return res / norm


def _last_layer_masks(grad, profile: LossProfile, params: FcnParams, opts: AttackOptions, diag: dict, alt: dict):
    H = params.depth
    M = profile.batch_size
    G = grad.weight_grads[H]
    bh = grad.bias_grads[H - 1]
    dH = G.shape[1]
    if H == 1 and not params.first_layer_relu:
        return np.ones((M, dH), dtype=bool)
    D = np.zeros((M, dH), dtype=bool)
    known = np.zeros(dH, dtype=bool)
    for m, grp in enumerate(profile.exan_groups):
        D[m, grp] = True
        known[grp] = True
    gvecs = profile.loss_vectors
    C = gvecs @ params.weights[H]
    col_mag = np.abs(G).max(axis=0)
    gmax = col_mag.max()
    bmax = np.abs(bh).max() if bh.size else 0.0
    dead = (col_mag <= opts.zero_tol * gmax) & (np.abs(bh) <= opts.zero_tol * max(bmax, 1e-300))
    known |= dead
    ambiguous, unmatched = [], []
    for k in np.flatnonzero(~known):
        tol = opts.subset_tol * max(np.abs(C[:, k]).sum(), np.abs(M * bh[k]), 1e-300)
        cands = subset_sum_candidates(C[:, k], M * bh[k], tol)
        fits = [a for a in cands if _cone_residual(G[:, k], gvecs, a) <= opts.cone_tol]
        if len(fits) == 1:
            D[:, k] = fits[0]
            continue
        if len(fits) > 1:
            if opts.strict_subset:
                raise SubsetSumAmbiguous(int(k), len(fits))
            ambiguous.append(int(k))
            alt[int(k)] = [np.asarray(a, dtype=bool) for a in fits]
            D[:, k] = np.any(fits, axis=0)
        else:
            unmatched.append(int(k))
            w, _ = nnls(gvecs.T, G[:, k])
            D[:, k] = w > opts.zero_tol * max(w.max(), 1e-300)
    diag["last_layer_ambiguous"] = ambiguous
    diag["last_layer_unmatched"] = unmatched
    return D


def infer_activation_patterns(
    grad: GradientBundle,
    profile: LossProfile,
    params: FcnParams,
    zero_tol: float = 1e-9,
    opts: AttackOptions | None = None,
) -> ActivationPattern:
    """Recover every sample's activation masks from the layer gradients.

    The last layer uses the ExAN groups plus a per-neuron subset-sum on the
    last hidden bias gradient; lower layers read the non-zero entries of the
    gradient row of an exclusive neuron one layer up. Stage diagnostics are
    left in ``pattern.diagnostics``.
    """
    if opts is None:
        opts = AttackOptions(zero_tol=zero_tol)
    grad.check_shapes(params)
    H = params.depth
    if H < 1:
        raise ShapeMismatch("the attack needs at least one ReLU layer")
    M = profile.batch_size
    diag = {}
    masks = [None] * H
    alt = {}
    masks[H - 1] = _last_layer_masks(grad, profile, params, opts, diag, alt)
    exans = [np.asarray(g) for g in profile.exan_groups]
    for l in range(H - 1, 0, -1):
        if l == 1 and not params.first_layer_relu:
            masks[0] = np.ones((M, params.dims[1]), dtype=bool)
            continue
        G = grad.weight_grads[l]
        D = np.zeros((M, params.dims[l]), dtype=bool)
        for m in range(M):
            if len(exans[m]) == 0:
                raise PatternAmbiguous(l + 1, m)
            rows = G[exans[m]]
            row = rows[int(np.argmax(np.abs(rows).max(axis=1)))]
            rmax = np.abs(row).max()
            if rmax == 0.0:
                raise PatternAmbiguous(l + 1, m)
            D[m] = np.abs(row) > zero_tol * rmax
        masks[l - 1] = D
        exclusive = D & (D.sum(axis=0) == 1)[None, :]
        exans = [np.flatnonzero(exclusive[m]) for m in range(M)]
    return ActivationPattern(masks, diag, alt)


# ---------------------------------------------------------------- stage 3


def _affine_forward_maps(params: FcnParams, masks) -> tuple:
    """Per-sample affine maps ``h_l = F_l x + c_l`` valid on fixed patterns."""
    M = masks[0].shape[0]
    d0 = params.input_dim
    F = [np.broadcast_to(np.eye(d0), (M, d0, d0))]
    c = [np.zeros((M, d0))]
    for l in range(1, params.depth + 1):
        W, b = params.weights[l - 1], params.biases[l - 1]
        mk = masks[l - 1].astype(np.float64)
        F.append(np.einsum("ij,mjk->mik", W, F[-1]) * mk[:, :, None])
        c.append((c[-1] @ W.T + b) * mk)
    return F, c


def assemble_linear_system(
    grad: GradientBundle,
    profile: LossProfile,
    patterns: ActivationPattern,
    params: FcnParams,
    chunk_rows: int = 4096,
) -> SparseSystem:
    """Linear equations in the stacked inputs, one per available weight-gradient entry.

    Unknown ``m * d0 + k`` is coordinate ``k`` of sample ``m``. For layer ``i``
    and entry ``(j, k)`` the row reads
    ``sum_m delta_{i+1}^m[j] (F_i^m x_m)[k] = M G_i[j,k] - sum_m delta_{i+1}^m[j] c_i^m[k]``
    where the subtracted sum is the bias calibration.
    """
    grad.check_shapes(params)
    M = profile.batch_size
    if patterns.batch_size != M or patterns.depth != params.depth:
        raise ShapeMismatch("patterns do not match the loss profile / model")
    d0 = params.input_dim
    masks = [np.asarray(mk, dtype=np.float64) for mk in patterns.masks]
    deltas = backprop_vectors(params, masks, profile.loss_vectors)
    F, c = _affine_forward_maps(params, masks)
    builder = SystemBuilder(M * d0)
    col_base = (np.arange(M) * d0)[:, None]
    for i in range(params.depth + 1):
        delta = deltas[i + 1]  # (M, d_{i+1})
        G = grad.weight_grads[i]
        avail = grad.available(i)
        live_j = np.any(delta != 0.0, axis=0)
        if i == 0:
            avail = avail & live_j[:, None]
        else:
            live_k = np.any(F[i] != 0.0, axis=(0, 2))
            avail = avail & live_j[:, None] & live_k[None, :]
        J, Kk = np.nonzero(avail)
        for start in range(0, J.size, chunk_rows):
            j, k = J[start : start + chunk_rows], Kk[start : start + chunk_rows]
            n = j.size
            coef = delta[:, j]  # (M, n)
            if i == 0:
                vals = coef.T  # (n, M)
                r = np.repeat(np.arange(n), M)
                cols = (col_base + k[None, :]).T.ravel()
                v = vals.ravel()
                rhs = M * G[j, k]
            else:
                blk = coef.T[:, :, None] * F[i][:, k, :].transpose(1, 0, 2)  # (n, M, d0)
                r = np.repeat(np.arange(n), M * d0)
                cols = np.tile(np.arange(M * d0), n)
                v = blk.ravel()
                rhs = M * G[j, k] - np.einsum("mn,mn->n", coef, c[i][:, k])
            nz = v != 0.0
            builder.add_block(r[nz], cols[nz], v[nz], rhs, tag=f"W{i}")
    return builder.build()


# ---------------------------------------------------------------- pipeline


def _resolve_residual_tol(opts: AttackOptions):
    if opts.residual_tol == "auto":
        return 1e-6 if opts.g1_policy == "bias-refine" else None
    return opts.residual_tol


def _pattern_variants(patterns: ActivationPattern, limit: int, diag: dict):
    """Yield ``(choice, pattern)`` for every joint assignment of ambiguous neurons."""
    cands = patterns.candidates
    n = int(np.prod([len(v) for v in cands.values()])) if cands else 1
    if not cands or n > limit:
        if cands:
            diag["assignments_skipped"] = n
        yield {}, patterns
        return
    diag["assignments_tried"] = n
    keys = sorted(cands)
    for combo in itertools.product(*(range(len(cands[k])) for k in keys)):
        masks = [mk.copy() for mk in patterns.masks]
        for k, c in zip(keys, combo):
            masks[-1][:, k] = cands[k][c]
        yield dict(zip(keys, combo)), ActivationPattern(masks, patterns.diagnostics)


def _solve(system: SparseSystem, opts: AttackOptions) -> dict:
    try:
        sol = lsmr_solve(system, opts.atol, opts.btol, opts.max_iter)
        x, residual, iters, converged = sol.solution, sol.residual_norm, sol.iterations, True
    except DidNotConverge as exc:
        x, residual, iters, converged = exc.solution, exc.residual_norm, exc.iterations, False
    A = system.to_csr()
    for _ in range(opts.refine_steps):
        r = system.rhs - A @ x
        if not np.any(r):
            break
        try:
            dx = lsmr_solve(replace(system, rhs=r), opts.atol, opts.btol, opts.max_iter).solution
        except DidNotConverge as exc:
            dx = exc.solution
        x = x + dx
        residual = float(np.linalg.norm(system.rhs - A @ x))
    rhs_norm = float(np.linalg.norm(system.rhs))
    return {
        "x": x,
        "residual": residual,
        "iterations": iters,
        "converged": converged,
        "relative_residual": residual / rhs_norm if rhs_norm > 0 else residual,
    }


def reconstruct(grad: GradientBundle, params: FcnParams, opts: AttackOptions | None = None) -> ReconResult:
    """Run the full attack; every stage failure surfaces as :class:`NotApplicable`."""
    opts = opts or AttackOptions()
    timings, diag = {}, {}
    t0 = time.perf_counter()

    def lap(name):
        nonlocal t0
        now = time.perf_counter()
        timings[name] = now - t0
        t0 = now

    try:
        grad.check_shapes(params)
    except ShapeMismatch as exc:
        raise NotApplicable("input", str(exc)) from exc
    if params.depth < 1:
        raise NotApplicable("input", "model has no ReLU layer")

    try:
        profile = infer_loss_profile(grad, opts.zero_tol, opts.group_tol, opts.g1_policy, params)
    except AttackStageError as exc:
        raise NotApplicable("loss_profile", str(exc)) from exc
    lap("loss_profile")
    diag["batch_size"] = profile.batch_size
    diag["groups"] = [len(g) for g in profile.exan_groups]
    diag["loss_profile_flags"] = profile.flags

    try:
        patterns = infer_activation_patterns(grad, profile, params, opts.zero_tol, opts)
    except AttackStageError as exc:
        raise NotApplicable("activation_patterns", str(exc)) from exc
    lap("activation_patterns")
    diag.update(patterns.diagnostics)

    table = exan_counts(patterns)
    state = classify_batch(table, profile.batch_size, params.dims[1], patterns)
    diag["exan_counts"] = table.counts.tolist()
    if state.state is not State.INSECURE:
        raise NotApplicable(
            "exclusivity", f"recovered patterns are {state.state.value}, not Insecure"
        )

    best = None
    for choice, pats in _pattern_variants(patterns, opts.max_assignments, diag):
        system = assemble_linear_system(grad, profile, pats, params)
        if system.n_rows == 0:
            raise NotApplicable("assemble", "no usable gradient equations")
        sol = _solve(system, opts)
        if best is None or sol["relative_residual"] < best[1]["relative_residual"]:
            best = (choice, sol, system)
    choice, sol, system = best
    if choice:
        diag["last_layer_resolved"] = choice
    lap("solve")
    diag["equations"] = system.n_rows
    diag["unknowns"] = system.n_cols
    diag["nnz"] = system.nnz
    x, residual = sol.pop("x"), sol.pop("residual")
    diag.update(sol)
    rel = diag["relative_residual"]
    tol = _resolve_residual_tol(opts)
    # an iteration-capped solve keeps its best iterate; only a converged
    # solve with a large residual signals inconsistent patterns or scales
    if tol is not None and diag["converged"] and rel > tol:
        raise NotApplicable("verify", f"relative residual {rel:.3e} exceeds {tol:.1e}")

    return ReconResult(
        inputs=x.reshape(profile.batch_size, params.input_dim),
        labels=profile.labels.copy(),
        residual_norm=residual,
        diagnostics=diag,
        timings=timings,
    )


def mask_gradient(grad: GradientBundle, beta: float, rng_seed: int) -> GradientBundle:
    """Keep a uniformly random ``beta`` share of the weight-gradient entries below the last layer."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    maskable = grad.weight_grads[:-1]
    sizes = [w.size for w in maskable]
    total = sum(sizes)
    keep = int(np.floor(beta * total + 0.5))
    rng = np.random.default_rng(rng_seed)
    flat = np.zeros(total, dtype=bool)
    flat[rng.choice(total, size=keep, replace=False)] = True
    masks, start = [], 0
    for w, n in zip(maskable, sizes):
        masks.append(flat[start : start + n].reshape(w.shape))
        start += n
    masks.append(None)
    return GradientBundle(
        [w.copy() for w in grad.weight_grads],
        [b.copy() for b in grad.bias_grads],
        mask=masks,
        batch_size_hint=grad.batch_size_hint,
    )
