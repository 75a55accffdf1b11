"""Experiment drivers behind the command-line subcommands.

Every driver writes its artifacts under an output directory, returns a
JSON-ready dict and records what it wrote in ``manifest.json``.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import io
from .attack import AttackOptions, mask_gradient, reconstruct
from .defense import (
    perturbation_lower_bound,
    perturbation_subspace,
    sample_artifact_batch,
    verify_gradient_invariance,
)
from .errors import NotApplicable
from .exclusivity import UniformSampler, audit_batch, curate_insecure_batch, insecure_proportion
from .metrics import match_and_score
from .model import Batch, FcnParams, average_gradient, generate_model

BETA_TREND_THRESHOLD = -0.8


@dataclass
class ModelSpec:
    d0: int = 48
    width: int = 512
    depth: int = 1
    n_classes: int = 10
    bias_mean: float = 0.0
    seed: int = 0

    def dims(self):
        return (self.d0,) + (self.width,) * self.depth + (self.n_classes,)

    def build(self) -> FcnParams:
        return generate_model(self.dims(), self.seed, self.bias_mean)


@dataclass
class ExperimentConfig:
    out: Path
    model: ModelSpec = field(default_factory=ModelSpec)
    batch_size: int = 8
    seed: int = 0
    max_trials: int = 1000
    attack: AttackOptions = field(default_factory=AttackOptions)
    raster_shape: tuple | None = None


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("GRADLEAK_THREADS", "1")))
    except ValueError:
        return 1


def derived_seeds(seed: int, n: int) -> list:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def write_manifest(out: Path, command: str, files, extra=None) -> None:
    payload = {
        "command": command,
        "files": sorted(str(Path(f).relative_to(out)) for f in files),
    }
    if extra:
        payload.update(extra)
    io.write_json(out / "manifest.json", payload)


def gen_model(spec: ModelSpec, out_json) -> FcnParams:
    params = spec.build()
    io.save_model(params, out_json)
    return params


def gen_batch(M: int, d0: int, n_classes: int, seed: int, out_json, raster_shape=None) -> Batch:
    if M < 1:
        raise ValueError("batch size must be >= 1")
    batch = UniformSampler(d0, n_classes, raster_shape)(np.random.default_rng(seed), M)
    io.save_batch(batch, out_json, n_classes)
    return batch


def attack_report(params, grad, opts, truth: Batch | None = None) -> tuple:
    """Run the attack; returns ``(report dict, ReconResult or None)``."""
    t0 = time.perf_counter()
    try:
        result = reconstruct(grad, params, opts)
    except NotApplicable as exc:
        return {
            "status": "not_applicable",
            "stage": exc.stage,
            "reason": exc.reason,
            "runtime_ms": 1e3 * (time.perf_counter() - t0),
        }, None
    report = {
        "status": "ok",
        "batch_size": int(result.inputs.shape[0]),
        "labels": result.labels.tolist(),
        "residual_norm": result.residual_norm,
        "runtime_ms": 1e3 * (time.perf_counter() - t0),
        "stage_diagnostics": result.diagnostics,
        "timings_s": result.timings,
    }
    if truth is not None:
        report.update(match_and_score(result.to_batch(), truth).to_dict())
    return report, result


def run_attack(params, grad, out: Path, opts: AttackOptions, beta=None, seed=0, truth=None, raster_shape=None) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    if beta is not None:
        grad = mask_gradient(grad, beta, seed)
    report, result = attack_report(params, grad, opts, truth)
    report["beta"] = beta
    files = [out / "report.json"]
    if result is not None:
        raster = raster_shape or (truth.raster_shape if truth is not None else None)
        recon = result.to_batch(raster)
        io.save_batch(recon, out / "recon_batch.json", params.n_classes)
        files += [out / "recon_batch.json", out / "recon_batch.bin"]
        files += io.dump_rasters(out, recon)
    io.write_json(out / "report.json", report)
    write_manifest(out, "attack", files)
    return report


def run_defend(params, batch: Batch, out: Path, seed: int, samples: int, box: bool = True) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    subspace = perturbation_subspace(params, batch)
    files = []
    diffs, norms = [], []
    for i, s in enumerate(derived_seeds(seed, samples)):
        art = sample_artifact_batch(batch, subspace, s, box=box)
        diff, _ = verify_gradient_invariance(params, batch, art)
        diffs.append(diff)
        norms.append(float(np.linalg.norm(art.inputs - batch.inputs)))
        path = out / f"artifact_{i:03d}.json"
        io.save_batch(art, path, params.n_classes)
        files += [path, path.with_suffix(".bin")]
        files += io.dump_rasters(out, art, stem=f"artifact_{i:03d}")
    invariance = {
        "max_relative_diff": diffs,
        "worst": max(diffs) if diffs else None,
        "perturbation_norms": norms,
        "subspace_dim": subspace.dim,
        "dim_limit": batch.size * (params.dims[0] - params.dims[1]),
    }
    io.write_json(out / "invariance.json", invariance)
    bound = perturbation_lower_bound(params, batch)
    io.write_json(out / "bound.json", bound.to_dict())
    files += [out / "invariance.json", out / "bound.json"]
    files += io.dump_rasters(out, batch, stem="original")
    write_manifest(out, "defend", files)
    return invariance


def run_audit(params, batch) -> dict:
    return audit_batch(params, batch).to_dict()


def run_stats(specs, values, axis: str, trials: int, batch_size: int, seed: int) -> dict:
    """Insecure-batch proportion at every sweep point; ``specs`` are ModelSpecs or models."""
    points = []
    for value, spec in zip(values, specs):
        params = spec.build() if isinstance(spec, ModelSpec) else spec
        sampler = UniformSampler(params.dims[0], params.n_classes)
        prop = insecure_proportion(params, sampler, trials, batch_size, seed)
        points.append({axis: value, "proportion": prop})
    return {"axis": axis, "points": points, "trials": trials, "batch_size": batch_size, "seed": seed}


def _sweep_point(cfg: ExperimentConfig, spec: ModelSpec, batch_size: int, beta, seed: int, out: Path) -> dict:
    params = spec.build()
    sampler = UniformSampler(spec.d0, spec.n_classes, cfg.raster_shape)
    try:
        batch, trials = curate_insecure_batch(params, sampler, cfg.max_trials, seed, batch_size)
    except Exception as exc:  # noqa: BLE001 - surfaced in the report
        out.mkdir(parents=True, exist_ok=True)
        rep = {"status": "curation_failed", "stage": "curate", "reason": str(exc)}
        io.write_json(out / "report.json", rep)
        return rep
    grad = average_gradient(params, batch)
    rep = run_attack(params, grad, out, cfg.attack, beta=beta, seed=seed, truth=batch)
    rep["curation_trials"] = trials
    io.save_batch(batch, out / "truth_batch.json", spec.n_classes)
    io.write_json(out / "report.json", rep)
    return rep


def run_sweep(cfg: ExperimentConfig, axis: str, values) -> dict:
    """Attack sweeps over ``beta``, ``batch_size``, ``width`` or ``depth``.

    The beta axis reuses one model and one curated batch; the others build a
    fresh model per point from ``cfg.model`` with the axis value swapped in.
    """
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    seeds = derived_seeds(cfg.seed, len(values))
    jobs = []
    for i, v in enumerate(values):
        spec = ModelSpec(**vars(cfg.model))
        M, beta, point_seed = cfg.batch_size, None, seeds[i]
        if axis == "beta":
            beta = float(v)
            point_seed = cfg.seed
        elif axis == "batch_size":
            M = int(v)
        elif axis == "width":
            spec.width = int(v)
        elif axis == "depth":
            spec.depth = int(v)
        else:
            raise ValueError(f"unknown sweep axis {axis!r}")
        jobs.append((spec, M, beta, point_seed, out / f"point_{i:03d}"))

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        reports = list(pool.map(lambda j: _sweep_point(cfg, *j), jobs))

    summary = {"axis": axis, "values": list(values), "seed": cfg.seed, "points": []}
    for v, rep in zip(values, reports):
        summary["points"].append(
            {
                axis: v,
                "status": rep.get("status"),
                "stage": rep.get("stage"),
                "mean_mse": rep.get("mean_mse"),
                "mean_psnr": rep.get("mean_psnr"),
                "lacc": rep.get("lacc"),
            }
        )
    if axis == "beta":
        mses = [p["mean_mse"] for p in summary["points"]]
        if all(m is not None for m in mses) and len(mses) > 1:
            rho = float(spearmanr(values, mses)[0])
            summary["mse_beta_spearman"] = rho
            summary["trend_ok"] = bool(rho <= BETA_TREND_THRESHOLD)
        else:
            summary["trend_ok"] = False
    io.write_json(out / "summary.json", summary)
    files = [out / "summary.json"] + [p for j in jobs for p in sorted(j[-1].glob("*"))]
    write_manifest(out, f"sweep:{axis}", files)
    return summary
