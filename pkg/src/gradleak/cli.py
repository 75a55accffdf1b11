"""``gradleak`` command line.

Exit codes: 0 success, 2 attack not applicable, 1 any other error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness, io
from .attack import AttackOptions
from .errors import GradLeakError
from .harness import ExperimentConfig, ModelSpec
from .model import average_gradient

log = logging.getLogger("gradleak")

EXIT_OK, EXIT_ERROR, EXIT_NOT_APPLICABLE = 0, 1, 2


def _int_list(text: str) -> list:
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str) -> list:
    return [float(v) for v in text.split(",") if v.strip()]


def _raster(text: str | None):
    if not text:
        return None
    shape = tuple(int(v) for v in text.replace("x", ",").split(","))
    if len(shape) != 3:
        raise argparse.ArgumentTypeError("raster shape is C,H,W")
    return shape


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise argparse.ArgumentTypeError(f"{path} does not exist")
    return p


def _add_model_spec(p: argparse.ArgumentParser, width: int = 512) -> None:
    g = p.add_argument_group("model generation")
    g.add_argument("--d0", type=int, default=48)
    g.add_argument("--width", type=int, default=width)
    g.add_argument("--depth", type=int, default=1, help="number of hidden layers")
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--bias-mean", type=float, default=0.0, help="mean shift of hidden biases")
    g.add_argument("--model-seed", type=int, default=0)


def _spec(args) -> ModelSpec:
    return ModelSpec(args.d0, args.width, args.depth, args.classes, args.bias_mean, args.model_seed)


def _add_attack_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--zero-tol", type=float, default=1e-9)
    p.add_argument("--group-tol", type=float, default=1e-6)
    p.add_argument("--g1-policy", choices=["two-thirds", "bias-refine"], default="bias-refine")


def _attack_opts(args) -> AttackOptions:
    return AttackOptions(zero_tol=args.zero_tol, group_tol=args.group_tol, g1_policy=args.g1_policy)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gradleak", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="random-weight FCN")
    p.add_argument("--dims", type=_int_list, required=True, help="e.g. 48,256,10")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bias-mean", type=float, default=0.0)
    p.add_argument("--no-first-relu", action="store_true")
    p.add_argument("--out", type=Path, required=True, help="model.json path")

    p = sub.add_parser("gen-batch", help="uniform synthetic batch")
    p.add_argument("--M", type=int, required=True)
    p.add_argument("--d0", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--raster-shape", type=_raster, default=None)
    p.add_argument("--out", type=Path, required=True, help="batch.json path")

    p = sub.add_parser("curate", help="search for a batch with the insecure exclusivity state")
    p.add_argument("--model", type=_existing, required=True)
    p.add_argument("--M", type=int, default=8)
    p.add_argument("--max-trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--raster-shape", type=_raster, default=None)
    p.add_argument("--out", type=Path, required=True, help="batch.json path")

    p = sub.add_parser("grad", help="average gradient of a batch")
    p.add_argument("--model", type=_existing, required=True)
    p.add_argument("--batch", type=_existing, required=True)
    p.add_argument("--dpsgd-sigma", type=float, default=None)
    p.add_argument("--clip-norm", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="grad.json path")

    p = sub.add_parser("attack", help="deterministic reconstruction from a gradient")
    p.add_argument("--model", type=_existing, required=True)
    p.add_argument("--gradient", type=_existing, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_attack_opts(p)
    p.add_argument("--beta", type=float, default=None, help="keep this fraction of weight gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--truth", type=_existing, default=None, help="batch to score against")
    p.add_argument("--raster-shape", type=_raster, default=None)

    p = sub.add_parser("defend", help="gradient-identical artifact batches")
    p.add_argument("--model", type=_existing, required=True)
    p.add_argument("--batch", type=_existing, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--no-box", action="store_true")

    p = sub.add_parser("audit", help="exclusivity state of a batch")
    p.add_argument("--model", type=_existing, required=True)
    p.add_argument("--batch", type=_existing, required=True)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("stats", help="proportion of insecure batches")
    _add_model_spec(p)
    axis = p.add_mutually_exclusive_group(required=True)
    axis.add_argument("--widths", type=_int_list)
    axis.add_argument("--depths", type=_int_list)
    axis.add_argument("--checkpoints", type=_existing, nargs="+", help="model.json per epoch")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--M", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("sweep", help="attack sweeps")
    _add_model_spec(p)
    axis = p.add_mutually_exclusive_group(required=True)
    axis.add_argument("--beta", type=_float_list)
    axis.add_argument("--batch-sizes", type=_int_list)
    axis.add_argument("--widths", type=_int_list)
    axis.add_argument("--depths", type=_int_list)
    _add_attack_opts(p)
    p.add_argument("--M", type=int, default=8)
    p.add_argument("--max-trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    return ap


def _emit(payload: dict, out: Path | None = None) -> None:
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        io.write_json(out, payload)
    print(json.dumps({"schema_version": io.SCHEMA_VERSION, **payload}, indent=2, default=str))


def _run(args) -> int:
    cmd = args.command
    if cmd == "gen-model":
        from .model import generate_model

        params = generate_model(args.dims, args.seed, args.bias_mean, not args.no_first_relu)
        io.save_model(params, args.out)
        return EXIT_OK
    if cmd == "gen-batch":
        harness.gen_batch(args.M, args.d0, args.classes, args.seed, args.out, args.raster_shape)
        return EXIT_OK
    if cmd == "curate":
        from .exclusivity import UniformSampler, curate_insecure_batch

        params = io.load_model(args.model)
        sampler = UniformSampler(params.dims[0], params.n_classes, args.raster_shape)
        batch, trials = curate_insecure_batch(params, sampler, args.max_trials, args.seed, args.M)
        io.save_batch(batch, args.out, params.n_classes)
        _emit({"trials": trials, "batch": str(args.out)})
        return EXIT_OK
    if cmd == "grad":
        from .model import dpsgd_obfuscate

        params = io.load_model(args.model)
        batch, _ = io.load_batch(args.batch)
        grad = average_gradient(params, batch)
        if args.dpsgd_sigma is not None:
            grad = dpsgd_obfuscate(grad, args.clip_norm, args.dpsgd_sigma, args.seed)
        io.save_gradient(grad, args.out, params.dims)
        return EXIT_OK
    if cmd == "attack":
        params = io.load_model(args.model)
        grad = io.load_gradient(args.gradient)
        truth = io.load_batch(args.truth)[0] if args.truth else None
        report = harness.run_attack(
            params, grad, args.out, _attack_opts(args), args.beta, args.seed, truth, args.raster_shape
        )
        if report["status"] == "not_applicable":
            log.error("attack not applicable at stage %s: %s", report["stage"], report["reason"])
            return EXIT_NOT_APPLICABLE
        return EXIT_OK
    if cmd == "defend":
        params = io.load_model(args.model)
        batch, _ = io.load_batch(args.batch)
        inv = harness.run_defend(params, batch, args.out, args.seed, args.samples, not args.no_box)
        _emit({"worst": inv["worst"], "subspace_dim": inv["subspace_dim"]})
        return EXIT_OK
    if cmd == "audit":
        params = io.load_model(args.model)
        batch, _ = io.load_batch(args.batch)
        _emit(harness.run_audit(params, batch), args.out)
        return EXIT_OK
    if cmd == "stats":
        base = _spec(args)
        if args.widths:
            axis, values = "width", args.widths
            specs = [ModelSpec(**{**vars(base), "width": w}) for w in values]
        elif args.depths:
            axis, values = "depth", args.depths
            specs = [ModelSpec(**{**vars(base), "depth": d}) for d in values]
        else:
            axis, values = "epoch", list(range(len(args.checkpoints)))
            specs = [io.load_model(p) for p in args.checkpoints]
        _emit(harness.run_stats(specs, values, axis, args.trials, args.M, args.seed), args.out)
        return EXIT_OK
    if cmd == "sweep":
        cfg = ExperimentConfig(
            out=args.out,
            model=_spec(args),
            batch_size=args.M,
            seed=args.seed,
            max_trials=args.max_trials,
            attack=_attack_opts(args),
        )
        for axis, values in (
            ("beta", args.beta),
            ("batch_size", args.batch_sizes),
            ("width", args.widths),
            ("depth", args.depths),
        ):
            if values:
                summary = harness.run_sweep(cfg, axis, values)
                break
        _emit({k: v for k, v in summary.items() if k != "points"})
        return EXIT_OK
    raise AssertionError(cmd)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _run(args)
    except GradLeakError as exc:
        stage = getattr(exc, "stage", None)
        log.error("%s%s: %s", f"[{stage}] " if stage else "", type(exc).__name__, exc)
        return EXIT_ERROR
    except (OSError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
