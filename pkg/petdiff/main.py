from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

from .config import ConfigError, RunConfig
from .logging_config import get_logger, setup_logging
from .models import DoseLevel, Modality, PetDiffError
from .phantom import build_dataset
from .storage import read_volume, write_volume

logger = get_logger("main")


def _overrides(config: RunConfig, args: argparse.Namespace, seed_field: str = "seed") -> RunConfig:
    update: dict[str, Any] = {}
    if args.seed is not None:
        update[seed_field] = args.seed
    if args.steps is not None:
        update["steps"] = args.steps
    if args.out is not None:
        update["dataset" if args.command == "phantom-gen" else "out"] = args.out
    if args.command == "phantom-gen" and args.dose:
        update["protocol"] = {**config.protocol.model_dump(), "fractions": args.dose}
    if not update:
        return config
    try:
        return RunConfig.model_validate({**config.model_dump(), **update})
    except ValueError as e:
        raise ConfigError(f"invalid override: {e}") from e


def cmd_phantom_gen(config: RunConfig, args: argparse.Namespace) -> None:
    n = args.n if args.n is not None else config.n_phantoms
    records = build_dataset(
        config.phantom,
        config.protocol,
        n,
        config.split_ratios,
        config.dataset,
        master_seed=config.data_seed,
        workers=args.workers,
    )
    print(f"wrote {len(records)} records for {n} phantoms to {config.dataset}")


def cmd_train(config: RunConfig, args: argparse.Namespace) -> None:
    from .runners.trainer import train

    config.save(Path(config.out) / "config.json")
    checkpoint = train(config, args.dose, progress=not args.quiet)
    print(f"checkpoint written to {checkpoint}")


def cmd_sample(config: RunConfig, args: argparse.Namespace) -> None:
    from .diffusion import respace
    from .runners.data import Normalizer
    from .runners.evaluator import denoise_volume
    from .runners.trainer import load_trained

    model, trained, schedule = load_trained(args.checkpoint)
    lpet, header = read_volume(Path(args.lpet))
    ct, _ = read_volume(Path(args.ct))
    fraction = args.dose[0] if args.dose else header.dose_fraction
    if fraction is None:
        raise ConfigError("--dose is required when the LPET sidecar carries no dose fraction")
    dose = DoseLevel(fraction=fraction)
    K = args.sampling_steps or config.sampling_steps
    pred = denoise_volume(
        model, lpet, ct, dose, respace(schedule, K), Normalizer.from_config(trained),
        seed=config.seed, progress=not args.quiet,
    )
    out = Path(args.output)
    write_volume(out, pred, Modality.PET, dose_fraction=1.0, seed=config.seed)
    print(f"denoised volume written to {out}")


def cmd_eval(config: RunConfig, args: argparse.Namespace) -> None:
    from .runners.evaluator import Evaluator

    checkpoint = args.checkpoint or str(Path(config.out) / "checkpoint")
    K = args.sampling_steps or config.sampling_steps
    report = Evaluator(config.eval_workers).evaluate(checkpoint, config.dataset, K, doses=args.dose, seed=config.seed)
    csv_path, _ = report.write(config.out)
    if report.rows.empty and report.errors:
        raise PetDiffError(f"all {len(report.errors)} records failed, see {csv_path.with_suffix('.json')}")
    print(report.per_dose().to_string(index=False))
    print(f"metrics written to {csv_path}")
    if report.errors:
        print(f"{len(report.errors)} records failed, see {csv_path.with_suffix('.json')}", file=sys.stderr)


def cmd_ablate(config: RunConfig, args: argparse.Namespace) -> None:
    from .runners.ablation import ablate

    report = ablate(config, args.seeds, doses=args.dose, progress=not args.quiet)
    print(report.table.to_string(float_format=lambda v: f"{v:.4f}"))


COMMANDS: dict[str, tuple[Callable[[RunConfig, argparse.Namespace], None], str]] = {
    "phantom-gen": (cmd_phantom_gen, "generate a synthetic PET/CT dataset with multi-dose LPET"),
    "train": (cmd_train, "train the conditional denoiser"),
    "sample": (cmd_sample, "denoise one LPET/CT pair with a checkpoint"),
    "eval": (cmd_eval, "score a checkpoint on the test split (PSNR/SSIM per dose)"),
    "ablate": (cmd_ablate, "train and compare iddpm, iddpm+hwa and full"),
}


def create_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="petdiff", description="CT-guided multi-dose PET denoising diffusion")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    for name, (_, help_text) in COMMANDS.items():
        sub = subparsers.add_parser(name, help=help_text, description=help_text)
        sub.add_argument("--config", required=True, help="run configuration JSON file")
        sub.add_argument(
            "--seed", type=int, default=None,
            help="master seed; for phantom-gen the dataset seed, otherwise the model and sampling seed",
        )
        sub.add_argument(
            "--out", default=None,
            help="output location; the dataset directory for phantom-gen, the run directory otherwise",
        )
        sub.add_argument(
            "--dose", type=float, nargs="+", default=None,
            help="dose fraction(s) in (0, 1]; protocol for phantom-gen, record filter for train/eval/ablate, "
            "LPET dose for sample",
        )
        sub.add_argument("--steps", type=int, default=None, help="number of training steps")
        sub.add_argument("--quiet", action="store_true", help="hide progress bars")

        if name == "phantom-gen":
            sub.add_argument("--n", type=int, default=None, help="number of phantoms (default: config n_phantoms)")
            sub.add_argument("--workers", type=int, default=1, help="phantoms generated in parallel")
        if name in ("sample", "eval"):
            sub.add_argument(
                "--checkpoint", required=name == "sample", default=None,
                help="checkpoint directory (eval default: <out>/checkpoint)",
            )
            sub.add_argument("-K", "--sampling-steps", type=int, default=None, help="respaced sampling steps")
        if name == "sample":
            sub.add_argument("--lpet", required=True, help="low-dose PET .vol file")
            sub.add_argument("--ct", required=True, help="CT .vol file")
            sub.add_argument("--output", required=True, help="where to write the denoised .vol")
        if name == "ablate":
            sub.add_argument("--seeds", type=int, nargs="+", default=None, help="model seeds (default: 0 1 2)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = create_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    setup_logging()
    handler, _ = COMMANDS[args.command]
    try:
        config = RunConfig.load(args.config)
        config = _overrides(config, args, "data_seed" if args.command == "phantom-gen" else "seed")
        handler(config, args)
    except (PetDiffError, OSError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"petdiff {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
