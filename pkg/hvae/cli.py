"""
HVAE Command Line
=================
One executable for the full experiment lifecycle.

Usage:
    python -m hvae gen-data --n 256 --seed 7 --out data/phantoms
    python -m hvae train --variant nvae --config config/default.cfg --iters 2000
    python -m hvae train --variant nvmp --checkpoint runs/<run>/checkpoints/ckpt_00001000.hvae --iters 4000
    python -m hvae eval --checkpoint runs/<run>/checkpoints/ckpt_00002000.hvae
    python -m hvae probe --checkpoint ... --alpha 10
    python -m hvae sample --checkpoint ... --count 16 --temperature 0.8
    python -m hvae variation --checkpoint ... --count 8
    python -m hvae clusters --checkpoint ... --count 8
    python -m hvae mix --checkpoint ... --layers 2
    python -m hvae resample --checkpoint ... --mode resample_pathology --count 8
    python -m hvae sensitivity --checkpoint ...

Exit codes: 0 success, 1 usage or contract violation, 2 data error, 3 numeric failure.
Every failure prints one line ``error code=<code> reason=<message>`` on stderr.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .config import RunConfig, Variant, resolve_threads
from .errors import HVAEError, UsageError
from .evalsuite import (
    RESAMPLE_PATHOLOGY,
    TRANSPLANT_PATHOLOGY,
    conditional_resample,
    evaluate_reconstructions,
    informativeness_probe,
    layer_variation_grid,
    make_grid,
    pathology_layer,
    sensitivity_gallery,
    sensitivity_scan,
    style_mix,
    vamprior_cluster_grid,
    write_f32,
    write_json,
    write_pgm,
)
from .checkpoint import load_checkpoint
from .hvae_model import HierarchicalVAE
from .phantom import DEFAULT_RESOLUTION, PhantomDataset, make_dataset
from .run_manager import RunDirectory, RunManager
from .trainer import HVAETrainer, load_model

logger = logging.getLogger(__name__)

DEFAULTS = {name: f.default for name, f in RunConfig.model_fields.items()}

# flag -> RunConfig field
CONFIG_FLAGS = {
    "variant": "variant",
    "levels": "levels",
    "k": "k",
    "supervise_layer": "supervise_layer",
    "lr": "lr",
    "weight_decay": "weight_decay",
    "batch": "batch_size",
    "iters": "max_iters",
    "seed": "seed",
    "data": "data",
    "resolution": "resolution",
}


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises UsageError instead of exiting"""

    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(message)


def _default(field: str) -> str:
    value = DEFAULTS[field]
    if isinstance(value, Variant):
        return value.value
    return "none" if value is None else str(value)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="key = value config file (flags win over it)")
    p.add_argument("--variant", choices=[v.value for v in Variant], default=None,
                   help=f"prior parameterisation (default: {_default('variant')})")
    p.add_argument("--levels", type=int, default=None, help=f"L, hierarchy depth (default: {_default('levels')})")
    p.add_argument("--k", type=int, default=None, help=f"VamPrior pseudo-inputs (default: {_default('k')})")
    p.add_argument("--supervise-layer", default=None,
                   help=f"layer supervised with lesion masks, or 'none' (default: {_default('supervise_layer')})")
    p.add_argument("--lr", type=float, default=None, help=f"learning rate (default: {_default('lr')})")
    p.add_argument("--weight-decay", type=float, default=None,
                   help=f"decoupled weight decay (default: {_default('weight_decay')})")
    p.add_argument("--batch", type=int, default=None, help=f"batch size (default: {_default('batch_size')})")
    p.add_argument("--iters", type=int, default=None, help=f"max iterations (default: {_default('max_iters')})")
    p.add_argument("--seed", type=int, default=None, help=f"run seed (default: {_default('seed')})")
    p.add_argument("--data", default=None, help=f"phantom dataset directory (default: {_default('data')})")
    p.add_argument("--resolution", type=int, default=None,
                   help=f"image side in pixels (default: {_default('resolution')})")


def _add_checkpoint_flags(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--checkpoint", required=True, help="HVAE1 checkpoint file")
    p.add_argument("--data", default=None, help="phantom dataset directory (default: the checkpoint's)")
    p.add_argument("--out", default=None, help="output directory (default: the checkpoint's run directory)")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="seed for random draws (default: 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hvae", description="Hierarchical VAE disentanglement toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="Generate a phantom dataset")
    p.add_argument("--n", type=int, default=256, help="number of phantoms (default: 256)")
    p.add_argument("--seed", type=int, default=0, help="dataset seed (default: 0)")
    p.add_argument("--out", default=_default("data"), help=f"dataset directory (default: {_default('data')})")
    p.add_argument("--resolution", type=int, default=DEFAULT_RESOLUTION[0],
                   help=f"image side in pixels (default: {DEFAULT_RESOLUTION[0]})")

    p = sub.add_parser("train", help="Train (or resume) a model")
    _add_config_flags(p)
    p.add_argument("--out", default=None, help="pinned run directory (default: runs/<hash>_<timestamp>)")
    p.add_argument("--checkpoint", default=None, help="resume from this checkpoint")

    p = sub.add_parser("eval", help="Reconstruction metrics on the test split")
    _add_checkpoint_flags(p)

    p = sub.add_parser("probe", help="Layer-wise Lasso informativeness probe")
    _add_checkpoint_flags(p, seed=False)
    p.add_argument("--alpha", type=float, default=10.0, help="Lasso penalty (default: 10.0)")

    p = sub.add_parser("sample", help="Unconditional samples from the prior")
    _add_checkpoint_flags(p)
    p.add_argument("--count", type=int, default=16, help="number of samples (default: 16)")
    p.add_argument("--temperature", type=float, default=1.0, help="prior std scale (default: 1.0)")

    p = sub.add_parser("variation", help="Per-layer variation grid: row n holds the top n layers fixed")
    _add_checkpoint_flags(p)
    p.add_argument("--count", type=int, default=8, help="samples per row (default: 8)")
    p.add_argument("--temperature", type=float, default=1.0, help="prior std scale (default: 1.0)")

    p = sub.add_parser("clusters", help="Samples from each VamPrior pseudo-input component")
    _add_checkpoint_flags(p)
    p.add_argument("--count", type=int, default=8, help="samples per component (default: 8)")
    p.add_argument("--temperature", type=float, default=1.0, help="prior std scale (default: 1.0)")

    p = sub.add_parser("mix", help="Style-mix pathology layers between two test images")
    _add_checkpoint_flags(p, seed=False)
    p.add_argument("--layers", default=None,
                   help="comma-separated layers taken from the lesioned image (default: the pathological layer)")

    p = sub.add_parser("resample", help="Resample or transplant the pathological layer")
    _add_checkpoint_flags(p)
    p.add_argument("--mode", choices=[RESAMPLE_PATHOLOGY, TRANSPLANT_PATHOLOGY], default=RESAMPLE_PATHOLOGY,
                   help=f"resampling mode (default: {RESAMPLE_PATHOLOGY})")
    p.add_argument("--count", type=int, default=8, help="number of draws or donors (default: 8)")
    p.add_argument("--temperature", type=float, default=1.0, help="prior std scale (default: 1.0)")

    p = sub.add_parser("sensitivity", help="Per-layer attribute sensitivity scan and gallery")
    _add_checkpoint_flags(p, seed=False)
    return parser


def _parse_layers(raw: str) -> List[int]:
    try:
        return [int(part) for part in raw.split(",") if part.strip()]
    except ValueError as e:
        raise UsageError(f"--layers expects comma-separated integers, got {raw!r}") from e


def _print_config(text: str) -> None:
    print("# resolved configuration")
    print(text, end="")
    sys.stdout.flush()


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    _print_config(f"n = {args.n}\nout = {args.out}\nresolution = {args.resolution}\nseed = {args.seed}\n")
    manifest = make_dataset(
        args.n, args.seed, args.out, (args.resolution, args.resolution), workers=resolve_threads()
    )
    splits = manifest["splits"]
    print(f"wrote {args.n} phantoms to {args.out} "
          f"(train={len(splits['train'])}, val={len(splits['val'])}, test={len(splits['test'])})")
    return 0


def cmd_train(args) -> int:
    overrides = {field: getattr(args, flag) for flag, field in CONFIG_FLAGS.items()}
    cfg = RunConfig.from_sources(args.config, overrides)
    _print_config(cfg.to_text())
    run = RunManager().create(cfg, args.out)
    trainer = HVAETrainer(cfg, run=run, show_progress=True)
    if args.checkpoint:
        trainer.load(args.checkpoint)
    result = trainer.train()
    print(f"final checkpoint: {result.final_checkpoint}")
    return 0


class _Loaded:
    """Model, config, dataset and output directory of a post-training command"""

    def __init__(self, args, need_data: bool = True):
        self.cfg = load_checkpoint(args.checkpoint).config
        _print_config(self.cfg.to_text())
        self.model: HierarchicalVAE = load_model(args.checkpoint)
        self.dataset = PhantomDataset(args.data or self.cfg.data) if need_data else None
        if args.out is not None:
            self.run = RunManager().create(self.cfg, args.out)
        else:
            ckpt_dir = Path(args.checkpoint).resolve().parent
            if ckpt_dir.name == "checkpoints" and (ckpt_dir.parent / "config.resolved").exists():
                self.run = RunDirectory(ckpt_dir.parent).ensure()
            else:
                self.run = RunManager().create(self.cfg)
        self.generator = torch.Generator()
        self.generator.manual_seed(getattr(args, "seed", 0))


def _save_grid(run: RunDirectory, name: str, images: Sequence, ncols: Optional[int] = None) -> None:
    grid = make_grid(images, ncols)
    write_pgm(run.figures / f"{name}.pgm", grid)
    write_f32(run.figures / f"{name}.f32", grid)
    print(f"wrote {run.figures / (name + '.pgm')}")


def cmd_eval(args) -> int:
    ctx = _Loaded(args)
    report = evaluate_reconstructions(ctx.model, ctx.dataset, feature_seed=args.seed, generator=ctx.generator)
    path = write_json(ctx.run.reports / "metrics.json", report.to_dict())
    print(f"wrote {path}")
    return 0


def cmd_probe(args) -> int:
    ctx = _Loaded(args)
    report = informativeness_probe(ctx.model, ctx.dataset, alpha=args.alpha)
    path = write_json(ctx.run.reports / "probe.json", report.to_dict())
    for l, r2 in enumerate(report.r2_per_layer):
        flag = "  (supervised)" if l == report.supervised_layer else ""
        print(f"z{l}: R2 = {r2:.4f}{flag}")
    print(f"wrote {path}")
    return 0


def cmd_sample(args) -> int:
    ctx = _Loaded(args, need_data=False)
    with torch.no_grad():
        samples = ctx.model.generate(args.count, ctx.generator, args.temperature)
    _save_grid(ctx.run, "samples", list(samples), ncols=min(args.count, 8))
    return 0


def cmd_variation(args) -> int:
    ctx = _Loaded(args, need_data=False)
    rows = layer_variation_grid(ctx.model, args.count, ctx.generator, args.temperature)
    _save_grid(ctx.run, "layer_variation", [im for row in rows for im in row], ncols=args.count)
    return 0


def cmd_clusters(args) -> int:
    ctx = _Loaded(args, need_data=False)
    rows = vamprior_cluster_grid(ctx.model, args.count, ctx.generator, args.temperature)
    _save_grid(ctx.run, "vamprior_clusters", [im for row in rows for im in row], ncols=args.count)
    print(f"{len(rows)} components x {args.count} samples")
    return 0


def _pair(dataset: PhantomDataset) -> Sequence[int]:
    test = dataset.split("test")
    areas = dataset.lesion_areas(test)
    return test[int(np.argmin(areas))], test[int(np.argmax(areas))]


def _predicted_area(model: HierarchicalVAE, image: torch.Tensor, layer: int) -> float:
    with torch.no_grad():
        z = model.infer(image, mean_mode=True).latents[layer]
        return float((model.segment(z) > 0.5).sum())


def cmd_mix(args) -> int:
    ctx = _Loaded(args)
    model, dataset = ctx.model, ctx.dataset
    layers = _parse_layers(args.layers) if args.layers is not None else [pathology_layer(model, dataset)]
    ia, ib = _pair(dataset)
    x_a, x_b = dataset.images[ia], dataset.images[ib]
    mixed = style_mix(model, x_a, x_b, layers)
    recon_a = style_mix(model, x_a, x_b, [])
    recon_b = style_mix(model, x_a, x_b, range(model.levels + 1))
    _save_grid(ctx.run, "mix", [x_a, x_b, recon_a, recon_b, mixed])

    payload = {"index_a": int(ia), "index_b": int(ib), "layers": sorted(layers)}
    if model.supervision.enabled:
        p = model.supervision.target_layer
        payload["predicted_lesion_area"] = {
            "recon_a": _predicted_area(model, recon_a, p),
            "mixed": _predicted_area(model, mixed, p),
        }
    write_json(ctx.run.reports / "mix.json", payload)
    return 0


def cmd_resample(args) -> int:
    ctx = _Loaded(args)
    model, dataset = ctx.model, ctx.dataset
    layer = pathology_layer(model, dataset)
    test = dataset.split("test")
    _, subject = _pair(dataset)
    donors = None
    if args.mode == TRANSPLANT_PATHOLOGY:
        donors = [dataset.images[i] for i in test if i != subject][: args.count]
    images = conditional_resample(
        model, dataset.images[subject], args.mode, layer, ctx.generator,
        donors=donors, count=args.count, temperature=args.temperature,
    )
    _save_grid(ctx.run, args.mode, [dataset.images[subject]] + images, ncols=min(len(images) + 1, 9))
    write_json(ctx.run.reports / f"{args.mode}.json", {
        "subject": int(subject), "layer": layer, "mode": args.mode, "count": len(images),
        "temperature": args.temperature,
    })
    return 0


def cmd_sensitivity(args) -> int:
    ctx = _Loaded(args)
    model, dataset = ctx.model, ctx.dataset
    report = sensitivity_scan(model, dataset)
    path = write_json(ctx.run.reports / "sensitivity.json", report.to_dict())
    _, subject = _pair(dataset)
    gallery = sensitivity_gallery(model, dataset.images[subject])
    _save_grid(ctx.run, "sensitivity_gallery", [im for row in gallery for im in row], ncols=gallery.shape[1])
    print(f"post-hoc pathological layer: z{report.posthoc_layer}")
    print(f"wrote {path}")
    return 0


COMMANDS: Dict[str, Callable] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "probe": cmd_probe,
    "sample": cmd_sample,
    "variation": cmd_variation,
    "clusters": cmd_clusters,
    "mix": cmd_mix,
    "resample": cmd_resample,
    "sensitivity": cmd_sensitivity,
}


def _fail(code: str, message: object) -> None:
    reason = " ".join(str(message).split())
    print(f"error code={code} reason={reason}", file=sys.stderr)


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run the subcommand and return the process exit code"""
    try:
        try:
            args = build_parser().parse_args(argv)
        except SystemExit as e:
            # --help
            return int(e.code or 0)
        torch.set_num_threads(resolve_threads())
        return COMMANDS[args.command](args)
    except HVAEError as e:
        _fail(e.code, e)
        return e.exit_code
    except OSError as e:
        _fail("io_error", e)
        return 2


def main() -> None:
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    sys.exit(run())


if __name__ == "__main__":
    main()
