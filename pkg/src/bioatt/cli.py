"""Command-line entry point.

Subcommands cover the full workflow: phantom generation, training,
evaluation, single-image denoising, attention-map export, the scripted
comparison experiments, and stub prior files.  Exit codes: 0 success,
1 usage error, 2 I/O or file-format error, 3 invariant violation (for
example a malformed prior file).  Every run writes a manifest JSON next to
its outputs; re-running with the manifest's seed and inputs reproduces the
outputs.  An optional config file (flat TOML subset: `key = value` lines)
sets defaults; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .attention import export_attention_maps
from .metrics import format_table, to_csv
from .network import CheckpointError, ModelConfig, load_checkpoint, save_checkpoint
from .pipeline import (
    CTImage,
    CtvError,
    PhantomSpec,
    derive_seed,
    destandardize,
    gen_phantom,
    load_pairs,
    pair_id_from_stem,
    read_ctv,
    write_ctv,
)
from .priors import DescriptorSet, PriorFileError, load_prior_file, uniform_priors, write_prior_file
from .training import (
    EXPERIMENTS,
    TrainConfig,
    baseline_report,
    denoise_image,
    evaluate,
    history_csv,
    resolve_priors,
    run_experiment,
    stub_priors,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_INVARIANT = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems by default; the contract wants 1.
    def error(self, message):
        raise UsageError(message)


def _parse_config_file(path: Path) -> dict:
    """Flat TOML subset: `key = value` with strings, numbers and booleans."""
    values = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            raise UsageError(f"{path}:{lineno}: config file supports flat keys only")
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip().replace("-", "_")
        value = value.split("#", 1)[0].strip() if not value.strip().startswith(('"', "'")) else value.strip()
        if value.startswith(('"', "'")) and value.endswith(value[0]) and len(value) >= 2:
            parsed = value[1:-1]
        elif value.lower() in ("true", "false"):
            parsed = value.lower() == "true"
        else:
            try:
                parsed = int(value)
            except ValueError:
                try:
                    parsed = float(value)
                except ValueError:
                    raise UsageError(f"{path}:{lineno}: cannot parse value {value!r}")
        values[key] = parsed
    return values


def _write_manifest(path: Path, command: str, options: dict, seed: Optional[int],
                    inputs: list, outputs: list, started: float) -> None:
    manifest = {
        "command": command,
        "config": {k: v for k, v in sorted(options.items())},
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "duration_seconds": round(time.time() - started, 3),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    tmp.replace(path)


def _descriptors(n: int) -> DescriptorSet:
    if n == 17:
        return DescriptorSet()
    return DescriptorSet(tuple(f"descriptor_{i:02d}" for i in range(n)))


def _load_priors_arg(path: Optional[str], descriptors: Optional[DescriptorSet] = None):
    if path is None:
        return None
    return load_prior_file(path, descriptors=descriptors)


def _dataset_ids(data_dir: Path) -> list:
    pairs = load_pairs(data_dir)
    if pairs:
        return [p.id for p in pairs]
    stems = sorted({pair_id_from_stem(p.stem) for p in data_dir.glob("*.ctv")})
    if not stems:
        raise CtvError(f"{data_dir}: no CTV files found")
    return stems


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_gen_phantom(args) -> int:
    started = time.time()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = PhantomSpec(dims=(args.dims, args.dims), sigma=args.sigma)
    outputs = []
    for i in range(args.count):
        nd, ld = gen_phantom(spec, derive_seed(args.seed, "phantom", i))
        image_id = f"phantom_{i:03d}"
        ld_path = out_dir / f"{image_id}_ld.ctv"
        nd_path = out_dir / f"{image_id}_nd.ctv"
        write_ctv(CTImage(f"{image_id}_ld", ld.pixels), ld_path)
        write_ctv(CTImage(f"{image_id}_nd", nd.pixels), nd_path)
        outputs.extend([ld_path, nd_path])
    _write_manifest(out_dir / "manifest.json", "gen-phantom",
                    {k: v for k, v in vars(args).items() if k != "func"},
                    args.seed, [], outputs, started)
    print(f"wrote {args.count} phantom pairs to {out_dir}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        variant=args.variant,
        weighting=args.weighting,
        lr0=args.lr,
        patience=args.patience,
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        seed=args.seed,
        whole_image=args.whole_image,
    )


def _cmd_train(args) -> int:
    started = time.time()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    pairs = load_pairs(args.data)
    if not pairs:
        raise CtvError(f"{args.data}: no image pairs found")
    descriptors = _descriptors(args.n_descriptors)
    config = _train_config(args)
    model_config = ModelConfig(variant=args.variant, channels=args.channels,
                               kernel=args.kernel, n_descriptors=args.n_descriptors,
                               patch_size=args.patch_size, seed=args.seed)
    prior_file = _load_priors_arg(args.priors, descriptors)
    result = train(pairs, config, model_config=model_config,
                   prior_file=prior_file, descriptors=descriptors)
    ckpt_path = out_dir / "checkpoint.batt"
    save_checkpoint(result.model, ckpt_path, epoch=result.best_epoch,
                    optimizer_arrays=result.optimizer_arrays,
                    optimizer_meta=result.optimizer_meta)
    history_path = out_dir / "history.csv"
    history_path.write_text(history_csv(result.history), encoding="utf-8")
    split_path = out_dir / "split.json"
    split_path.write_text(json.dumps(
        {"train": result.train_ids, "val": result.val_ids, "test": result.test_ids},
        indent=2, sort_keys=True), encoding="utf-8")
    _write_manifest(out_dir / "manifest.json", "train", {k: v for k, v in vars(args).items() if k != "func"},
                    args.seed, [args.data], [ckpt_path, history_path, split_path], started)
    print(f"best validation RMSE {result.best_val_rmse:.6f} at epoch {result.best_epoch}; "
          f"checkpoint: {ckpt_path}")
    return EXIT_OK


def _eval_priors(args, model, pair_ids, descriptors):
    if model.config.variant != "bioatt":
        return None
    prior_file = _load_priors_arg(args.priors, descriptors)
    weighting = args.weighting or ("clip-file" if prior_file is not None else "uniform")
    probe = TrainConfig(variant="bioatt", weighting=weighting, seed=args.seed)
    return resolve_priors(probe, pair_ids, descriptors, prior_file)


def _cmd_eval(args) -> int:
    started = time.time()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, _ = load_checkpoint(args.checkpoint)
    pairs = load_pairs(args.data)
    if not pairs:
        raise CtvError(f"{args.data}: no image pairs found")
    descriptors = _descriptors(model.config.n_descriptors)
    priors = _eval_priors(args, model, [p.id for p in pairs], descriptors)
    reports = [
        baseline_report(pairs, data_range=args.data_range, label="input"),
        evaluate(model, pairs, priors=priors, data_range=args.data_range,
                 label=model.config.variant),
    ]
    table = format_table(reports)
    (out_dir / "report.txt").write_text(table, encoding="utf-8")
    (out_dir / "report.csv").write_text(to_csv(reports), encoding="utf-8")
    _write_manifest(out_dir / "manifest.json", "eval", {k: v for k, v in vars(args).items() if k != "func"},
                    args.seed, [args.checkpoint, args.data],
                    [out_dir / "report.txt", out_dir / "report.csv"], started)
    print(table, end="")
    return EXIT_OK


def _single_image_prior(args, model, image_id, descriptors):
    if model.config.variant != "bioatt":
        return None
    prior_file = _load_priors_arg(args.priors, descriptors)
    if prior_file is None:
        return uniform_priors(descriptors)
    for key in (image_id, pair_id_from_stem(image_id)):
        if key in prior_file:
            return prior_file[key]
    raise PriorFileError(f"prior file has no entry for {image_id!r} (or {pair_id_from_stem(image_id)!r})")


def _cmd_denoise(args) -> int:
    started = time.time()
    model, _ = load_checkpoint(args.checkpoint)
    img = read_ctv(args.input)
    descriptors = _descriptors(model.config.n_descriptors)
    prior = _single_image_prior(args, model, img.id, descriptors)
    recon = denoise_image(model, img, prior)
    out_path = Path(args.out)
    write_ctv(destandardize(recon, image_id=out_path.stem), out_path)
    _write_manifest(out_path.with_name(out_path.name + ".manifest.json"), "denoise",
                    {k: v for k, v in vars(args).items() if k != "func"},
                    args.seed, [args.checkpoint, args.input], [out_path], started)
    print(f"wrote {out_path}")
    return EXIT_OK


def _cmd_attention_maps(args) -> int:
    started = time.time()
    model, _ = load_checkpoint(args.checkpoint)
    if model.config.variant not in ("bioatt", "spatial"):
        raise UsageError(f"variant {model.config.variant!r} has no spatial attention maps to export")
    img = read_ctv(args.input)
    prior_file = load_prior_file(args.priors)
    descriptors = prior_file[next(iter(prior_file))].descriptors if prior_file else DescriptorSet()
    if model.config.variant == "bioatt" and len(descriptors) != model.config.n_descriptors:
        raise PriorFileError(
            f"prior file has {len(descriptors)} descriptors, model expects {model.config.n_descriptors}")
    prior = _single_image_prior(args, model, img.id, descriptors)

    from . import autodiff as ad
    from .autodiff import Tensor
    from .pipeline import standardize

    x = Tensor(standardize(img)[None, None].astype(np.float32))
    with ad.no_grad():
        _, diag = model.forward(x, prior=prior, capture=True)
    out_root = Path(args.out) / args.epoch_tag
    outputs = []
    export_set = descriptors if model.config.variant == "bioatt" else _descriptors(1)
    for block_name in ("middle", "last"):
        outputs.extend(export_attention_maps(diag[block_name], export_set, out_root / block_name))
    _write_manifest(out_root / "manifest.json", "attention-maps",
                    {k: v for k, v in vars(args).items() if k != "func"},
                    args.seed, [args.checkpoint, args.input, args.priors], outputs, started)
    print(f"wrote {len(outputs)} attention maps under {out_root}")
    return EXIT_OK


def _cmd_experiment(args) -> int:
    started = time.time()
    out_dir = Path(args.out)
    pairs = load_pairs(args.data)
    if not pairs:
        raise CtvError(f"{args.data}: no image pairs found")
    descriptors = _descriptors(args.n_descriptors)
    config = _train_config(args)
    model_config = ModelConfig(variant=args.variant, channels=args.channels,
                               kernel=args.kernel, n_descriptors=args.n_descriptors,
                               patch_size=args.patch_size, seed=args.seed)
    prior_file = _load_priors_arg(args.priors, descriptors)
    reports = run_experiment(args.name, pairs, out_dir, config, model_config=model_config,
                             prior_file=prior_file, descriptors=descriptors)
    _write_manifest(out_dir / "manifest.json", "experiment",
                    {k: v for k, v in vars(args).items() if k != "func"},
                    args.seed, [args.data], [out_dir / f"experiment_{args.name}.csv"], started)
    print(format_table(reports), end="")
    return EXIT_OK


def _cmd_priors_stub(args) -> int:
    started = time.time()
    data_dir = Path(args.data)
    ids = _dataset_ids(data_dir)
    descriptors = _descriptors(args.n_descriptors)
    mapping = stub_priors(ids, descriptors, args.mode, seed=args.seed)
    out_path = Path(args.out)
    write_prior_file(out_path, mapping)
    _write_manifest(out_path.with_name(out_path.name + ".manifest.json"), "priors-stub",
                    {k: v for k, v in vars(args).items() if k != "func"},
                    args.seed, [args.data], [out_path], started)
    print(f"wrote priors for {len(ids)} images to {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser assembly
# ---------------------------------------------------------------------------


def _add_train_flags(p) -> None:
    p.add_argument("--variant", default="bioatt", choices=("base", "channel", "spatial", "bioatt"))
    p.add_argument("--weighting", default="uniform", choices=("clip-file", "uniform", "random"))
    p.add_argument("--priors", default=None, help="prior JSON file (weighting clip-file)")
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--patience", type=int, default=7)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--max-epochs", type=int, default=20)
    p.add_argument("--whole-image", action="store_true")
    p.add_argument("--channels", type=int, default=96)
    p.add_argument("--kernel", type=int, default=5)
    p.add_argument("--n-descriptors", type=int, default=17)
    p.add_argument("--patch-size", type=int, default=55)


def build_parser() -> _Parser:
    parser = _Parser(prog="bioatt", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"bioatt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None, help="flat TOML-style defaults file; flags win")

    p = sub.add_parser("gen-phantom", help="generate paired synthetic CT phantoms")
    common(p)
    p.add_argument("--count", type=int, default=None, help="number of pairs (required; may come from --config)")
    p.add_argument("--dims", type=int, default=512)
    p.add_argument("--sigma", type=float, default=0.06)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_phantom, _require=("count",))

    p = sub.add_parser("train", help="train a denoising model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--priors", default=None)
    p.add_argument("--weighting", default=None, choices=("clip-file", "uniform", "random"))
    p.add_argument("--data-range", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("denoise", help="denoise one CTV image")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--priors", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_denoise)

    p = sub.add_parser("attention-maps", help="export per-organ attention maps as PGM")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--priors", required=True)
    p.add_argument("--epoch-tag", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_attention_maps)

    p = sub.add_parser("experiment", help="run a scripted comparison experiment")
    common(p)
    p.add_argument("--name", required=True, choices=EXPERIMENTS)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("priors-stub", help="emit a schema-valid prior file without the extractor")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", required=True, choices=("uniform", "random", "fixture"))
    p.add_argument("--n-descriptors", type=int, default=17)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_priors_stub)
    return parser


def _config_path_from_argv(argv) -> Optional[Path]:
    args = list(sys.argv[1:] if argv is None else argv)
    for i, token in enumerate(args):
        if token == "--config" and i + 1 < len(args):
            return Path(args[i + 1])
        if token.startswith("--config="):
            return Path(token.split("=", 1)[1])
    return None


def main(argv=None) -> int:
    parser = build_parser()
    try:
        # Config-file values become parser defaults before parsing, so
        # explicit flags win.  Paths and the experiment name stay flag-only.
        config_path = _config_path_from_argv(argv)
        if config_path is not None:
            defaults = _parse_config_file(config_path)
            for action in parser._subparsers._group_actions[0].choices.values():
                known = {a.dest for a in action._actions}
                action.set_defaults(**{k: v for k, v in defaults.items() if k in known})
        args = parser.parse_args(argv)
        for dest in getattr(args, "_require", ()):
            if getattr(args, dest) is None:
                raise UsageError(f"--{dest.replace('_', '-')} is required")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CtvError, CheckpointError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (PriorFileError, ValueError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
