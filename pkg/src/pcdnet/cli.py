"""Command-line entry point: ``pcdnet <command> [options]``.

Every command writes its outputs into a run directory. Exit status is 0 on
success, 2 for usage errors and 1 for runtime failures (with a categorized
message on stderr).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import pcdt
from .analysis import ablation_run, count_params_macs, inspect_mixing, interpolate_latents
from .data import load_dataset, make_dataset, save_dataset
from .errors import ConfigError, PCDNetError
from .io import ExperimentConfig, export_ply
from .model import NAMED_CONFIGS, VARIANTS, PCDNet, generate_dense, init_point_cloud
from .selfcheck import run_suite
from .training import Checkpoint, evaluate, train

log = logging.getLogger("pcdnet")

STREAM_CLI = 4  # rng stream for command-level sampling (infer, interpolate)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    # global flags override the io section
    if args.seed is not None:
        cfg.io.seed = args.seed
    if args.deterministic is not None:
        cfg.io.deterministic = args.deterministic
    return cfg


def _run_dir(args, default: str) -> Path:
    path = Path(getattr(args, "run_dir", None) or default)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _seed(args, fallback: int = 0) -> int:
    return fallback if args.seed is None else args.seed


def _write_text(path: Path, text: str) -> None:
    pcdt.atomic_write_bytes(path, text.encode())


def _echo_config(cfg: ExperimentConfig, run_dir: Path, source: Optional[str]) -> None:
    """Store the resolved config, and the input file verbatim when there was one."""
    cfg.save(run_dir / "config.yaml")
    if source:
        pcdt.atomic_write_bytes(run_dir / "config.input.yaml", Path(source).read_bytes())


def _dataset(cfg: ExperimentConfig, data_dir: Optional[str]):
    """Load the dataset directory, generating and saving it on first use."""
    path = Path(data_dir or cfg.io.dataset_dir)
    if (path / "index.json").exists():
        train_set, test_set = load_dataset(path)
        shape = tuple(train_set[0].image.shape[1:]) if train_set else None
        if shape != tuple(cfg.data.image_size):
            raise ConfigError(f"dataset at {path} has {shape} images but the config asks for "
                              f"{tuple(cfg.data.image_size)}; regenerate it or point --data elsewhere")
        return train_set, test_set
    log.info("generating dataset into %s", path)
    d = cfg.data
    train_set, test_set = make_dataset(d.n_per_category, d.split_ratio, cfg.io.seed, tuple(d.image_size),
                                       d.n_gt, d.categories, d.intrinsics())
    save_dataset(path, train_set, test_set)
    return train_set, test_set


def _find_sample(data_dir: str, sample_id: str):
    train_set, test_set = load_dataset(data_dir)
    for s in test_set + train_set:
        if s.id == sample_id:
            return s
    raise ConfigError(f"sample {sample_id!r} not found in {data_dir}")


def _load_image(args):
    if args.image:
        img = pcdt.load(args.image)
        return img[None] if img.ndim == 2 else img
    if args.data and args.sample:
        return _find_sample(args.data, args.sample).image
    raise ConfigError("give --image FILE.pcdt, or --data DIR with --sample ID")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    d = cfg.data
    if args.n_per_category is not None:
        d.n_per_category = args.n_per_category
    if args.image_size is not None:
        d.image_size = list(args.image_size)
    cfg.validate()
    out = Path(args.out or cfg.io.dataset_dir)
    train_set, test_set = make_dataset(d.n_per_category, d.split_ratio, cfg.io.seed, tuple(d.image_size),
                                       d.n_gt, d.categories, d.intrinsics())
    save_dataset(out, train_set, test_set)
    _echo_config(cfg, out, args.config)
    print(f"wrote {len(train_set)} train / {len(test_set)} test samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.max_steps is not None:
        cfg.train.max_steps = args.max_steps
    cfg.validate()
    run_dir = _run_dir(args, cfg.io.run_dir)
    _echo_config(cfg, run_dir, args.config)
    train_set, test_set = _dataset(cfg, args.data)
    tcfg = cfg.train_config()
    resume = Checkpoint.load(args.resume) if args.resume else None
    if resume is not None:
        model = resume.build_model()
        if resume.model_config.to_dict() != cfg.model_config().to_dict():
            raise ConfigError("checkpoint model config differs from the experiment config")
    else:
        model = PCDNet(cfg.model_config(), rng=np.random.default_rng([tcfg.seed, 0]))
    result = train(model, train_set, tcfg, run_dir=run_dir, resume=resume)
    table = evaluate(model, test_set, seed=tcfg.seed)
    table.save(run_dir)
    print(table.to_text(), end="")
    print(f"{result.checkpoint.step} steps; checkpoint {run_dir / 'checkpoints' / 'last.pcdc'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    model = ckpt.build_model()
    train_set, test_set = load_dataset(args.data)
    samples = train_set if args.split == "train" else test_set
    table = evaluate(model, samples, seed=_seed(args, ckpt.train_config.seed))
    table.save(_run_dir(args, "runs/eval"))
    print(table.to_text(), end="")
    return 0


def cmd_infer(args) -> int:
    model = Checkpoint.load(args.checkpoint).build_model()
    image = _load_image(args)
    rng = np.random.default_rng([_seed(args), STREAM_CLI])
    total = args.points or model.n_out
    cloud = generate_dense(model, image, total, rng)
    out = Path(args.out) if args.out else _run_dir(args, "runs/infer") / "prediction.ply"
    export_ply(cloud, out)
    print(f"wrote {len(cloud)} points ({len(cloud) // model.n_out} chunks) to {out}")
    return 0


def cmd_interpolate(args) -> int:
    model = Checkpoint.load(args.checkpoint).build_model()
    train_set, test_set = load_dataset(args.data)
    if args.samples:
        corners = [_find_sample(args.data, sid) for sid in args.samples]
    else:  # first test sample of each of the first four categories
        seen = {}
        for s in test_set:
            seen.setdefault(s.category, s)
        corners = list(seen.values())[:4]
    if len(corners) != 4:
        raise ConfigError(f"interpolation needs 4 corner samples, got {len(corners)}")
    rng = np.random.default_rng([_seed(args), STREAM_CLI])
    cloud = init_point_cloud(model.n_in, model.cam, model.cfg.image_size, rng, model.dtype)
    res = interpolate_latents(model, [s.image for s in corners], cloud, grid=args.grid)
    run_dir = _run_dir(args, "runs/interpolate")
    pcdt.save(run_dir / "grid.pcdt", res.clouds)
    for r in range(args.grid):
        for c in range(args.grid):
            export_ply(res.clouds[r, c], run_dir / "ply" / f"r{r}_c{c}.ply")
    _write_text(run_dir / "corners.txt", "\n".join(s.id for s in corners) + "\n")
    print(f"decoded {args.grid * args.grid} clouds into {run_dir}")
    return 0


def cmd_inspect_mixing(args) -> int:
    model = Checkpoint.load(args.checkpoint).build_model()
    layers = model.graphx_layers()
    if not layers:
        raise ConfigError(f"variant {model.cfg.variant} has no GraphX mixing matrices")
    if args.list:
        for i, (name, layer) in enumerate(layers):
            print(f"{i}: {name} ({layer.n_out}x{layer.n_in})")
        return 0
    if not -len(layers) <= args.layer < len(layers):
        raise ConfigError(f"layer index {args.layer} out of range; model has {len(layers)} GraphX layers")
    name, layer = layers[args.layer]
    report = inspect_mixing(layer, rank_tol=args.rank_tol)
    report.save(_run_dir(args, "runs/inspect-mixing"), stem=name.replace(".", "_"))
    print(f"{name}\n{report.summary()}", end="")
    return 0


def cmd_count_macs(args) -> int:
    if args.checkpoint:
        cfg = Checkpoint.load(args.checkpoint).model_config
    elif args.config:
        cfg = _load_config(args).model_config()
    else:
        cfg = NAMED_CONFIGS[args.preset](args.variant, **({"n_points": args.points} if args.points else {}))
    report = count_params_macs(PCDNet(cfg))
    _write_text(_run_dir(args, "runs/count-macs") / "complexity.txt", report.to_text())
    print(report.to_text(), end="")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.max_steps is not None:
        cfg.train.max_steps = args.max_steps
    cfg.validate()
    run_dir = _run_dir(args, str(Path(cfg.io.run_dir) / "ablation"))
    _echo_config(cfg, run_dir, args.config)
    train_set, test_set = _dataset(cfg, args.data)
    report = ablation_run(train_set, test_set, cfg.model_config(), cfg.train_config(), run_dir)
    print(report.to_text(), end="")
    return 0


def cmd_gradcheck(args) -> int:
    lines: List[str] = []

    def emit(line):
        lines.append(line)
        print(line)

    results = run_suite(seed=_seed(args), max_entries=args.max_entries, report=emit)
    failed = [r for r in results if not r.passed]
    emit(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    _write_text(_run_dir(args, "runs/gradcheck") / "gradcheck.txt", "\n".join(lines) + "\n")
    return 0 if not failed else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcdnet", description="Point cloud deformation networks at desk scale.")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides io.seed)")
    p.add_argument("--deterministic", dest="deterministic", action="store_true", default=None,
                   help="single-threaded BLAS for bit-exact runs (default)")
    p.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", metavar="command", required=True)

    def command(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        return sp

    sp = command("gen-data", cmd_gen_data, "generate the synthetic dataset")
    sp.add_argument("--config")
    sp.add_argument("--out", help="dataset directory (default io.dataset_dir)")
    sp.add_argument("--n-per-category", type=int)
    sp.add_argument("--image-size", type=int, nargs=2, metavar=("H", "W"))

    sp = command("train", cmd_train, "train a model and evaluate it on the test split")
    sp.add_argument("--config")
    sp.add_argument("--data", help="dataset directory (generated if missing)")
    sp.add_argument("--run-dir")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--max-steps", type=int)
    sp.add_argument("--resume", help="checkpoint to continue from")

    sp = command("eval", cmd_eval, "evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=("train", "test"), default="test")
    sp.add_argument("--run-dir")

    sp = command("infer", cmd_infer, "predict a point cloud for an image and write PLY")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", help="PCDT image, (1,H,W) or (H,W)")
    sp.add_argument("--data")
    sp.add_argument("--sample", help="sample id inside --data")
    sp.add_argument("--points", type=int, help="total points; a multiple of the model output size")
    sp.add_argument("--out", help="PLY path (default RUN_DIR/prediction.ply)")
    sp.add_argument("--run-dir")

    sp = command("interpolate", cmd_interpolate, "decode a bilinear grid of latent codes")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--samples", nargs=4, metavar="ID")
    sp.add_argument("--grid", type=int, default=8)
    sp.add_argument("--run-dir")

    sp = command("inspect-mixing", cmd_inspect_mixing, "export a GraphX mixing matrix and its statistics")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--layer", type=int, default=0, help="index into the model's GraphX layers")
    sp.add_argument("--list", action="store_true", help="list GraphX layers and exit")
    sp.add_argument("--rank-tol", type=float, default=1e-3)
    sp.add_argument("--run-dir")

    sp = command("count-macs", cmd_count_macs, "analytic parameter and multiply-accumulate counts")
    src = sp.add_mutually_exclusive_group()
    src.add_argument("--checkpoint")
    src.add_argument("--config")
    src.add_argument("--preset", choices=sorted(NAMED_CONFIGS), default="desk")
    sp.add_argument("--variant", choices=VARIANTS, default="UpResGraphX")
    sp.add_argument("--points", type=int, help="input point count for --preset")
    sp.add_argument("--run-dir")

    sp = command("ablate", cmd_ablate, "train the three feature compositions and compare")
    sp.add_argument("--config")
    sp.add_argument("--data")
    sp.add_argument("--run-dir")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--max-steps", type=int)

    sp = command("gradcheck", cmd_gradcheck, "finite-difference check of every op and the tiny models")
    sp.add_argument("--max-entries", type=int, default=12, help="sampled entries per model parameter")
    sp.add_argument("--run-dir")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 2 for usage errors, 0 for --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except PCDNetError as exc:
        print(f"pcdnet: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"pcdnet: io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
