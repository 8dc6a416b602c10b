"""``srgan3d`` command line: synth-data, degrade, train, infer, evaluate, report.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .data import (MANIFEST, DataError, generate_phantom, load_split, load_volume, phantom_seed,
                   read_manifest, save_volume, split_assignment, write_manifest)
from .evaluate import evaluate_volumes, merge_reports, write_report
from .infer import NearestStub, cubic_model, infer_volume
from .metrics import EvalReport
from .trainer import TrainingError, load_checkpoint, train
from .volume import VolumeError, degrade, normalize

log = logging.getLogger("srgan3d")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise ConfigError(f"--out {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
        for child in out.iterdir():
            if child.is_dir() and not child.is_symlink():
                shutil.rmtree(child)
            else:
                child.unlink()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _normalized(volumes):
    out = []
    for vid, v in volumes:
        try:
            out.append((vid, normalize(v)))
        except VolumeError as e:
            raise DataError(f"{vid}: {e}") from None
    return out


def _find_checkpoint(path) -> Path:
    path = Path(path)
    if (path / "generator.bin").is_file():
        return path
    ckpts = sorted(path.glob("ckpt_*"), key=lambda p: int(p.name.split("_")[1]))
    if not ckpts:
        raise DataError(f"no checkpoint found at {path}")
    return ckpts[-1]


def _load_model(cfg: RunConfig, checkpoint):
    """Return ``(lr -> sr function, method name)`` for the configured model."""
    r = cfg["degrade.factor"]
    kind = cfg["infer.model"]
    if kind == "cubic_stub":
        return cubic_model(r), "cubic_stub"
    if kind == "nearest_stub":
        net = NearestStub(r)
        method = "nearest_stub"
    else:
        if checkpoint is None:
            raise ConfigError("a checkpoint is required when infer.model = checkpoint")
        state, (gen_cfg, *_) = load_checkpoint(_find_checkpoint(checkpoint))
        if gen_cfg.scale != r:
            raise ConfigError(f"checkpoint scale x{gen_cfg.scale} does not match degrade.factor x{r}")
        net = state.generator
        method = gen_cfg.upsample_method
    halo = None if cfg["infer.halo"] < 0 else cfg["infer.halo"]

    def run(lr):
        return infer_volume(lr, net, cfg["infer.patch_shape"], cfg["infer.patch_step"], halo)
    return run, method


# --- commands ---------------------------------------------------------------

def cmd_synth_data(args, cfg: RunConfig) -> None:
    n = cfg["data.n"]
    if n < 1:
        raise DataError("empty dataset")
    out = _prepare_out(args.out, args.force)
    splits = split_assignment(n, cfg["data.seed"], cfg["data.train_fraction"])
    entries = []
    for i, split in enumerate(splits):
        v = normalize(generate_phantom(cfg.phantom_spec(phantom_seed(cfg["data.seed"], i))))
        name = f"vol_{i:04d}.vol"
        save_volume(v, out / name)
        entries.append((name, split))
    write_manifest(entries, out / MANIFEST)
    cfg.echo(out)
    log.info("wrote %d phantoms to %s", n, out)


def cmd_degrade(args, cfg: RunConfig) -> None:
    src = Path(args.input)
    dc = cfg.degradation()
    if src.is_dir():
        entries = read_manifest(src / MANIFEST)
        if not entries:
            raise DataError("empty dataset")
        out = _prepare_out(args.out, args.force)
        for p, _ in entries:
            save_volume(degrade(load_volume(p), dc), out / p.name)
        write_manifest([(p.name, s) for p, s in entries], out / MANIFEST)
    else:
        if not src.is_file():
            raise DataError(f"input not found: {src}")
        v = load_volume(src)
        out = _prepare_out(args.out, args.force)
        save_volume(degrade(v, dc), out / src.name)
    cfg.echo(out)


def cmd_train(args, cfg: RunConfig) -> None:
    volumes = [v for _, v in _normalized(load_split(args.data, "train"))]
    gen_cfg, disc_cfg, tcfg, loss_cfg = cfg.generator(), cfg.discriminator(), cfg.train(), cfg.loss()
    state = None
    if args.resume:
        state, (g0, d0, _, l0) = load_checkpoint(_find_checkpoint(args.resume))
        if (g0, d0, l0) != (gen_cfg, disc_cfg, loss_cfg):
            raise ConfigError("resume checkpoint was trained with a different network or loss config")
    out = _prepare_out(args.out, args.force)
    cfg.echo(out)

    def progress(st):
        if st.step % 100 == 0:
            rec = st.history[-1]
            log.info("step %d  d %.4f  g %.4f  mse %.5f", st.step, rec["d_loss"], rec["g_total"], rec["g_mse"])

    train(volumes, tcfg, loss_cfg, gen_cfg, disc_cfg, run_dir=out, state=state, progress=progress,
          degradation=cfg.degradation())


def cmd_infer(args, cfg: RunConfig) -> None:
    lr = load_volume(args.volume)
    model, _ = _load_model(cfg, args.checkpoint)
    sr = model(lr)
    out = _prepare_out(args.out, args.force)
    save_volume(sr, out / f"{Path(args.volume).stem}_sr.vol")
    cfg.echo(out)


def cmd_evaluate(args, cfg: RunConfig) -> None:
    volumes = _normalized(load_split(args.data, "test"))
    model, method = _load_model(cfg, args.checkpoint)
    out = _prepare_out(args.out, args.force)
    cfg.echo(out)
    report = evaluate_volumes(volumes, cfg.degradation(), model, method, out / "images",
                              cfg["eval.zoom_box"], cfg["eval.image_scale"])
    write_report(report, out)
    print(report.render_table())


def cmd_report(args, cfg: RunConfig) -> None:
    reports = []
    for d in args.inputs:
        p = Path(d) / "report.csv"
        if not p.is_file():
            raise DataError(f"no report.csv in {d}")
        reports.append(EvalReport.from_csv(p.read_text()))
    report = merge_reports(reports)
    out = _prepare_out(args.out, args.force)
    cfg.echo(out)
    write_report(report, out)
    print(report.render_table())


COMMANDS = {
    "synth-data": cmd_synth_data,
    "degrade": cmd_degrade,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="master seed (sets seed and data.seed)")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="srgan3d", description="3D GAN super-resolution at desk scale")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth-data", parents=[common], help="generate a phantom dataset and manifest")
    sp = sub.add_parser("degrade", parents=[common], help="blur and decimate a volume or dataset")
    sp.add_argument("input", help="VOL1 file or dataset directory")
    sp = sub.add_parser("train", parents=[common], help="train on a dataset's train split")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--resume", help="checkpoint (or run directory) to resume from")
    sp = sub.add_parser("infer", parents=[common], help="super-resolve one LR volume")
    sp.add_argument("volume", help="LR VOL1 file")
    sp.add_argument("--checkpoint", help="checkpoint or run directory")
    sp = sub.add_parser("evaluate", parents=[common], help="PSNR/SSIM of cubic and model on the test split")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--checkpoint", help="checkpoint or run directory")
    sp = sub.add_parser("report", parents=[common], help="merge evaluation reports into one table")
    sp.add_argument("inputs", nargs="+", help="evaluation output directories")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.load(args.config, args.set, args.seed)
        COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, VolumeError, CheckpointError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
