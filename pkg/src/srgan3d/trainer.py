"""Adversarial training loop: Adam on both players, patch batches, checkpoints."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .losses import LossConfig, d_loss, g_total_loss
from .networks import (Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
                       load_network_params, network_params)
from .volume import DegradationConfig, PatchGrid, degrade, extract_patches

log = logging.getLogger(__name__)

CURVE_FIELDS = ("step", "d_loss", "g_adv", "g_mse", "g_gdl", "g_total")


class TrainingError(RuntimeError):
    """Non-finite loss; ``snapshot`` holds the offending step's diagnostics."""

    def __init__(self, msg, snapshot):
        super().__init__(msg)
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    lr_g: float = 1e-5
    lr_d: float = 1e-4
    batch_patches: int = 2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 20
    steps_per_epoch: int = 0  # 0: one pass over all patches
    seed: int = 0
    d_updates_per_g: int = 1
    checkpoint_every: int = 0  # 0: final checkpoint only
    patch_shape: tuple[int, int, int] = (16, 16, 16)
    patch_step: tuple[int, int, int] = (12, 12, 12)

    def __post_init__(self):
        object.__setattr__(self, "patch_shape", tuple(self.patch_shape))
        object.__setattr__(self, "patch_step", tuple(self.patch_step))
        if not (self.lr_g >= 0 and self.lr_d >= 0):
            raise ValueError("learning rates must be >= 0")
        if self.batch_patches < 1 or self.d_updates_per_g < 1:
            raise ValueError("batch_patches and d_updates_per_g must be >= 1")
        if self.epochs < 0 or self.steps_per_epoch < 0 or self.checkpoint_every < 0:
            raise ValueError("epochs, steps_per_epoch and checkpoint_every must be >= 0")


@dataclass
class TrainState:
    generator: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    step: int = 0
    history: list = field(default_factory=list)


def _adam(params, lr, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=lr, betas=(cfg.adam_beta1, cfg.adam_beta2),
                            eps=cfg.adam_eps, foreach=False)


def init_state(gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, cfg: TrainConfig,
               dtype=torch.float32) -> TrainState:
    g = Generator(gen_cfg).to(dtype)
    d = Discriminator(disc_cfg).to(dtype)
    return TrainState(g, d, _adam(g.parameters(), cfg.lr_g, cfg), _adam(d.parameters(), cfg.lr_d, cfg))


def degrade_batch(hr: torch.Tensor, factor: int) -> torch.Tensor:
    """Apply the degradation model to every patch of an ``(N, 1, ...)`` batch."""
    dc = DegradationConfig(factor)
    lr = [degrade(p.detach().cpu().numpy().transpose(1, 2, 3, 0), dc).transpose(3, 0, 1, 2) for p in hr]
    return torch.as_tensor(np.stack(lr), dtype=hr.dtype)


def train_step(state: TrainState, hr_batch: torch.Tensor, cfg: TrainConfig,
               loss_cfg: LossConfig = LossConfig(), lr_batch: torch.Tensor | None = None) -> TrainState:
    """One round: ``d_updates_per_g`` discriminator updates then one generator update.

    Updates ``state`` in place and returns it.
    """
    g, d = state.generator, state.discriminator
    if lr_batch is None:
        lr_batch = degrade_batch(hr_batch, g.cfg.scale)
    g.train()
    d.train()

    fake = g(lr_batch)
    d.requires_grad_(True)
    for _ in range(cfg.d_updates_per_g):
        state.opt_d.zero_grad(set_to_none=True)
        ld = d_loss(d(hr_batch), d(fake.detach()), loss_cfg)
        _check_finite(state, {"d_loss": float(ld.detach())})
        ld.backward()
        state.opt_d.step()

    d.requires_grad_(False)
    state.opt_g.zero_grad(set_to_none=True)
    total, parts = g_total_loss(hr_batch, fake, d(fake), loss_cfg, parts=True)
    rec = {"step": state.step + 1, "d_loss": float(ld.detach()), "g_total": float(total.detach())}
    rec.update({k: float(v.detach()) for k, v in parts.items()})
    try:
        _check_finite(state, rec)
    finally:
        d.requires_grad_(True)
    total.backward()
    state.opt_g.step()
    d.requires_grad_(True)

    state.step += 1
    state.history.append(rec)
    return state


def _check_finite(state: TrainState, rec: dict) -> None:
    """Raise before any optimizer consumes a non-finite loss."""
    if all(math.isfinite(v) for k, v in rec.items() if k != "step"):
        return
    snap = {"step": state.step + 1, **rec}
    raise TrainingError(f"non-finite loss at step {snap['step']}: {snap}", snap)


# --- checkpoints ----------------------------------------------------------

def _optimizer_arrays(opt: torch.optim.Adam, names) -> "OrderedDict[str, torch.Tensor]":
    out = OrderedDict()
    for name, p in zip(names, opt.param_groups[0]["params"]):
        st = opt.state.get(p)
        if not st:
            continue
        out[f"{name}/exp_avg"] = st["exp_avg"]
        out[f"{name}/exp_avg_sq"] = st["exp_avg_sq"]
        out[f"{name}/step"] = torch.as_tensor(float(st["step"]))
    return out


def _load_optimizer_arrays(opt: torch.optim.Adam, names, arrays, prefix):
    for name, p in zip(names, opt.param_groups[0]["params"]):
        key = f"{prefix}{name}"
        if f"{key}/exp_avg" not in arrays:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(arrays[f"{key}/step"])),
            "exp_avg": torch.as_tensor(arrays[f"{key}/exp_avg"]).to(p.dtype).clone(),
            "exp_avg_sq": torch.as_tensor(arrays[f"{key}/exp_avg_sq"]).to(p.dtype).clone(),
        }


def config_echo(gen_cfg, disc_cfg, cfg, loss_cfg, degradation: DegradationConfig | None = None) -> dict:
    degradation = degradation or DegradationConfig(gen_cfg.scale)
    return {"generator": asdict(gen_cfg), "discriminator": asdict(disc_cfg),
            "train": asdict(cfg), "loss": asdict(loss_cfg), "degradation": asdict(degradation)}


def save_checkpoint(run_dir, state: TrainState, echo: dict) -> Path:
    """Write ``ckpt_<step>/`` atomically under ``run_dir``."""
    g, d = state.generator, state.discriminator
    g_names = [n for n, _ in g.named_parameters()]
    d_names = [n for n, _ in d.named_parameters()]
    opt = OrderedDict()
    for k, v in _optimizer_arrays(state.opt_g, g_names).items():
        opt[f"generator/{k}"] = v
    for k, v in _optimizer_arrays(state.opt_d, d_names).items():
        opt[f"discriminator/{k}"] = v
    files = {
        "generator.bin": ckpt.dumps_arrays(network_params(g), echo),
        "discriminator.bin": ckpt.dumps_arrays(network_params(d), echo),
        "optimizer.bin": ckpt.dumps_arrays(opt, echo),
        "config.json": (json.dumps(echo, indent=2, sort_keys=True) + "\n").encode(),
        "rng.json": (json.dumps({"seed": echo["train"]["seed"], "step": state.step}, sort_keys=True)
                     + "\n").encode(),
        "curves.csv": curves_csv(state.history).encode(),
    }
    return ckpt.write_dir_atomic(Path(run_dir) / f"ckpt_{state.step}", files)


def load_checkpoint(path, dtype=torch.float32):
    """Rebuild a :class:`TrainState` and its configs from a ``ckpt_<step>`` dir."""
    path = Path(path)
    echo = json.loads((path / "config.json").read_text())
    gen_cfg, disc_cfg, cfg, loss_cfg = configs_from_echo(echo)
    state = init_state(gen_cfg, disc_cfg, cfg, dtype)
    g_params, _ = ckpt.load_arrays(path / "generator.bin")
    d_params, _ = ckpt.load_arrays(path / "discriminator.bin")
    load_network_params(state.generator, g_params)
    load_network_params(state.discriminator, d_params)
    opt, _ = ckpt.load_arrays(path / "optimizer.bin")
    _load_optimizer_arrays(state.opt_g, [n for n, _ in state.generator.named_parameters()], opt,
                           "generator/")
    _load_optimizer_arrays(state.opt_d, [n for n, _ in state.discriminator.named_parameters()], opt,
                           "discriminator/")
    state.step = json.loads((path / "rng.json").read_text())["step"]
    state.history = read_curves(path / "curves.csv")
    return state, (gen_cfg, disc_cfg, cfg, loss_cfg)


def configs_from_echo(echo: dict):
    return (GeneratorConfig(**echo["generator"]), DiscriminatorConfig(**echo["discriminator"]),
            TrainConfig(**echo["train"]), LossConfig(**echo["loss"]))


def curves_csv(history) -> str:
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=CURVE_FIELDS, lineterminator="\n", extrasaction="ignore")
    wr.writeheader()
    for rec in history:
        wr.writerow({k: (rec[k] if k == "step" else repr(rec[k])) for k in CURVE_FIELDS})
    return buf.getvalue()


def read_curves(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in rec.items()}
                for rec in csv.DictReader(fh)]


# --- loop -----------------------------------------------------------------

def patch_dataset(volumes, cfg: TrainConfig, dc: DegradationConfig):
    """All HR training patches of ``volumes`` and their degraded LR versions."""
    hr, lr = [], []
    for v in volumes:
        grid = PatchGrid.for_shape(v.shape, cfg.patch_shape, cfg.patch_step)
        for p in extract_patches(v, grid):
            hr.append(p.transpose(3, 0, 1, 2))
            lr.append(degrade(p, dc).transpose(3, 0, 1, 2))
    if not hr:
        raise ValueError("empty training set")
    return np.stack(hr).astype(np.float32), np.stack(lr).astype(np.float32)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, 1000 + epoch]).permutation(n)


def train(volumes, cfg: TrainConfig, loss_cfg: LossConfig, gen_cfg: GeneratorConfig,
          disc_cfg: DiscriminatorConfig, run_dir=None, state: TrainState | None = None,
          dtype=torch.float32, max_steps: int | None = None, progress=None,
          degradation: DegradationConfig | None = None) -> TrainState:
    """Train for ``cfg.epochs`` epochs over shuffled patch batches.

    Passing a ``state`` (e.g. from :func:`load_checkpoint`) resumes at its
    step; the batch order is a pure function of ``(seed, epoch)`` so a
    resumed run replays exactly what an uninterrupted run would have seen.
    ``max_steps`` stops early (global step count), for interrupting runs.
    """
    torch.use_deterministic_algorithms(True)
    dc = degradation or DegradationConfig(gen_cfg.scale)
    if dc.factor != gen_cfg.scale:
        raise ValueError(f"degradation factor {dc.factor} does not match generator scale {gen_cfg.scale}")
    echo = config_echo(gen_cfg, disc_cfg, cfg, loss_cfg, dc)
    if state is None:
        state = init_state(gen_cfg, disc_cfg, cfg, dtype)
    hr_all, lr_all = patch_dataset(volumes, cfg, dc)
    if tuple(hr_all.shape[2:]) != disc_cfg.input_shape:
        raise ValueError(f"patch shape {hr_all.shape[2:]} does not match discriminator input {disc_cfg.input_shape}")
    n = len(hr_all)
    per_epoch = n // cfg.batch_patches
    if cfg.steps_per_epoch:
        per_epoch = min(per_epoch, cfg.steps_per_epoch)
    if per_epoch < 1:
        raise ValueError(f"{n} patches cannot fill a batch of {cfg.batch_patches}")
    total = cfg.epochs * per_epoch
    if max_steps is not None:
        total = min(total, max_steps)
    dt = next(state.generator.parameters()).dtype

    while state.step < total:
        epoch, i = divmod(state.step, per_epoch)
        order = epoch_order(n, cfg.seed, epoch)
        idx = np.sort(order[i * cfg.batch_patches:(i + 1) * cfg.batch_patches])
        hr = torch.as_tensor(hr_all[idx], dtype=dt)
        lr = torch.as_tensor(lr_all[idx], dtype=dt)
        train_step(state, hr, cfg, loss_cfg, lr_batch=lr)
        if progress is not None:
            progress(state)
        if run_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(run_dir, state, echo)
    if run_dir is not None:
        save_checkpoint(run_dir, state, echo)
        Path(run_dir, "curves.csv").write_text(curves_csv(state.history))
    return state
