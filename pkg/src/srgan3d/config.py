"""Flat ``key = value`` run configuration shared by every CLI command."""
from __future__ import annotations

from pathlib import Path

from .data import PhantomSpec
from .losses import LossConfig
from .networks import DiscriminatorConfig, GeneratorConfig
from .trainer import TrainConfig
from .volume import DegradationConfig


class ConfigError(ValueError):
    pass


# Desk-scale defaults. Full-size network widths are reachable through
# generator.base_filters=32, discriminator.base_filters=32, discriminator.dense_hidden=1024.
DEFAULTS: dict[str, object] = {
    "seed": 0,
    "data.n": 64,
    "data.seed": 0,
    "data.shape": (32, 32, 32),
    "data.train_fraction": 0.8,
    "data.n_ellipsoids": (4, 9),
    "data.radius_range": (2.5, 9.0),
    "data.intensity_range": (0.35, 1.0),
    "data.background_range": (0.0, 0.3),
    "data.background_smoothness": 4.0,
    "data.noise_sigma": 0.0,
    "degrade.factor": 2,
    "degrade.blur_sigma": 0.0,  # 0: factor / 2
    "degrade.kernel_radius": 0,  # 0: ceil(3 sigma)
    "upsample.method": "resize_conv",
    "upsample.kernel": 3,
    "generator.n_res_blocks": 6,
    "generator.base_filters": 16,
    "generator.batch_norm": True,
    "generator.leaky_slope": 0.2,
    "discriminator.base_filters": 16,
    "discriminator.dense_hidden": 64,
    "discriminator.batch_norm": True,
    "loss.alpha": 1e-3,
    "loss.real_label": 0.9,
    "loss.gdl_weight": 1.0,
    "train.lr_g": 1e-5,
    "train.lr_d": 1e-4,
    "train.batch_patches": 2,
    "train.adam_beta1": 0.9,
    "train.adam_beta2": 0.999,
    "train.adam_eps": 1e-8,
    "train.epochs": 20,
    "train.steps_per_epoch": 0,
    "train.d_updates_per_g": 1,
    "train.checkpoint_every": 0,
    "train.patch_shape": (16, 16, 16),
    "train.patch_step": (12, 12, 12),
    "infer.patch_shape": (8, 8, 8),  # LR voxels
    "infer.patch_step": (6, 6, 6),
    "infer.halo": -1,  # -1: generator receptive radius
    "infer.model": "checkpoint",  # or the test hooks nearest_stub / cubic_stub
    "eval.zoom_box": (8, 8, 16),  # HR y0, x0, size
    "eval.image_scale": 4,
}


def _parse(key: str, text: str):
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, tuple):
            kind = type(default[0])
            parts = [p for p in text.split(",") if p.strip()]
            if len(parts) != len(default):
                raise ValueError(f"expected {len(default)} comma-separated values")
            return tuple(kind(p) for p in parts)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {text!r} ({e})") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


class RunConfig:
    """Effective configuration: defaults, then config file, then overrides."""

    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self[k] = v

    def __getitem__(self, key):
        return self.values[key]

    def __setitem__(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _parse(key, value) if isinstance(value, str) else value

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    @classmethod
    def from_text(cls, text: str, origin: str = "<config>") -> "RunConfig":
        cfg = cls()
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{origin}:{n}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                cfg[key] = value
            except ConfigError as e:
                raise ConfigError(f"{origin}:{n}: {e}") from None
        return cfg

    @classmethod
    def load(cls, path=None, overrides=(), seed: int | None = None) -> "RunConfig":
        """Build from an optional file, ``key=value`` overrides and a master seed."""
        if path is not None:
            try:
                text = Path(path).read_text()
            except OSError as e:
                raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
            cfg = cls.from_text(text, str(path))
        else:
            cfg = cls()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, value = item.split("=", 1)
            cfg[key.strip()] = value
        if seed is not None:
            cfg["seed"] = cfg["data.seed"] = int(seed)
        cfg.validate()
        return cfg

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in sorted(self.values))

    def echo(self, out_dir) -> None:
        """Write the effective config into ``out_dir``."""
        Path(out_dir, "config.txt").write_text(self.to_text())

    # --- typed views ------------------------------------------------------

    def validate(self) -> None:
        try:
            self.phantom_spec(0)
            self.degradation()
            self.generator()
            self.discriminator()
            self.loss()
            self.train()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
        if self["data.n"] < 0:
            raise ConfigError("data.n must be >= 0")
        if self["infer.model"] not in ("checkpoint", "nearest_stub", "cubic_stub"):
            raise ConfigError(f"unknown infer.model {self['infer.model']!r}")

    def phantom_spec(self, seed: int) -> PhantomSpec:
        return PhantomSpec(
            shape=self["data.shape"], n_ellipsoids=self["data.n_ellipsoids"],
            radius_range=self["data.radius_range"], intensity_range=self["data.intensity_range"],
            background_range=self["data.background_range"],
            background_smoothness=self["data.background_smoothness"],
            noise_sigma=self["data.noise_sigma"], seed=seed)

    def degradation(self) -> DegradationConfig:
        return DegradationConfig(self["degrade.factor"], self["degrade.blur_sigma"] or None,
                                 self["degrade.kernel_radius"] or None)

    def generator(self) -> GeneratorConfig:
        return GeneratorConfig(
            n_res_blocks=self["generator.n_res_blocks"], base_filters=self["generator.base_filters"],
            kernel=self["upsample.kernel"], scale=self["degrade.factor"],
            upsample_method=self["upsample.method"], leaky_slope=self["generator.leaky_slope"],
            batch_norm=self["generator.batch_norm"], seed=self["seed"])

    def discriminator(self) -> DiscriminatorConfig:
        f = self["discriminator.base_filters"]
        return DiscriminatorConfig(
            input_shape=self["train.patch_shape"], conv_filters=(f, f, 2 * f, 2 * f, 4 * f, 4 * f, 8 * f, 8 * f),
            dense_hidden=self["discriminator.dense_hidden"], batch_norm=self["discriminator.batch_norm"],
            seed=self["seed"] + 1)

    def loss(self) -> LossConfig:
        return LossConfig(alpha=self["loss.alpha"], real_label=self["loss.real_label"],
                          gdl_weight=self["loss.gdl_weight"])

    def train(self) -> TrainConfig:
        keys = ("lr_g", "lr_d", "batch_patches", "adam_beta1", "adam_beta2", "adam_eps", "epochs",
                "steps_per_epoch", "d_updates_per_g", "checkpoint_every", "patch_shape", "patch_step")
        return TrainConfig(seed=self["seed"], **{k: self[f"train.{k}"] for k in keys})
