"""Key = value configuration shared by every subcommand.

Defaults reproduce the engine's documented training setup. Unknown keys
are rejected; command-line flags override file values; the effective
configuration is echoed into output directories for provenance.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import DataError
from .fields import FieldSpec
from .losses import LossWeights
from .train import TrainConfig


@dataclass
class Config:
    # optimization
    lr: float = 1e-4
    batch: int = 12
    grad_accum: int = 2
    epochs: int = 20
    holdout: float = 0.10
    seed: int = 0
    deterministic: bool = True
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 5
    # objective weights
    lambda_appearance: float = 0.1
    lambda_chamfer: float = 0.1
    lambda_mask: float = 1.0
    lambda_mask_dt: float = 100.0
    lambda_eikonal: float = 0.01
    lambda_deform: float = 0.1
    lambda_deform_smooth: float = 0.01
    temperature: float = 14.3
    vertex_samples: int = 150
    # shape
    grid_resolution: int = 16
    sdf_layers: int = 5
    sdf_hidden: int = 256
    pretrain_steps: int = 800
    pretrain_radius: float = 0.7
    pretrain_lr: float = 0.01
    sdf_trainable_joint: bool = False
    sdf_samples: int = 512
    sdf_noise: float = 0.05
    # morph / appearance
    feature_dim: int = 128
    latent_dim: int = 256
    backbone_channels: int = 384
    feat_layers: int = 5
    feat_hidden: int = 256
    deform_layers: int = 5
    deform_hidden: int = 256
    encoder_dims: tuple = (256, 256, 256, 256)
    encoder_strides: tuple = (2, 2, 2, 2)
    adapter_dims: tuple = (512, 512, 128)
    adapter_upsample: tuple = (1, 1, 2)
    activation: str = "tanh"
    # rendering
    gamma: float = 0.01
    soft_faces: int = 8
    # inference
    n_starts: int = 12
    refine_steps: int = 30
    refine_lr: float = 0.05
    plateau: float = 1e-5
    eval_views: int = 0
    eval_pairs_per_video: int = 8
    eval_keypoints: int = 10
    # environment
    dataset: str = ""
    threads: int = 0

    def field_spec(self) -> FieldSpec:
        return FieldSpec(
            feature_dim=self.feature_dim, latent_dim=self.latent_dim,
            backbone_channels=self.backbone_channels,
            sdf_layers=self.sdf_layers, sdf_hidden=self.sdf_hidden,
            feat_layers=self.feat_layers, feat_hidden=self.feat_hidden,
            deform_layers=self.deform_layers, deform_hidden=self.deform_hidden,
            encoder_dims=tuple(self.encoder_dims),
            encoder_strides=tuple(self.encoder_strides),
            adapter_dims=tuple(self.adapter_dims),
            adapter_upsample=tuple(self.adapter_upsample),
            activation=self.activation)

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            appearance=self.lambda_appearance, chamfer=self.lambda_chamfer,
            mask=self.lambda_mask, mask_dt=self.lambda_mask_dt,
            eikonal=self.lambda_eikonal, deform=self.lambda_deform,
            deform_smooth=self.lambda_deform_smooth,
            temperature=self.temperature)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, batch=self.batch, grad_accum=self.grad_accum,
            epochs=self.epochs, holdout=self.holdout, seed=self.seed,
            adam_beta1=self.adam_beta1, adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps, sdf_samples=self.sdf_samples,
            sdf_noise=self.sdf_noise, gamma=self.gamma,
            soft_faces=self.soft_faces, patience=self.patience,
            sdf_trainable_joint=self.sdf_trainable_joint,
            pretrain_steps=self.pretrain_steps,
            pretrain_radius=self.pretrain_radius,
            pretrain_lr=self.pretrain_lr,
            deterministic=self.deterministic,
            weights=self.loss_weights())

    def as_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _convert(name, default, raw):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise DataError(f"config key {name}: expected true/false, got {raw!r}")
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.split(","))
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text, base: Config = None) -> Config:
    cfg = base or Config()
    known = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"config line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise DataError(f"config line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _convert(key, known[key], raw))
    return cfg


def load_config(path, base: Config = None) -> Config:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise DataError(f"{path}: cannot read config ({e})") from e
    return parse_config(text, base=base)
