"""End-to-end training on a small synthetic category.

Generates a few ellipsoid videos (posed masks, distance transforms, point
clouds, and feature maps rendered from a fixed smooth descriptor field),
then runs both training stages at a reduced scale and reports the hold-out
losses per epoch. Expect a couple of minutes on a laptop CPU.

Run:  python3 demos/03_synthetic_training.py
"""

import tempfile
from pathlib import Path

from tetramorph.config import Config
from tetramorph.data import SyntheticSpec, gen_synthetic, load_dataset
from tetramorph.model import new_model, save_model
from tetramorph.train import train_joint, train_template

out_dir = Path(__file__).parent

with tempfile.TemporaryDirectory() as td:
    print("== generating a synthetic ellipsoid category ==")
    spec = SyntheticSpec(family="ellipsoid", n_videos=5, frames=6, seed=4,
                         image_size=48, feat_size=24, feature_dim=48,
                         cloud_points=800, focal=42.0)
    category_dir, _ = gen_synthetic(td, spec)
    records = load_dataset(category_dir)
    n = sum(len(r.samples) for r in records)
    print(f"{len(records)} videos, {n} samples at {category_dir}")

    print("\n== training, reduced scale ==")
    cfg = Config(backbone_channels=48, feature_dim=48, latent_dim=32,
                 sdf_hidden=64, feat_hidden=64, deform_hidden=64,
                 encoder_dims=(32, 32, 32, 32),
                 adapter_dims=(64, 64, 48),
                 vertex_samples=60, grid_resolution=10,
                 batch=6, grad_accum=1, epochs=4, holdout=0.2, lr=1e-3,
                 sdf_samples=128, pretrain_steps=400, seed=0)

    model = new_model(cfg.field_spec(), grid_resolution=cfg.grid_resolution,
                      seed=cfg.seed, temperature=cfg.temperature,
                      vertex_samples=cfg.vertex_samples)
    tc = cfg.train_config()

    def log(ev):
        keys = ("stage", "epoch", "holdout", "chamfer", "mask", "appearance")
        print("  " + " ".join(f"{k}={ev[k]}" for k in keys if k in ev))

    ck1 = train_template(records, tc, model, log=log)
    print(f"template stage best epoch {ck1.epoch}, "
          f"holdout loss {ck1.holdout_loss:.4f}")

    ck2 = train_joint(records, tc, ck1, log=log)
    print(f"joint stage best epoch {ck2.epoch}, "
          f"holdout loss {ck2.holdout_loss:.4f}")

    model_path = out_dir / "demo_model.mcm"
    save_model(ck2.model, model_path)
    print(f"\nwrote {model_path}")
