"""Calibration sweep for the default homogeneous config (not part of the package)."""
import sys
import time
from pathlib import Path

import numpy as np

from tokenfusion.config import ExperimentConfig
from tokenfusion.harness import (
    _slice_batch,
    _stream,
    evaluate_checkpoint,
    generate_data,
    load_checkpoint,
    train,
)
from tokenfusion.synth import load_dataset


def purity(ckpt):
    cfg, state = load_checkpoint(ckpt)
    ds = load_dataset(cfg.data_path)
    visible = [ds.arrays[f"visible_m{m}"].astype(bool) for m in range(2)]
    inside = total = 0
    per_ml = np.zeros((2, cfg.layers))
    cnt = np.zeros((2, cfg.layers))
    for start in range(0, 64, 8):
        idx = np.arange(start, start + 8)
        inputs, _, _ = _slice_batch(cfg, ds, "val", idx, None)
        out = state.model.forward(inputs, mask_rng=_stream(cfg.seed, 3))
        for m in range(2):
            hidden = ~visible[m]
            for l in range(cfg.layers):
                sub = out.applied[m][l]
                inside += (sub & hidden[None, :]).sum()
                total += sub.sum()
                per_ml[m, l] += sub.sum()
                cnt[m, l] += sub.size
    return inside / max(total, 1), per_ml / cnt


def main(root: str, seed: int = 0):
    root = Path(root)
    base = dict(batch_size=2, precision="float32", steps=2000, seed=seed)
    data_dir = root / "data"
    if not (data_dir / "manifest.json").exists():
        generate_data(ExperimentConfig(**base), data_dir)
    t0 = time.time()
    for name, extra in (
        ("lam1e3", dict(lambda_token=1e-3)),
        ("lam0", dict(lambda_token=0.0)),
        ("lam1e4", dict(lambda_token=1e-4)),
        ("nofusion", dict(lambda_token=0.0, fusion_enabled=False)),
        ("random30", dict(lambda_token=0.0, mask_mode="random", random_rate=0.3)),
    ):
        cfg = ExperimentConfig(data_path=str(data_dir), **base, **extra)
        ckpt = train(cfg, root / name, log=lambda s: None)
        ev = evaluate_checkpoint(ckpt, "val")
        frac = ev["substituted_fraction"]
        mean_frac = sum(sum(m) for m in frac) / sum(len(m) for m in frac)
        line = (f"{name}: frac={mean_frac:.4f} ens={ev.get('ensemble_mse'):.4f} "
                f"task={['%.3f' % t for t in ev['task']]}")
        if name in ("lam1e3", "lam1e4"):
            pur, per = purity(ckpt)
            line += f" purity={pur:.1%} per_ml={np.round(per, 3).tolist()}"
        print(line + f" ({time.time() - t0:.0f}s)", flush=True)


if __name__ == "__main__":
    main(sys.argv[1], int(sys.argv[2]) if len(sys.argv) > 2 else 0)
