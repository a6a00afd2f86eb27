"""Training and evaluation engine: deterministic loops, JSONL metrics,
bitwise-resumable checkpoints, the gradient-check entry point, and mask
export.

Determinism contract: all randomness descends from the run seed through
counter-based Philox streams (model init, batch sampling, random masks,
evaluation masks); parameters update in registration order; metric lines
are plain JSON appended per interval.  A checkpoint holds the config
snapshot, parameters and optimizer state as float64 buffers, and the
generator states, so save → load → continue reproduces the uninterrupted
run bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import backward, finite_diff_grad, set_finite_checks
from .config import ExperimentConfig
from .errors import ConfigError, ContractError, NumericError
from .fusion import FusionModel
from .objective import LossConfig, task_loss, total_loss
from .storage import load_bundle, save_bundle
from .synth import (
    Dataset,
    HeterogeneousConfig,
    HomogeneousConfig,
    gen_heterogeneous,
    gen_homogeneous,
    load_dataset,
)

METRICS_NAME = "metrics.jsonl"
CHECKPOINT_DIR = "checkpoint"


def _stream(seed: int, lane: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(lane,))))


def generate_data(cfg: ExperimentConfig, out_dir) -> Dataset:
    """Materialize the dataset the config describes."""
    if cfg.topology == "homogeneous":
        return gen_homogeneous(HomogeneousConfig(
            num_modalities=max(cfg.modalities, 2), grid=cfg.grid,
            latent_channels=cfg.latent_channels, train_samples=cfg.train_samples,
            val_samples=cfg.val_samples, noise_sigma=cfg.noise_sigma,
            num_classes=cfg.num_classes, mix_weight=cfg.mix_weight, seed=cfg.seed,
        ), out_dir)
    return gen_heterogeneous(HeterogeneousConfig(
        num_points=cfg.point_tokens, image_width=cfg.image_width,
        image_height=cfg.image_height, patch_size=cfg.patch_size,
        point_feature_channels=cfg.point_feature_channels,
        image_field_channels=cfg.image_field_channels,
        train_samples=cfg.train_samples, val_samples=cfg.val_samples,
        noise_sigma=cfg.noise_sigma, out_of_view_fraction=cfg.out_of_view_fraction,
        mix_weight=cfg.mix_weight, seed=cfg.seed,
    ), out_dir)


def build_model(cfg: ExperimentConfig) -> FusionModel:
    if cfg.topology == "homogeneous":
        return FusionModel.build_homogeneous(
            num_modalities=cfg.modalities, in_channels=cfg.latent_channels + 1,
            channels=cfg.channels, heads=cfg.heads, layers=cfg.layers, tokens=cfg.tokens,
            seed=cfg.seed, mlp_ratio=cfg.mlp_ratio,
            out_channels=cfg.num_classes if cfg.task == "cross_entropy" else 1,
            share_msa_mlp=cfg.share_msa_mlp, share_pe=cfg.share_pe,
            fusion_enabled=cfg.fusion_enabled, threshold=cfg.threshold,
            residuals=cfg.residuals, mask_mode=cfg.mask_mode, random_rate=cfg.random_rate,
            dtype=cfg.dtype)
    return FusionModel.build_heterogeneous(
        point_in_channels=cfg.point_feature_channels + 1, point_channels=cfg.point_channels,
        point_heads=cfg.point_heads, point_layers=cfg.point_layers,
        point_tokens=cfg.point_tokens, image_in_channels=cfg.image_field_channels,
        image_channels=cfg.image_channels, image_heads=cfg.image_heads,
        image_layers=cfg.image_layers, image_tokens=cfg.image_tokens, seed=cfg.seed,
        mlp_ratio=cfg.mlp_ratio, out_channels=1, fusion_enabled=cfg.fusion_enabled,
        threshold=cfg.threshold, residuals=cfg.residuals, bidirectional=cfg.bidirectional,
        mask_mode=cfg.mask_mode, random_rate=cfg.random_rate,
        num_query_tokens=cfg.num_query_tokens, dtype=cfg.dtype)


def _check_dataset(cfg: ExperimentConfig, ds: Dataset) -> None:
    man = ds.manifest
    if cfg.topology == "homogeneous":
        if ds.kind != "homogeneous":
            raise ConfigError(f"config expects a homogeneous dataset, found {ds.kind}")
        if man["tokens"] != cfg.tokens or man["latent_channels"] != cfg.latent_channels:
            raise ConfigError("dataset token/channel layout does not match the model config")
        if cfg.modalities > man["num_modalities"]:
            raise ConfigError(f"dataset provides {man['num_modalities']} modalities, "
                              f"config wants {cfg.modalities}")
    else:
        if ds.kind != "heterogeneous":
            raise ConfigError(f"config expects a heterogeneous dataset, found {ds.kind}")
        if man["num_points"] != cfg.point_tokens or man["num_patches"] != cfg.image_tokens:
            raise ConfigError("dataset geometry does not match the model config")
        if man["point_feature_channels"] != cfg.point_feature_channels \
                or man["image_field_channels"] != cfg.image_field_channels:
            raise ConfigError("dataset channels do not match the model config")


class Optimizer:
    """Adam (default) or plain SGD over the registered parameter list."""

    def __init__(self, named_params, kind: str = "adam", lr: float = 2e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named_params = list(named_params)
        self.kind = kind
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data, dtype=np.float64)
                  for name, p in self.named_params}
        self.v = {name: np.zeros_like(p.data, dtype=np.float64)
                  for name, p in self.named_params}

    def step(self, grads: dict) -> None:
        self.t += 1
        # bias correction folded into the step size:
        # lr mhat/(sqrt(vhat)+eps) == lr_t m/(sqrt(v)+eps_t)
        correction2 = math.sqrt(1.0 - self.beta2 ** self.t)
        lr_t = self.lr * correction2 / (1.0 - self.beta1 ** self.t)
        eps_t = self.eps * correction2
        for name, p in self.named_params:
            g = grads[p]
            if self.kind == "sgd":
                p.data -= (self.lr * g).astype(p.data.dtype, copy=False)
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(v)
            denom += eps_t
            p.data -= (lr_t * m / denom).astype(p.data.dtype, copy=False)

    def state_arrays(self) -> dict:
        out = {}
        for name, _ in self.named_params:
            out[f"adam_m.{name}"] = self.m[name]
            out[f"adam_v.{name}"] = self.v[name]
        return out

    def load_state(self, arrays: dict, t: int) -> None:
        self.t = t
        for name, _ in self.named_params:
            self.m[name] = arrays[f"adam_m.{name}"].copy()
            self.v[name] = arrays[f"adam_v.{name}"].copy()


def _rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=lambda o: o.tolist()))


def _restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.Philox()
    fixed = dict(state)
    inner = dict(fixed["state"])
    inner["counter"] = np.array(inner["counter"], dtype=np.uint64)
    inner["key"] = np.array(inner["key"], dtype=np.uint64)
    fixed["state"] = inner
    fixed["buffer"] = np.array(fixed["buffer"], dtype=np.uint64)
    bg.state = fixed
    return np.random.Generator(bg)


@dataclass
class TrainState:
    model: FusionModel
    optimizer: Optimizer
    sampler_rng: np.random.Generator
    mask_rng: np.random.Generator
    step: int


def save_checkpoint(directory, cfg: ExperimentConfig, state: TrainState) -> Path:
    tensors = {f"param.{name}": p.data for name, p in state.model.parameters()}
    tensors.update(state.optimizer.state_arrays())
    manifest = {
        "kind": "checkpoint",
        "config": cfg.to_dict(),
        "step": state.step,
        "optimizer_t": state.optimizer.t,
        "sampler_rng": _rng_state(state.sampler_rng),
        "mask_rng": _rng_state(state.mask_rng),
    }
    return save_bundle(directory, manifest, tensors, dtype="f8")


def load_checkpoint(directory):
    manifest, tensors = load_bundle(directory)
    if manifest.get("kind") != "checkpoint":
        raise ConfigError(f"{directory} is not a checkpoint bundle")
    cfg = ExperimentConfig.from_dict(manifest["config"])
    model = build_model(cfg)
    for name, p in model.parameters():
        stored = tensors.get(f"param.{name}")
        if stored is None:
            raise ConfigError(f"checkpoint is missing parameter '{name}'")
        if tuple(stored.shape) != p.data.shape:
            raise ConfigError(f"checkpoint shape mismatch for '{name}'")
        p.data[...] = stored.astype(p.data.dtype)
    optimizer = Optimizer(model.parameters(), kind=cfg.optimizer, lr=cfg.learning_rate,
                          beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.epsilon)
    optimizer.load_state(tensors, manifest["optimizer_t"])
    state = TrainState(model=model, optimizer=optimizer,
                       sampler_rng=_restore_rng(manifest["sampler_rng"]),
                       mask_rng=_restore_rng(manifest["mask_rng"]),
                       step=manifest["step"])
    return cfg, state


# -- batching -------------------------------------------------------------------


def _slice_batch(cfg: ExperimentConfig, ds: Dataset, split: str, idx: np.ndarray,
                 corr: np.ndarray | None):
    dt = cfg.dtype
    if cfg.topology == "homogeneous":
        inputs = [ds.split(split, f"x_m{m}")[idx].astype(dt) for m in range(cfg.modalities)]
        key = "y_cls" if cfg.task == "cross_entropy" else "y"
        target = ds.split(split, key)[idx]
        if cfg.task != "cross_entropy":
            target = target.astype(dt)
        targets = [target for _ in range(cfg.modalities)]
        return inputs, targets, None
    inputs = [ds.split(split, "x_point")[idx].astype(dt),
              ds.split(split, "x_image")[idx].astype(dt)]
    targets = [ds.split(split, "y_point")[idx].astype(dt),
               ds.split(split, "y_image")[idx].astype(dt)]
    correspondences = {"point_to_image": corr[idx]}
    if cfg.bidirectional:
        correspondences["image_to_point"] = _patch_to_point(corr[idx], cfg.image_tokens)
    return inputs, targets, correspondences


def _patch_to_point(point_to_image: np.ndarray, num_patches: int) -> np.ndarray:
    """Inverse correspondence: lowest point index projecting into each patch."""
    batch, n_point = point_to_image.shape
    out = np.full((batch, num_patches), -1, dtype=np.int64)
    for b in range(batch):
        for n in range(n_point - 1, -1, -1):
            patch = point_to_image[b, n]
            if patch >= 0:
                out[b, patch] = n
    return out


def _task_targets(cfg: ExperimentConfig, predictions, targets):
    losses = []
    for pred, tgt in zip(predictions, targets):
        if cfg.task == "cross_entropy":
            losses.append(task_loss(pred, tgt.astype(np.int64), "cross_entropy"))
        else:
            losses.append(task_loss(pred, tgt, "mse"))
    return losses


def _loss_config(cfg: ExperimentConfig) -> LossConfig:
    return LossConfig(lambda_token=cfg.lambda_token, lambda_channel=cfg.lambda_channel,
                      task=cfg.task, modality_weights=cfg.modality_weights)


def _forward_loss(cfg: ExperimentConfig, model: FusionModel, ds: Dataset, split: str,
                  idx: np.ndarray, corr, mask_rng):
    inputs, targets, correspondences = _slice_batch(cfg, ds, split, idx, corr)
    out = model.forward(inputs, correspondences=correspondences, mask_rng=mask_rng)
    tasks = _task_targets(cfg, out.predictions, targets)
    loss, parts = total_loss(tasks, out.scores, model.ln_scales(), _loss_config(cfg))
    return out, targets, loss, parts


def _mean_scores(out) -> list:
    return [[None if s is None else float(s.values.data.mean()) for s in per_mod]
            for per_mod in out.scores]


# -- training -------------------------------------------------------------------


def train(cfg: ExperimentConfig, out_dir, resume_state: TrainState | None = None,
          log=print) -> Path:
    """Run the configured training; returns the checkpoint path.

    Writes ``metrics.jsonl`` (one JSON object per line) and a final
    checkpoint bundle under ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not cfg.data_path:
        raise ConfigError("data_path is required for training")
    ds = load_dataset(cfg.data_path)
    _check_dataset(cfg, ds)
    corr = ds.correspondences("train") if cfg.topology == "heterogeneous" else None

    if resume_state is None:
        model = build_model(cfg)
        optimizer = Optimizer(model.parameters(), kind=cfg.optimizer, lr=cfg.learning_rate,
                              beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.epsilon)
        state = TrainState(model=model, optimizer=optimizer,
                           sampler_rng=_stream(cfg.seed, 1), mask_rng=_stream(cfg.seed, 2),
                           step=0)
    else:
        state = resume_state

    params = [p for _, p in state.model.parameters()]
    n_train = ds.sample_count("train")
    metrics_path = out_dir / METRICS_NAME

    checks_were_on = set_finite_checks(False)
    try:
        with metrics_path.open("a") as sink:
            for step in range(state.step, cfg.steps):
                idx = state.sampler_rng.integers(0, n_train, size=cfg.batch_size)
                out, _, loss, parts = _forward_loss(cfg, state.model, ds, "train", idx,
                                                    corr, state.mask_rng)
                if not math.isfinite(parts["total"]):
                    raise NumericError(f"non-finite loss {parts['total']} at step {step} "
                                       f"(task terms {parts['task']})")
                grads = backward(loss, params)
                state.optimizer.step({p: grads[p] for p in params})
                state.step = step + 1
                if (step + 1) % cfg.metrics_interval == 0 or step + 1 == cfg.steps:
                    record = {"step": step + 1, "loss": parts["total"],
                              "task": parts["task"], "token_l1": parts["token_l1"],
                              "channel_l1": parts["channel_l1"],
                              "mean_score": _mean_scores(out),
                              "substituted_fraction": out.fractions}
                    sink.write(json.dumps(record) + "\n")
                if cfg.checkpoint_interval and (step + 1) % cfg.checkpoint_interval == 0 \
                        and step + 1 < cfg.steps:
                    save_checkpoint(out_dir / f"{CHECKPOINT_DIR}_step{step + 1}", cfg, state)

            for split in ("train", "val"):
                summary = evaluate_model(cfg, state.model, ds, split, seed=cfg.seed)
                summary["event"] = f"final_{split}_eval"
                summary["step"] = state.step
                sink.write(json.dumps(summary) + "\n")
    finally:
        set_finite_checks(checks_were_on)

    ckpt_path = save_checkpoint(out_dir / CHECKPOINT_DIR, cfg, state)
    log(f"finished {state.step} steps; checkpoint at {ckpt_path.parent}")
    return ckpt_path.parent


def evaluate_model(cfg: ExperimentConfig, model: FusionModel, ds: Dataset, split: str,
                   seed: int = 0) -> dict:
    """Forward-only metrics over a split in fixed batch order."""
    _check_dataset(cfg, ds)
    corr = ds.correspondences(split) if cfg.topology == "heterogeneous" else None
    count = ds.sample_count(split)
    eval_mask_rng = _stream(seed, 3)

    task_sums = None
    loss_sum = 0.0
    token_sum = 0.0
    ens_sq_sum = 0.0
    ens_n = 0
    frac_sums = None
    for start in range(0, count, cfg.batch_size):
        idx = np.arange(start, min(start + cfg.batch_size, count))
        out, targets, loss, parts = _forward_loss(cfg, model, ds, split, idx, corr,
                                                  eval_mask_rng)
        weight = len(idx)
        if task_sums is None:
            task_sums = np.zeros(len(parts["task"]))
            frac_sums = [np.zeros(len(per_mod)) for per_mod in out.fractions]
        task_sums += np.array(parts["task"]) * weight
        loss_sum += parts["total"] * weight
        token_sum += parts["token_l1"] * weight
        for m, per_mod in enumerate(out.fractions):
            frac_sums[m] += np.asarray(per_mod) * weight
        if cfg.topology == "homogeneous" and cfg.task == "mse":
            ens = np.stack([p.data for p in out.predictions]).mean(axis=0)
            ens_sq_sum += float(((ens - targets[0]) ** 2).sum())
            ens_n += ens.size

    result = {
        "split": split,
        "samples": count,
        "task": (task_sums / count).tolist(),
        "loss": loss_sum / count,
        "token_l1": token_sum / count,
        "substituted_fraction": [(arr / count).tolist() for arr in frac_sums],
    }
    if ens_n:
        result["ensemble_mse"] = ens_sq_sum / ens_n
    return result


def evaluate_checkpoint(ckpt_dir, split: str) -> dict:
    cfg, state = load_checkpoint(ckpt_dir)
    if not cfg.data_path:
        raise ConfigError("checkpoint config has no dataset path")
    ds = load_dataset(cfg.data_path)
    return evaluate_model(cfg, state.model, ds, split, seed=cfg.seed)


# -- gradient check ---------------------------------------------------------------


def _grad_check_model(model: FusionModel, inputs, targets, correspondences, forced,
                      loss_cfg: LossConfig, h: float):
    """Max relative error per parameter group, analytic vs central difference.

    The substitution masks are held fixed and layers >= 2 read a frozen
    positional snapshot, so the objective is differentiable everywhere the
    oracle probes it.
    """
    frozen = [s.pe.table.data.copy() for s in model.stacks]

    def loss_fn():
        out = model.forward(inputs, correspondences=correspondences, forced_masks=forced,
                            frozen_pe=frozen)
        tasks = [task_loss(out.predictions[m], targets[m]) for m in range(len(targets))]
        loss, _ = total_loss(tasks, out.scores, model.ln_scales(), loss_cfg)
        return loss

    params = model.parameters()
    grads = backward(loss_fn(), [p for _, p in params])
    report = {}
    for name, p in params:
        fd = finite_diff_grad(lambda _: loss_fn().item(), p, h=h)
        a = grads[p]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-6)
        report[name] = float(np.max(np.abs(a - fd) / denom))
    return report


def grad_check(tolerance: float = 1e-4, h: float = 1e-5, residuals: bool = True,
               log=print) -> dict:
    """Check every parameter group of both topologies; returns the report."""
    reports = {}

    g = np.random.Generator(np.random.Philox(np.random.SeedSequence(1234)))
    model = FusionModel.build_homogeneous(
        num_modalities=2, in_channels=5, channels=16, heads=4, layers=2, tokens=8,
        seed=7, residuals=residuals)
    inputs = [g.standard_normal((2, 8, 5)) for _ in range(2)]
    targets = [g.standard_normal((2, 8, 1)) for _ in range(2)]
    forced = [[g.random((2, 8)) < 0.5 for _ in range(2)] for _ in range(2)]
    reports["homogeneous"] = _grad_check_model(
        model, inputs, targets, None, forced,
        LossConfig(lambda_token=1e-3, lambda_channel=1e-3), h)

    model = FusionModel.build_heterogeneous(
        point_in_channels=5, point_channels=12, point_heads=2, point_layers=2,
        point_tokens=6, image_in_channels=6, image_channels=16, image_heads=4,
        image_layers=2, image_tokens=4, seed=8, residuals=residuals)
    inputs = [g.standard_normal((2, 6, 5)), g.standard_normal((2, 4, 6))]
    targets = [g.standard_normal((2, 6, 1)), g.standard_normal((2, 4, 1))]
    idx = g.integers(0, 4, size=(2, 6))
    idx[:, -1] = -1
    forced = [[g.random((2, 6)) < 0.5 for _ in range(2)], [None, None]]
    reports["heterogeneous"] = _grad_check_model(
        model, inputs, targets, {"point_to_image": idx}, forced,
        LossConfig(lambda_token=1e-3, lambda_channel=1e-3), h)

    worst = 0.0
    for topo, groups in reports.items():
        top = max(groups, key=groups.get)
        log(f"{topo}: {len(groups)} groups, max rel err {groups[top]:.3e} ({top})")
        worst = max(worst, groups[top])
    reports["max_rel_err"] = worst
    reports["tolerance"] = tolerance
    reports["passed"] = bool(worst < tolerance)
    return reports


# -- mask export ------------------------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5), 8-bit grayscale."""
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise ContractError(f"PGM wants a 2-d image, got {image.shape}")
    h, w = image.shape
    with open(path, "wb") as sink:
        sink.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        sink.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as src:
        magic = src.readline().strip()
        if magic != b"P5":
            raise ContractError(f"{path} is not a binary PGM")
        dims = src.readline().split()
        maxval = int(src.readline())
        w, h = int(dims[0]), int(dims[1])
        if maxval != 255:
            raise ContractError("only 8-bit PGM supported")
        data = np.frombuffer(src.read(w * h), dtype=np.uint8)
    return data.reshape(h, w)


def export_masks(ckpt_dir, sample: int, layers, out_dir, split: str = "val") -> list:
    """Render substitution masks for one sample.

    Homogeneous: one PGM per modality per layer, substituted tokens white,
    kept black, token grid upscaled by the patch size.  Heterogeneous:
    substituted point indices as a JSON list instead.
    """
    cfg, state = load_checkpoint(ckpt_dir)
    ds = load_dataset(cfg.data_path)
    _check_dataset(cfg, ds)
    if not 0 <= sample < ds.sample_count(split):
        raise ConfigError(f"sample {sample} outside the {split} split")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    idx = np.array([sample])
    corr = ds.correspondences(split) if cfg.topology == "heterogeneous" else None
    inputs, _, correspondences = _slice_batch(cfg, ds, split, idx, corr)
    out = state.model.forward(inputs, correspondences=correspondences,
                              mask_rng=_stream(cfg.seed, 3))

    written = []
    if cfg.topology == "homogeneous":
        g = cfg.grid
        for m in range(cfg.modalities):
            for layer in layers:
                if not 1 <= layer <= cfg.layers:
                    raise ConfigError(f"layer {layer} outside 1..{cfg.layers}")
                mask = out.applied[m][layer - 1]
                if mask is None:
                    mask = np.zeros((1, cfg.tokens), dtype=bool)
                cells = mask[0].reshape(g, g).astype(np.uint8) * 255
                image = np.kron(cells, np.ones((cfg.patch_size, cfg.patch_size),
                                                dtype=np.uint8))
                path = out_dir / f"mask_m{m}_l{layer}_s{sample}.pgm"
                write_pgm(path, image)
                written.append(path)
    else:
        payload = []
        for m, name in ((0, "point"), (1, "image")):
            for layer in layers:
                if layer > len(out.applied[m]):
                    continue
                applied = out.applied[m][layer - 1]
                below = out.masks[m][layer - 1]
                payload.append({
                    "modality": name, "layer": layer,
                    "substituted": [] if applied is None
                    else np.flatnonzero(applied[0]).tolist(),
                    "below_threshold": [] if below is None
                    else np.flatnonzero(below.substitute[0]).tolist(),
                })
        path = out_dir / f"masks_s{sample}.json"
        path.write_text(json.dumps(payload, indent=2))
        written.append(path)
    return written
