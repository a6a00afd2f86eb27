"""Training losses: per-modality task terms plus token and channel l1 penalties.

The token penalty sums every score vector the forward pass produced (all
layers, all modalities); scores are sigmoid outputs, so the absolute
value is the value itself.  The channel penalty is a true l1 norm over
the layer-norm scale vectors, with sign(0) = 0 at the kink.  Batched
score sums are averaged over the batch so penalty weights do not depend
on batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError

TASK_KINDS = ("mse", "cross_entropy")


@dataclass
class LossConfig:
    lambda_token: float = 1e-3
    lambda_channel: float = 0.0
    task: str = "mse"
    modality_weights: tuple = ()

    def __post_init__(self):
        if self.lambda_token < 0 or self.lambda_channel < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.task not in TASK_KINDS:
            raise ConfigError(f"unknown task kind '{self.task}'")

    def weight(self, m: int) -> float:
        if m < len(self.modality_weights):
            return float(self.modality_weights[m])
        return 1.0


def _iter_scores(scores):
    """Yield score Tensors from a ScoreVector, a flat list, or nested lists."""
    if scores is None:
        return
    if isinstance(scores, Tensor):
        yield scores
        return
    if hasattr(scores, "values") and isinstance(scores.values, Tensor):
        yield scores.values
        return
    for item in scores:
        yield from _iter_scores(item)


def token_pruning_loss(scores) -> Tensor:
    """Sum of all token scores over layers and modalities (batch-averaged)."""
    total = None
    for values in _iter_scores(scores):
        batch = values.shape[0] if values.ndim > 1 else 1
        term = values.sum() * (1.0 / batch)
        total = term if total is None else total + term
    if total is None:
        return ag.constant(0.0)
    return total


def channel_pruning_loss(ln_scales) -> Tensor:
    """Sum of l1 norms of the layer-norm scale vectors."""
    total = None
    for gamma in ln_scales:
        term = ag.absolute(gamma).sum()
        total = term if total is None else total + term
    if total is None:
        return ag.constant(0.0)
    return total


def task_loss(prediction: Tensor, target, kind: str = "mse") -> Tensor:
    if kind == "mse":
        target = ag.as_tensor(target)
        if prediction.shape != target.shape:
            raise ShapeError(f"prediction {prediction.shape} vs target {target.shape}")
        diff = prediction - target
        return (diff * diff).mean()
    if kind == "cross_entropy":
        classes = prediction.shape[-1]
        idx = np.asarray(target)
        if idx.shape != prediction.shape[:-1]:
            raise ShapeError(f"class targets {idx.shape} vs logits {prediction.shape}")
        if idx.min() < 0 or idx.max() >= classes:
            raise ShapeError(f"class index outside [0, {classes})")
        onehot = np.zeros(prediction.shape)
        np.put_along_axis(onehot, idx[..., None].astype(np.int64), 1.0, axis=-1)
        log_probs = ag.log_softmax(prediction, axis=-1)
        picked = (log_probs * onehot).sum()
        return -picked * (1.0 / idx.size)
    raise ConfigError(f"unknown task kind '{kind}'")


def total_loss(task_losses, scores=None, ln_scales=None, cfg: LossConfig | None = None):
    """Weighted task losses plus the two sparsity penalties.

    Returns ``(loss, parts)`` where parts holds the float values of the
    components for metrics reporting.  Zero-weight penalties are skipped
    entirely, so the λ=0 total is bitwise the plain sum of task losses.
    """
    cfg = cfg or LossConfig()
    total = None
    for m, term in enumerate(task_losses):
        w = cfg.weight(m)
        weighted = term if w == 1.0 else term * w
        total = weighted if total is None else total + weighted
    if total is None:
        raise ConfigError("at least one task loss is required")
    parts = {"task": [float(t.data) for t in task_losses]}
    token_term = channel_term = 0.0
    if cfg.lambda_token > 0 and scores is not None:
        token = token_pruning_loss(scores)
        token_term = float(token.data)
        total = total + token * cfg.lambda_token
    if cfg.lambda_channel > 0 and ln_scales is not None:
        channel = channel_pruning_loss(ln_scales)
        channel_term = float(channel.data)
        total = total + channel * cfg.lambda_channel
    parts["token_l1"] = token_term
    parts["channel_l1"] = channel_term
    parts["total"] = float(total.data)
    return total, parts
