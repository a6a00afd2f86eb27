"""Modality-aware transformer layers with token-importance scoring.

Each block is pre-norm: the attention branch input is LN(e) scaled
row-wise by the token scores, so score gradients flow through attention
rather than through the hard substitution mask.  Residual connections are
on by default; ``residuals=False`` keeps the literal two-equation form
(MSA then MLP with no skip paths).

For homogeneous modalities the attention/MLP/embedding/readout weights
can be shared across modalities while layer norms and score heads stay
per-modality; sharing means the same Tensor objects, not copies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError

# positional tables start at feature scale so attention can route by
# position from the first steps; the substitution tasks depend on it
TABLE_INIT_SCALE = 0.5
# start token scores below the sigmoid midpoint so the l1 pressure can
# drag uninformative tokens under the substitution threshold within short
# training budgets
SCORE_BIAS_INIT = -2.0


@dataclass
class TokenSet:
    """Per-modality token feature matrix with provenance."""

    modality_id: int
    features: Tensor  # [batch, tokens, channels]
    layer_index: int


@dataclass
class ScoreVector:
    """Per-token importance in [0, 1], differentiable."""

    values: Tensor  # [batch, tokens]
    layer_index: int
    modality_id: int


@dataclass
class PositionalEmbedding:
    table: Tensor  # [tokens, channels]
    shared_across_modalities: bool


@dataclass
class MsaWeights:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int


@dataclass
class MlpWeights:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class ScoreHead:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class LayerWeights:
    msa: MsaWeights
    mlp: MlpWeights
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    score_head: ScoreHead | None


@dataclass
class ModalityStack:
    """One transformer: embedding, positional table, layers, readout."""

    modality_id: int
    embed_w: Tensor
    embed_b: Tensor
    pe: PositionalEmbedding
    layers: list
    head_w: Tensor
    head_b: Tensor
    query_tokens: Tensor | None = None

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def channels(self) -> int:
        return self.embed_w.shape[1]

    @property
    def num_tokens(self) -> int:
        return self.pe.table.shape[0]


def score_head_hidden(channels: int) -> int:
    return math.ceil(channels / 4)


def _param(rng, shape, scale, dtype):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=dtype)


def _linear(rng, fan_in, fan_out, dtype):
    # Glorot scaling keeps desk-sized models trainable in short budgets
    scale = math.sqrt(2.0 / (fan_in + fan_out))
    return _param(rng, (fan_in, fan_out), scale, dtype)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def _ones(shape, dtype):
    return Tensor(np.ones(shape), requires_grad=True, dtype=dtype)


def make_msa(channels: int, heads: int, rng, dtype=np.float64) -> MsaWeights:
    if channels % heads:
        raise ConfigError(f"channels {channels} not divisible by heads {heads}")
    return MsaWeights(
        wq=_linear(rng, channels, channels, dtype), bq=_zeros(channels, dtype),
        wk=_linear(rng, channels, channels, dtype), bk=_zeros(channels, dtype),
        wv=_linear(rng, channels, channels, dtype), bv=_zeros(channels, dtype),
        wo=_linear(rng, channels, channels, dtype), bo=_zeros(channels, dtype),
        heads=heads,
    )


def make_mlp(channels: int, ratio: int, rng, dtype=np.float64) -> MlpWeights:
    hidden = channels * ratio
    return MlpWeights(
        w1=_linear(rng, channels, hidden, dtype), b1=_zeros(hidden, dtype),
        w2=_linear(rng, hidden, channels, dtype), b2=_zeros(channels, dtype),
    )


def make_score_head(channels: int, rng, dtype=np.float64) -> ScoreHead:
    hidden = score_head_hidden(channels)
    head = ScoreHead(
        w1=_linear(rng, channels, hidden, dtype), b1=_zeros(hidden, dtype),
        w2=_linear(rng, hidden, 1, dtype), b2=_zeros(1, dtype),
    )
    head.b2.data[:] = SCORE_BIAS_INIT
    return head


# -- forward operations --------------------------------------------------------


def embed_input(x, embed_w: Tensor, embed_b: Tensor, modality_id: int = 0) -> TokenSet:
    """Linear projection of raw modality tokens into the model width."""
    x = ag.as_tensor(x)
    if x.shape[-1] != embed_w.shape[0]:
        raise ShapeError(f"embedding expects {embed_w.shape[0]} input channels, got {x.shape[-1]}")
    return TokenSet(modality_id=modality_id, features=x @ embed_w + embed_b, layer_index=1)


def score_tokens(e: TokenSet | Tensor, head: ScoreHead,
                 layer_index: int = 0, modality_id: int = 0) -> ScoreVector:
    """Token importance through (linear, GELU, linear, sigmoid)."""
    feats = e.features if isinstance(e, TokenSet) else e
    if isinstance(e, TokenSet):
        layer_index, modality_id = e.layer_index, e.modality_id
    if feats.shape[-1] != head.w1.shape[0]:
        raise ShapeError(f"score head expects width {head.w1.shape[0]}, got {feats.shape[-1]}")
    hidden = ag.gelu(feats @ head.w1 + head.b1)
    logits = hidden @ head.w2 + head.b2
    values = ag.sigmoid(logits.reshape(logits.shape[:-1]))
    return ScoreVector(values=values, layer_index=layer_index, modality_id=modality_id)


def _attention(x: Tensor, w: MsaWeights) -> Tensor:
    batch, tokens, channels = x.shape
    heads = w.heads
    depth = channels // heads
    scale = 1.0 / math.sqrt(depth)

    def split(t):
        return t.reshape(batch, tokens, heads, depth).swapaxes(1, 2)

    q = split(x @ w.wq + w.bq)
    k = split(x @ w.wk + w.bk)
    v = split(x @ w.wv + w.bv)
    att = ag.softmax((q @ k.swapaxes(-1, -2)) * scale, axis=-1)
    ctx = (att @ v).swapaxes(1, 2).reshape(batch, tokens, channels)
    return ctx @ w.wo + w.bo


def scored_msa(e: TokenSet | Tensor, s: ScoreVector | Tensor | None, w: LayerWeights,
               residual: bool = True) -> Tensor:
    """Multi-head self-attention over LN(e) with rows scaled by scores.

    Score scaling is the only pathway through which the task loss reaches
    the scoring head.  ``s=None`` is the unscored case (identical to all
    scores being one).
    """
    feats = e.features if isinstance(e, TokenSet) else e
    if feats.ndim != 3:
        raise ShapeError(f"expected [batch, tokens, channels] features, got {feats.shape}")
    x = ag.layer_norm(feats, w.ln1_gamma, w.ln1_beta)
    if s is not None:
        values = s.values if isinstance(s, ScoreVector) else s
        x = x * values.unsqueeze(values.ndim)
    att = _attention(x, w.msa)
    return feats + att if residual else att


def block_forward(e: TokenSet, pe: PositionalEmbedding | None, w: LayerWeights,
                  inject_pe: bool = False, freeze_pe: bool = False,
                  residual: bool = True, scores: ScoreVector | None = None):
    """One transformer layer; returns the next TokenSet and the scores used.

    When ``inject_pe`` is set the positional table is added first
    (through stop_gradient if ``freeze_pe``).  Scores default to the
    layer's own head evaluated on the (injected) input.
    """
    feats = e.features
    if inject_pe:
        table = pe.table
        if freeze_pe:
            table = ag.stop_gradient(table)
        if table.shape != feats.shape[1:]:
            raise ShapeError(f"positional table {table.shape} does not match tokens {feats.shape}")
        feats = feats + table
    if scores is None and w.score_head is not None:
        scores = score_tokens(TokenSet(e.modality_id, feats, e.layer_index), w.score_head)
    ehat = scored_msa(feats, scores, w, residual=residual)
    hidden = ag.layer_norm(ehat, w.ln2_gamma, w.ln2_beta)
    mlp_out = ag.gelu(hidden @ w.mlp.w1 + w.mlp.b1) @ w.mlp.w2 + w.mlp.b2
    out = ehat + mlp_out if residual else mlp_out
    return TokenSet(e.modality_id, out, e.layer_index + 1), scores


# -- stack construction --------------------------------------------------------


def build_stacks(num_modalities: int, in_channels: int, channels: int, heads: int,
                 layers: int, tokens: int, rng, mlp_ratio: int = 4, out_channels: int = 1,
                 share_msa_mlp: bool = True, share_pe: bool = True, with_scores: bool = True,
                 dtype=np.float64, prefix: str | None = None):
    """Build per-modality stacks; shared weights are the same Tensor objects.

    Shared when enabled: embedding, MSA, MLP, readout head, positional
    table.  Always per-modality: layer norms and score heads.
    """
    params = []

    def reg(name, tensor):
        params.append((name, tensor))
        return tensor

    stacks = []
    shared_embed = shared_head = None
    shared_blocks = None
    shared_pe_table = None
    for m in range(num_modalities):
        name = prefix if prefix is not None and num_modalities == 1 else f"m{m}"
        if share_msa_mlp and shared_embed is not None:
            embed_w, embed_b = shared_embed
            head_w, head_b = shared_head
            blocks = shared_blocks
        else:
            embed_w = reg("shared.embed.w" if share_msa_mlp else f"{name}.embed.w",
                          _linear(rng, in_channels, channels, dtype))
            embed_b = reg("shared.embed.b" if share_msa_mlp else f"{name}.embed.b",
                          _zeros(channels, dtype))
            blocks = []
            for l in range(layers):
                base = f"shared.layer{l}" if share_msa_mlp else f"{name}.layer{l}"
                msa = make_msa(channels, heads, rng, dtype)
                mlp = make_mlp(channels, mlp_ratio, rng, dtype)
                for n, t in (("wq", msa.wq), ("bq", msa.bq), ("wk", msa.wk), ("bk", msa.bk),
                             ("wv", msa.wv), ("bv", msa.bv), ("wo", msa.wo), ("bo", msa.bo)):
                    reg(f"{base}.msa.{n}", t)
                for n, t in (("w1", mlp.w1), ("b1", mlp.b1), ("w2", mlp.w2), ("b2", mlp.b2)):
                    reg(f"{base}.mlp.{n}", t)
                blocks.append((msa, mlp))
            head_w = reg("shared.head.w" if share_msa_mlp else f"{name}.head.w",
                         _linear(rng, channels, out_channels, dtype))
            head_b = reg("shared.head.b" if share_msa_mlp else f"{name}.head.b",
                         _zeros(out_channels, dtype))
            if share_msa_mlp:
                shared_embed = (embed_w, embed_b)
                shared_head = (head_w, head_b)
                shared_blocks = blocks

        if share_pe and shared_pe_table is not None:
            pe_table = shared_pe_table
        else:
            pe_table = reg("shared.pe" if share_pe else f"{name}.pe",
                           _param(rng, (tokens, channels), TABLE_INIT_SCALE, dtype))
            if share_pe:
                shared_pe_table = pe_table

        layer_list = []
        for l, (msa, mlp) in enumerate(blocks):
            ln1_g = reg(f"{name}.layer{l}.ln1.gamma", _ones(channels, dtype))
            ln1_b = reg(f"{name}.layer{l}.ln1.beta", _zeros(channels, dtype))
            ln2_g = reg(f"{name}.layer{l}.ln2.gamma", _ones(channels, dtype))
            ln2_b = reg(f"{name}.layer{l}.ln2.beta", _zeros(channels, dtype))
            score = None
            if with_scores:
                score = make_score_head(channels, rng, dtype)
                for n, t in (("w1", score.w1), ("b1", score.b1), ("w2", score.w2), ("b2", score.b2)):
                    reg(f"{name}.layer{l}.score.{n}", t)
            layer_list.append(LayerWeights(msa=msa, mlp=mlp, ln1_gamma=ln1_g, ln1_beta=ln1_b,
                                           ln2_gamma=ln2_g, ln2_beta=ln2_b, score_head=score))
        stacks.append(ModalityStack(
            modality_id=m, embed_w=embed_w, embed_b=embed_b,
            pe=PositionalEmbedding(pe_table, shared_across_modalities=share_pe),
            layers=layer_list, head_w=head_w, head_b=head_b,
        ))
    return stacks, params


def expected_param_count(num_modalities: int, in_channels: int, channels: int, layers: int,
                         tokens: int, mlp_ratio: int = 4, out_channels: int = 1,
                         share_msa_mlp: bool = True, share_pe: bool = True,
                         with_scores: bool = True) -> int:
    """Closed-form scalar parameter count for ``build_stacks``."""
    c = channels
    embed = in_channels * c + c
    msa = 4 * c * c + 4 * c
    mlp = 2 * mlp_ratio * c * c + mlp_ratio * c + c
    head = c * out_channels + out_channels
    pe = tokens * c
    backbone = embed + layers * (msa + mlp) + head
    sh = score_head_hidden(c)
    score = (c * sh + sh + sh + 1) if with_scores else 0
    per_modality = layers * (4 * c + score)
    total = per_modality * num_modalities
    total += backbone if share_msa_mlp else backbone * num_modalities
    total += pe if share_pe else pe * num_modalities
    return total


def count_params(params) -> int:
    return sum(t.data.size for _, t in params)
