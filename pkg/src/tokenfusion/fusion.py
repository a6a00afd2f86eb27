"""Token fusion core: threshold masks, group pre-allocation, substitution
before each layer, and residual positional alignment.

Substitution semantics: a token whose score falls below the threshold is
replaced, before the block runs, by the projected feature from its donor
modality plus the token's own original-position positional embedding.
Donor features are taken from the donor's pre-injection stream, so the
replacement carries exactly one positional term and it is the replaced
token's own, whatever the sharing configuration.  No gradient flows
through the threshold comparison; scores reach the loss through the
scaled attention input and the l1 penalty instead.

Tokens whose heterogeneous correspondence is unresolved (behind the
camera or outside the image) are kept, never substituted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError
from .projection import AdapterMLP
from .transformer import (
    ModalityStack,
    PositionalEmbedding,
    ScoreVector,
    TokenSet,
    block_forward,
    build_stacks,
    embed_input,
    score_tokens,
)

DEFAULT_THRESHOLD = 2e-2


@dataclass
class FusionMask:
    """Complementary keep/substitute masks derived from one score vector."""

    keep: np.ndarray
    substitute: np.ndarray
    threshold: float


@dataclass
class GroupAllocation:
    """Fixed random partition of tokens across the other modalities."""

    owner: np.ndarray  # owner[n] = donor modality for token n
    seed: int
    modality: int
    modality_count: int

    def mask_for(self, donor: int) -> np.ndarray:
        return self.owner == donor

    def donors(self):
        return [d for d in range(self.modality_count) if d != self.modality]


def make_mask(scores, theta: float = DEFAULT_THRESHOLD) -> FusionMask:
    """Threshold a score vector; the comparison is outside the graph."""
    if not 0.0 < theta < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {theta}")
    if isinstance(scores, ScoreVector):
        values = scores.values.data
    elif isinstance(scores, Tensor):
        values = scores.data
    else:
        values = np.asarray(scores)
    substitute = values < theta
    return FusionMask(keep=~substitute, substitute=substitute, threshold=theta)


def allocate_groups(num_tokens: int, num_modalities: int, modality: int, seed: int) -> GroupAllocation:
    """Uniform random partition of tokens over the other modalities.

    Seeded shuffle then round-robin slicing: group sizes differ by at most
    one and the allocation is fixed for a given (N, M, m, seed).
    """
    if num_modalities < 2:
        raise ConfigError(f"allocation needs at least 2 modalities, got {num_modalities}")
    if not 0 <= modality < num_modalities:
        raise ConfigError(f"modality {modality} outside [0, {num_modalities})")
    if num_tokens < num_modalities - 1:
        raise ConfigError(f"cannot split {num_tokens} tokens into {num_modalities - 1} groups")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(modality,))))
    perm = rng.permutation(num_tokens)
    donors = [d for d in range(num_modalities) if d != modality]
    owner = np.empty(num_tokens, dtype=np.int64)
    for i, n in enumerate(perm):
        owner[n] = donors[i % len(donors)]
    return GroupAllocation(owner=owner, seed=seed, modality=modality,
                           modality_count=num_modalities)


def substitute_tokens(e: Tensor | TokenSet, mask: FusionMask, alloc: GroupAllocation,
                      projections: dict) -> Tensor:
    """Combine kept tokens with donor projections (masked sum form).

    ``projections[d]`` is the token-aligned feature matrix modality ``d``
    donates; rows outside d's allocation group are ignored.  Gradients
    flow into kept tokens and into used projection rows, never through
    the masks.
    """
    feats = e.features if isinstance(e, TokenSet) else e
    keep = mask.keep.astype(feats.data.dtype)
    out = feats * keep[..., None]
    substitute = mask.substitute
    for donor in alloc.donors():
        group = alloc.mask_for(donor)
        if not group.any():
            continue
        if donor not in projections:
            if (substitute & group).any():
                raise ContractError(f"no projection supplied for donor modality {donor}")
            continue
        sel = (substitute & group).astype(feats.data.dtype)
        out = out + projections[donor] * sel[..., None]
    return out


def rpa_inject(e: TokenSet, pe: PositionalEmbedding, layer: int,
               frozen_table: np.ndarray | None = None) -> TokenSet:
    """Add the positional table; gradients are retained at layer 1 only.

    ``frozen_table`` substitutes a constant snapshot for layers >= 2 (the
    finite-difference reference model for the alignment gradient).
    """
    if layer <= 1:
        table = pe.table
    elif frozen_table is not None:
        table = ag.constant(frozen_table)
    else:
        table = ag.stop_gradient(pe.table)
    feats = e.features
    if table.shape != feats.shape[-2:]:
        raise ContractError(f"positional table {table.shape} does not fit tokens {feats.shape}")
    return TokenSet(e.modality_id, feats + table, e.layer_index)


@dataclass
class FusedOutput:
    predictions: list
    features: list
    scores: list      # [modality][layer] ScoreVector or None
    masks: list       # [modality][layer] FusionMask or None
    applied: list     # [modality][layer] effective substitution mask or None
    fractions: list   # [modality][layer] mean share of tokens below theta


class FusionModel:
    """Per-modality stacks plus the substitution machinery between them."""

    def __init__(self, topology: str, stacks: list, params: list, *,
                 fusion_enabled: bool = True, threshold: float = DEFAULT_THRESHOLD,
                 residuals: bool = True, allocations: list | None = None,
                 adapters: dict | None = None, bidirectional: bool = False,
                 mask_mode: str = "score", random_rate: float = 0.3,
                 num_query_tokens: int = 0):
        if topology not in ("homogeneous", "heterogeneous"):
            raise ConfigError(f"unknown topology '{topology}'")
        if mask_mode not in ("score", "random"):
            raise ConfigError(f"unknown mask mode '{mask_mode}'")
        if not 0.0 < threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
        self.topology = topology
        self.stacks = stacks
        self.params = params
        self.fusion_enabled = fusion_enabled
        self.threshold = threshold
        self.residuals = residuals
        self.allocations = allocations
        self.adapters = adapters or {}
        self.bidirectional = bidirectional
        self.mask_mode = mask_mode
        self.random_rate = random_rate
        self.num_query_tokens = num_query_tokens

    # -- construction ----------------------------------------------------

    @classmethod
    def build_homogeneous(cls, *, num_modalities: int, in_channels: int, channels: int,
                          heads: int, layers: int, tokens: int, seed: int,
                          mlp_ratio: int = 4, out_channels: int = 1,
                          share_msa_mlp: bool = True, share_pe: bool = True,
                          fusion_enabled: bool = True, threshold: float = DEFAULT_THRESHOLD,
                          residuals: bool = True, mask_mode: str = "score",
                          random_rate: float = 0.3, dtype=np.float64) -> "FusionModel":
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(0,))))
        stacks, params = build_stacks(
            num_modalities=num_modalities, in_channels=in_channels, channels=channels,
            heads=heads, layers=layers, tokens=tokens, rng=rng, mlp_ratio=mlp_ratio,
            out_channels=out_channels, share_msa_mlp=share_msa_mlp, share_pe=share_pe,
            with_scores=True, dtype=dtype)
        allocations = None
        if num_modalities >= 2:
            allocations = [allocate_groups(tokens, num_modalities, m, seed)
                           for m in range(num_modalities)]
        return cls("homogeneous", stacks, params, fusion_enabled=fusion_enabled,
                   threshold=threshold, residuals=residuals, allocations=allocations,
                   mask_mode=mask_mode, random_rate=random_rate)

    @classmethod
    def build_heterogeneous(cls, *, point_in_channels: int, point_channels: int,
                            point_heads: int, point_layers: int, point_tokens: int,
                            image_in_channels: int, image_channels: int, image_heads: int,
                            image_layers: int, image_tokens: int, seed: int,
                            mlp_ratio: int = 4, out_channels: int = 1,
                            fusion_enabled: bool = True, threshold: float = DEFAULT_THRESHOLD,
                            residuals: bool = True, bidirectional: bool = False,
                            mask_mode: str = "score", random_rate: float = 0.3,
                            num_query_tokens: int = 0, dtype=np.float64) -> "FusionModel":
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(0,))))
        point_stacks, point_params = build_stacks(
            num_modalities=1, in_channels=point_in_channels, channels=point_channels,
            heads=point_heads, layers=point_layers, tokens=point_tokens, rng=rng,
            mlp_ratio=mlp_ratio, out_channels=out_channels, share_msa_mlp=False,
            share_pe=False, with_scores=True, dtype=dtype, prefix="point")
        image_stacks, image_params = build_stacks(
            num_modalities=1, in_channels=image_in_channels, channels=image_channels,
            heads=image_heads, layers=image_layers, tokens=image_tokens, rng=rng,
            mlp_ratio=mlp_ratio, out_channels=out_channels, share_msa_mlp=False,
            share_pe=False, with_scores=bidirectional, dtype=dtype, prefix="image")
        params = point_params + image_params
        adapters = {"image_to_point": AdapterMLP.create(image_channels, point_channels, rng,
                                                        name="adapter.image_to_point", dtype=dtype)}
        params += adapters["image_to_point"].parameters()
        if bidirectional:
            adapters["point_to_image"] = AdapterMLP.create(point_channels, image_channels, rng,
                                                           name="adapter.point_to_image", dtype=dtype)
            params += adapters["point_to_image"].parameters()
        stacks = [point_stacks[0], image_stacks[0]]
        stacks[1].modality_id = 1
        if num_query_tokens:
            for stack, name in ((stacks[0], "point"), (stacks[1], "image")):
                q = Tensor(rng.standard_normal((num_query_tokens, stack.channels)) * 0.02,
                           requires_grad=True, dtype=dtype)
                stack.query_tokens = q
                params.append((f"{name}.query_tokens", q))
        return cls("heterogeneous", stacks, params, fusion_enabled=fusion_enabled,
                   threshold=threshold, residuals=residuals, adapters=adapters,
                   bidirectional=bidirectional, mask_mode=mask_mode, random_rate=random_rate,
                   num_query_tokens=num_query_tokens)

    # -- shared helpers ----------------------------------------------------

    def parameters(self):
        return self.params

    def ln_scales(self):
        """All layer-norm gamma vectors, per modality then layer (both LNs)."""
        out = []
        for stack in self.stacks:
            for layer in stack.layers:
                out.append(layer.ln1_gamma)
                out.append(layer.ln2_gamma)
        return out

    def _pe_for_layer(self, stack: ModalityStack, layer: int, frozen_pe):
        if layer == 0:
            return stack.pe.table
        if frozen_pe is not None:
            return ag.constant(frozen_pe[stack.modality_id])
        return ag.stop_gradient(stack.pe.table)

    def _mask_for(self, m: int, layer: int, score: ScoreVector | None,
                  forced_masks, mask_rng, batch: int, tokens: int) -> FusionMask | None:
        if not self.fusion_enabled:
            return None
        if forced_masks is not None:
            forced = forced_masks[m][layer]
            if forced is None:
                return None
            sub = np.asarray(forced, dtype=bool)
            return FusionMask(keep=~sub, substitute=sub, threshold=self.threshold)
        if score is None:
            return None
        if self.mask_mode == "random":
            if mask_rng is None:
                raise ContractError("random mask mode needs a generator")
            sub = mask_rng.random((batch, tokens)) < self.random_rate
            return FusionMask(keep=~sub, substitute=sub, threshold=self.threshold)
        return make_mask(score, self.threshold)

    # -- forward -----------------------------------------------------------

    def forward(self, inputs, correspondences=None, forced_masks=None,
                frozen_pe=None, mask_rng=None) -> FusedOutput:
        if len(inputs) != len(self.stacks):
            raise ContractError(f"expected {len(self.stacks)} modality inputs, got {len(inputs)}")
        if self.topology == "homogeneous":
            return self._forward_homogeneous(inputs, forced_masks, frozen_pe, mask_rng)
        return self._forward_heterogeneous(inputs, correspondences, forced_masks,
                                           frozen_pe, mask_rng)

    def _forward_homogeneous(self, inputs, forced_masks, frozen_pe, mask_rng) -> FusedOutput:
        num_mod = len(self.stacks)
        feats = [embed_input(ag.as_tensor(x), s.embed_w, s.embed_b, m).features
                 for m, (x, s) in enumerate(zip(inputs, self.stacks))]
        layers = self.stacks[0].num_layers
        scores_all = [[] for _ in range(num_mod)]
        masks_all = [[] for _ in range(num_mod)]
        applied_all = [[] for _ in range(num_mod)]
        fractions = [[] for _ in range(num_mod)]
        batch = feats[0].shape[0]
        tokens = feats[0].shape[1]

        for l in range(layers):
            pe_l = [self._pe_for_layer(s, l, frozen_pe) for s in self.stacks]
            injected = [feats[m] + pe_l[m] for m in range(num_mod)]
            scores = [score_tokens(injected[m], self.stacks[m].layers[l].score_head,
                                   layer_index=l + 1, modality_id=m) for m in range(num_mod)]
            masks = [self._mask_for(m, l, scores[m], forced_masks, mask_rng, batch, tokens)
                     for m in range(num_mod)]
            if self.fusion_enabled and num_mod >= 2:
                new_feats = []
                for m in range(num_mod):
                    projections = {d: feats[d] + pe_l[m] for d in self.allocations[m].donors()}
                    new_feats.append(substitute_tokens(injected[m], masks[m],
                                                       self.allocations[m], projections))
                current = new_feats
            else:
                current = injected
            for m in range(num_mod):
                out, _ = block_forward(TokenSet(m, current[m], l + 1), None,
                                       self.stacks[m].layers[l], residual=self.residuals,
                                       scores=scores[m])
                feats[m] = out.features
                scores_all[m].append(scores[m])
                masks_all[m].append(masks[m])
                applied_all[m].append(None if masks[m] is None else masks[m].substitute)
                fractions[m].append(0.0 if masks[m] is None
                                    else float(masks[m].substitute.mean()))

        predictions = [feats[m] @ self.stacks[m].head_w + self.stacks[m].head_b
                       for m in range(num_mod)]
        return FusedOutput(predictions=predictions, features=feats, scores=scores_all,
                           masks=masks_all, applied=applied_all, fractions=fractions)

    def _forward_heterogeneous(self, inputs, correspondences, forced_masks,
                               frozen_pe, mask_rng) -> FusedOutput:
        if correspondences is None or "point_to_image" not in correspondences:
            raise ContractError("heterogeneous forward needs camera correspondences")
        if self.bidirectional and "image_to_point" not in correspondences:
            raise ContractError("bidirectional fusion needs image_to_point correspondences")
        point, image = self.stacks
        x_point, x_image = inputs
        idx_pi = np.asarray(correspondences["point_to_image"], dtype=np.int64)
        res_pi = idx_pi >= 0
        if self.bidirectional:
            idx_ip = np.asarray(correspondences["image_to_point"], dtype=np.int64)
            res_ip = idx_ip >= 0

        def start(stack, x, modality):
            f = embed_input(ag.as_tensor(x), stack.embed_w, stack.embed_b, modality).features
            if stack.query_tokens is not None:
                q = stack.query_tokens.unsqueeze(0) * np.ones((f.shape[0], 1, 1),
                                                               dtype=f.data.dtype)
                f = ag.concat([f, q], axis=1)
            return f

        p_raw = [start(point, x_point, 0)]
        i_raw = [start(image, x_image, 1)]
        batch = p_raw[0].shape[0]
        n_point, n_image = point.num_tokens, image.num_tokens
        l_p, l_i = point.num_layers, image.num_layers
        # point layer l consumes image features entering image layer ceil((l+1) Li / Lp)
        img_src = [math.ceil((l + 1) * l_i / l_p) - 1 for l in range(l_p)]
        pt_src = [math.ceil((j + 1) * l_p / l_i) - 1 for j in range(l_i)]

        scores_all = [[], []]
        masks_all = [[], []]
        applied_all = [[], []]
        fractions = [[], []]

        def pad_queries(column, stack):
            if stack.query_tokens is None:
                return column
            q = np.zeros((batch, stack.query_tokens.shape[0]) + column.shape[2:],
                         dtype=column.dtype)
            return np.concatenate([column, q], axis=1)

        def pe_full(stack, layer):
            table = self._pe_for_layer(stack, layer, frozen_pe)
            if stack.query_tokens is None:
                return table
            pad = np.zeros((stack.query_tokens.shape[0], stack.channels),
                           dtype=stack.pe.table.data.dtype)
            return ag.concat([table, pad], axis=0)

        def advance(stack, m, layer, raws, source_feats, idx, resolved, adapter):
            raw = raws[layer]
            pe_l = pe_full(stack, layer)
            injected = raw + pe_l
            score = None
            if stack.layers[layer].score_head is not None:
                head_in = injected if stack.query_tokens is None \
                    else ag.take_tokens(injected, np.arange(stack.num_tokens))
                score = score_tokens(head_in, stack.layers[layer].score_head,
                                     layer_index=layer + 1, modality_id=m)
            mask = self._mask_for(m, layer, score, forced_masks, mask_rng, batch, stack.num_tokens)
            current = injected
            if mask is not None and source_feats is not None:
                effective = mask.substitute & resolved
                donor = ag.take_tokens(source_feats, np.where(resolved, idx, 0).astype(np.int64))
                projected = adapter(donor)
                if stack.query_tokens is not None:
                    pad = np.zeros((batch, stack.query_tokens.shape[0], stack.channels),
                                   dtype=raw.data.dtype)
                    projected = ag.concat([projected, pad], axis=1)
                projected = projected + pe_l
                sel = pad_queries(effective.astype(raw.data.dtype), stack)
                current = injected * (1.0 - sel)[..., None] + projected * sel[..., None]
                applied_all[m].append(effective)
                fractions[m].append(float(mask.substitute.mean()))
            else:
                applied_all[m].append(None if mask is None else np.zeros_like(mask.substitute))
                fractions[m].append(0.0 if mask is None else float(mask.substitute.mean()))
            scores_all[m].append(score)
            masks_all[m].append(mask)
            block_scores = score
            if block_scores is not None and stack.query_tokens is not None:
                block_scores = _pad_scores(score, batch, stack)
            out, _ = block_forward(TokenSet(m, current, layer + 1), None, stack.layers[layer],
                                   residual=self.residuals, scores=block_scores)
            raws.append(out.features)

        done_p = done_i = 0
        while done_p < l_p or done_i < l_i:
            if done_i < l_i and pt_src[done_i] <= len(p_raw) - 1:
                src = None
                idx = resolved = adapter = None
                if self.fusion_enabled and self.bidirectional:
                    src_layer = pt_src[done_i]
                    src = _strip_queries(p_raw[src_layer], n_point)
                    idx, resolved, adapter = idx_ip, res_ip, self.adapters["point_to_image"]
                advance(image, 1, done_i, i_raw, src, idx, resolved, adapter)
                done_i += 1
            elif done_p < l_p and img_src[done_p] <= len(i_raw) - 1:
                src = None
                idx = resolved = adapter = None
                if self.fusion_enabled:
                    src = _strip_queries(i_raw[img_src[done_p]], n_image)
                    idx, resolved, adapter = idx_pi, res_pi, self.adapters["image_to_point"]
                advance(point, 0, done_p, p_raw, src, idx, resolved, adapter)
                done_p += 1
            else:
                raise ContractError("layer scheduling deadlock between the two stacks")

        def predict(stack, raws):
            final = raws[-1]
            if stack.query_tokens is not None:
                final = ag.take_tokens(final, np.arange(stack.num_tokens))
            return final @ stack.head_w + stack.head_b, final

        pred_p, feat_p = predict(point, p_raw)
        pred_i, feat_i = predict(image, i_raw)
        return FusedOutput(predictions=[pred_p, pred_i], features=[feat_p, feat_i],
                           scores=scores_all, masks=masks_all, applied=applied_all,
                           fractions=fractions)


def _strip_queries(feats: Tensor, num_tokens: int) -> Tensor:
    if feats.shape[1] == num_tokens:
        return feats
    return ag.take_tokens(feats, np.arange(num_tokens))


def _pad_scores(score: ScoreVector, batch: int, stack: ModalityStack) -> ScoreVector:
    ones = np.ones((batch, stack.query_tokens.shape[0]), dtype=score.values.data.dtype)
    return ScoreVector(ag.concat([score.values, ones], axis=1),
                       score.layer_index, score.modality_id)


def fused_forward(model: FusionModel, inputs, **kwargs) -> FusedOutput:
    return model.forward(inputs, **kwargs)


def single_modal_forward(stack: ModalityStack, x, residuals: bool = True):
    """Reference pipeline for one stack alone: inject, score, block per layer."""
    e = embed_input(ag.as_tensor(x), stack.embed_w, stack.embed_b, stack.modality_id)
    scores = []
    for l, layer in enumerate(stack.layers):
        e = rpa_inject(e, stack.pe, l + 1)
        s = None
        if layer.score_head is not None:
            s = score_tokens(e, layer.score_head)
        e, _ = block_forward(e, None, layer, residual=residuals, scores=s)
        scores.append(s)
    prediction = e.features @ stack.head_w + stack.head_b
    return prediction, e.features, scores
