"""Global-threshold structural pruning over the gate scores.

All 4*L gate magnitudes form one pool. The threshold is the magnitude at
rank ``floor(rate * N)`` under a deterministic total order (magnitude,
block, site, index); ties at the threshold are resolved by that same
order so the pruned count is exact. Binarized masks become a slicing
plan, and applying the plan folds kept gate values into the downstream
projection rows, yielding a gate-free hard model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, StateError
from .model import (GATE_POSITIONS, GateSite, ModelConfig, VitModel,
                    all_sites)

_POSITION_RANK = {pos: i for i, pos in enumerate(GATE_POSITIONS)}


@dataclass(frozen=True)
class ScoreEntry:
    """One gate entry's magnitude, addressable by (site, index)."""

    site: GateSite
    index: int
    magnitude: float

    @property
    def order_key(self) -> tuple:
        return (self.magnitude, self.site.block_index,
                _POSITION_RANK[self.site.position], self.index)


@dataclass
class PruneMask:
    """Binary keep decisions for one site; at least one entry kept."""

    site: GateSite
    keep: np.ndarray  # uint8 {0,1}
    keep_indices: np.ndarray  # sorted positions where keep == 1


@dataclass
class PrunePlan:
    """Per-site masks plus the threshold bookkeeping that produced them."""

    masks: list[PruneMask]
    tau: float
    requested_rate: float
    achieved_rate: float

    def mask_for(self, site: GateSite) -> PruneMask:
        for mask in self.masks:
            if mask.site == site:
                return mask
        raise StateError(f"plan has no mask for site {site.key}")

    def keep_by_block(self) -> dict[str, dict[str, np.ndarray]]:
        out: dict[str, dict[str, np.ndarray]] = {}
        for mask in self.masks:
            block_key = f"blocks.{mask.site.block_index}"
            out.setdefault(block_key, {})[mask.site.position] = mask.keep_indices
        return out


def collect_scores(model: VitModel) -> list[ScoreEntry]:
    """Every gate entry once, |score| magnitude, (block, site, index) order."""
    if model.mode != "soft":
        raise StateError("scores can only be collected from a soft (gated) model")
    entries = []
    for gate in model.gate_vectors():
        mags = np.abs(gate.scores.data)
        entries.extend(ScoreEntry(gate.site, j, float(mags[j]))
                       for j in range(mags.shape[0]))
    return entries


def compute_threshold(scores: Sequence, rate: float) -> float:
    """Magnitude at rank ``floor(rate * N)`` of the ascending order."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"pruning rate must lie in [0, 1), got {rate}")
    mags = sorted(s.magnitude if isinstance(s, ScoreEntry) else float(s)
                  for s in scores)
    if not mags:
        raise ConfigError("cannot compute a threshold over an empty score pool")
    return mags[int(rate * len(mags))]


def resolve_ties(entries: Sequence[ScoreEntry], tau: float,
                 rate: float) -> frozenset[tuple[int, str, int]]:
    """Entries with magnitude == tau that must be pruned to hit the budget.

    A pure ``magnitude >= tau`` rule keeps every entry tied at tau; to make
    the pruned count exactly ``floor(rate * N)`` the first shortfall ties in
    (block, site, index) order are forced pruned.
    """
    target = int(rate * len(entries))
    below = sum(1 for e in entries if e.magnitude < tau)
    shortfall = target - below
    if shortfall <= 0:
        return frozenset()
    tied = sorted((e for e in entries if e.magnitude == tau),
                  key=lambda e: e.order_key)
    return frozenset((e.site.block_index, e.site.position, e.index)
                     for e in tied[:shortfall])


def binarize(model: VitModel, tau: float,
             tie_resolution: frozenset | None = None) -> PrunePlan:
    """Per-site masks: keep where |score| >= tau, minus resolved ties.

    A site that would lose every dimension keeps its single largest-magnitude
    entry (lowest index on ties); the achieved rate reflects the adjustment.
    """
    tie_resolution = tie_resolution or frozenset()
    masks = []
    total = 0
    pruned = 0
    for gate in model.gate_vectors():
        site = gate.site
        mags = np.abs(gate.scores.data)
        keep = (mags >= tau).astype(np.uint8)
        for j in range(keep.shape[0]):
            if keep[j] and (site.block_index, site.position, j) in tie_resolution:
                keep[j] = 0
        if not keep.any():
            keep[int(np.argmax(mags))] = 1
        keep_indices = np.flatnonzero(keep).astype(np.intp)
        masks.append(PruneMask(site, keep, keep_indices))
        total += keep.shape[0]
        pruned += int(keep.shape[0] - keep.sum())
    return PrunePlan(masks=masks, tau=tau, requested_rate=float("nan"),
                     achieved_rate=pruned / total)


def build_plan(model: VitModel, rate: float) -> PrunePlan:
    """Full threshold -> tie resolution -> binarize chain for one rate."""
    entries = collect_scores(model)
    tau = compute_threshold(entries, rate)
    ties = resolve_ties(entries, tau, rate)
    plan = binarize(model, tau, ties)
    plan.requested_rate = rate
    return plan


def plan_from_keep_indices(config: ModelConfig,
                           keep: dict[str, np.ndarray]) -> PrunePlan:
    """Reconstruct a plan from stored keep-index lists (loaded hard models)."""
    masks = []
    total = 0
    pruned = 0
    for site in all_sites(config):
        dim = site.dim(config)
        keep_vec = np.zeros(dim, dtype=np.uint8)
        idx = np.asarray(keep[site.key], dtype=np.intp)
        keep_vec[idx] = 1
        masks.append(PruneMask(site, keep_vec, np.sort(idx)))
        total += dim
        pruned += dim - idx.size
    return PrunePlan(masks=masks, tau=float("nan"),
                     requested_rate=float("nan"), achieved_rate=pruned / total)


def apply_plan(model: VitModel, plan: PrunePlan) -> VitModel:
    """Slice every affected projection and fold kept gate values in.

    Per block: the qkv_in mask drops input rows of wq/wk/wv; the attn_out
    mask drops wv output columns (and bv entries) and wo input rows; the
    mlp_in mask drops w1 input rows; the mlp_hidden mask drops w1 output
    columns (and b1 entries) and w2 input rows. A kept gate value g[j]
    scales the following projection's row j, so the hard forward needs no
    gate multiplies. Residual stream, norms, embeddings, and head are
    untouched.
    """
    if model.mode != "soft":
        raise StateError("apply_plan requires a soft (gated) model")
    cfg = model.config
    for mask in plan.masks:
        expected = mask.site.dim(cfg)
        if mask.keep.shape[0] != expected:
            raise StateError(
                f"plan mask for {mask.site.key} has length {mask.keep.shape[0]}, "
                f"model expects {expected}")
    hard = VitModel(cfg, keep=plan.keep_by_block())
    hard.patch_weight.data[...] = model.patch_weight.data
    hard.patch_bias.data[...] = model.patch_bias.data
    hard.cls_token.data[...] = model.cls_token.data
    hard.pos_embed.data[...] = model.pos_embed.data
    hard.norm_gain.data[...] = model.norm_gain.data
    hard.norm_bias.data[...] = model.norm_bias.data
    hard.head_weight.data[...] = model.head_weight.data
    hard.head_bias.data[...] = model.head_bias.data
    for src, dst in zip(model.blocks, hard.blocks):
        keep = dst.keep
        sq = keep["qkv_in"]
        sa = keep["attn_out"]
        sm = keep["mlp_in"]
        sh = keep["mlp_hidden"]
        g_qkv = src.gates["qkv_in"].scores.data
        g_attn = src.gates["attn_out"].scores.data
        g_mlp = src.gates["mlp_in"].scores.data
        g_hid = src.gates["mlp_hidden"].scores.data
        dst.norm1_gain.data[...] = src.norm1_gain.data
        dst.norm1_bias.data[...] = src.norm1_bias.data
        dst.norm2_gain.data[...] = src.norm2_gain.data
        dst.norm2_bias.data[...] = src.norm2_bias.data
        dst.wq.data[...] = g_qkv[sq, None] * src.wq.data[sq, :]
        dst.bq.data[...] = src.bq.data
        dst.wk.data[...] = g_qkv[sq, None] * src.wk.data[sq, :]
        dst.bk.data[...] = src.bk.data
        dst.wv.data[...] = (g_qkv[sq, None] * src.wv.data[sq, :])[:, sa]
        dst.bv.data[...] = src.bv.data[sa]
        dst.wo.data[...] = g_attn[sa, None] * src.wo.data[sa, :]
        dst.bo.data[...] = src.bo.data
        dst.w1.data[...] = (g_mlp[sm, None] * src.w1.data[sm, :])[:, sh]
        dst.b1.data[...] = src.b1.data[sh]
        dst.w2.data[...] = g_hid[sh, None] * src.w2.data[sh, :]
        dst.b2.data[...] = src.b2.data
    return hard
