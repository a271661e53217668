"""Analytic parameter and multiply-accumulate accounting.

Convention: one multiply-accumulate = one FLOP; normalization, softmax,
GELU, and residual additions are excluded. Under this convention the
unpruned DeiT-B backbone comes out at 86.6M parameters and 17.56B FLOPs
for 224x224 input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError
from .model import GateSite, ModelConfig, VitModel
from .pruning import PrunePlan

CATEGORIES = ("qkv", "attn", "proj", "mlp")


@dataclass(frozen=True)
class BlockCost:
    """Per-category counts for one block (norm affine params excluded)."""

    index: int
    params_before: dict[str, int]
    params_after: dict[str, int]
    flops_before: dict[str, int]
    flops_after: dict[str, int]


@dataclass(frozen=True)
class CostReport:
    """Totals and per-block breakdown, before and after pruning."""

    params_before: int
    params_after: int
    flops_before: int
    flops_after: int
    per_block: list[BlockCost] = field(default_factory=list)
    gate_params_removed: int = 0

    @property
    def params_reduced_pct(self) -> float:
        return 1.0 - self.params_after / self.params_before

    @property
    def flops_reduced_pct(self) -> float:
        return 1.0 - self.flops_after / self.flops_before


def _kept(config: ModelConfig, plan: PrunePlan | None,
          block: int, position: str) -> int:
    if plan is None:
        return GateSite(block, position).dim(config)
    return int(plan.mask_for(GateSite(block, position)).keep_indices.size)


def _block_params(config: ModelConfig, plan: PrunePlan | None,
                  block: int) -> dict[str, int]:
    d = config.embed_dim
    kq = _kept(config, plan, block, "qkv_in")
    ka = _kept(config, plan, block, "attn_out")
    km = _kept(config, plan, block, "mlp_in")
    kh = _kept(config, plan, block, "mlp_hidden")
    return {
        "qkv": (kq * d + d) + (kq * d + d) + (kq * ka + ka),
        "attn": 0,
        "proj": ka * d + d,
        "mlp": (km * kh + kh) + (kh * d + d),
    }


def _block_flops(config: ModelConfig, plan: PrunePlan | None,
                 block: int, n: int) -> dict[str, int]:
    d = config.embed_dim
    kq = _kept(config, plan, block, "qkv_in")
    ka = _kept(config, plan, block, "attn_out")
    km = _kept(config, plan, block, "mlp_in")
    kh = _kept(config, plan, block, "mlp_hidden")
    return {
        "qkv": n * kq * d + n * kq * d + n * kq * ka,
        "attn": n * n * d + n * n * ka,  # q/k widths are never pruned
        "proj": n * ka * d,
        "mlp": n * km * kh + n * kh * d,
    }


def count_params(model_or_config, plan: PrunePlan | None = None) -> int:
    """Learnable scalars; gates counted only when a soft model is given."""
    if isinstance(model_or_config, VitModel):
        if plan is not None:
            raise ConfigError("pass either a model or a config+plan, not both")
        return sum(t.data.size for _, t, _ in model_or_config.named_parameters())
    config: ModelConfig = model_or_config
    d = config.embed_dim
    total = config.patch_dim * d + d          # patch embedding
    total += d                                # class token
    total += config.num_tokens * d            # positional embeddings
    for i in range(config.num_layers):
        total += 4 * d                        # two norm affines
        total += sum(_block_params(config, plan, i).values())
    total += 2 * d                            # final norm
    total += d * config.num_classes + config.num_classes
    return total


def count_flops(config: ModelConfig, plan: PrunePlan | None = None,
                image_size: int | None = None) -> int:
    """Multiply-accumulates of one single-image forward pass."""
    n, num_patches = _token_counts(config, image_size)
    total = num_patches * config.patch_dim * config.embed_dim
    for i in range(config.num_layers):
        total += sum(_block_flops(config, plan, i, n).values())
    total += config.embed_dim * config.num_classes  # head on the class token
    return total


def _token_counts(config: ModelConfig, image_size: int | None) -> tuple[int, int]:
    size = config.image_size if image_size is None else image_size
    if size % config.patch_size != 0:
        raise ConfigError(
            f"image size {size} not divisible by patch size {config.patch_size}")
    num_patches = (size // config.patch_size) ** 2
    return num_patches + 1, num_patches


def build_cost_report(config: ModelConfig, plan: PrunePlan | None = None,
                      image_size: int | None = None,
                      gate_params_removed: int = 0) -> CostReport:
    """Assemble before/after totals and the per-block category table."""
    n, _ = _token_counts(config, image_size)
    per_block = [
        BlockCost(index=i,
                  params_before=_block_params(config, None, i),
                  params_after=_block_params(config, plan, i),
                  flops_before=_block_flops(config, None, i, n),
                  flops_after=_block_flops(config, plan, i, n))
        for i in range(config.num_layers)
    ]
    return CostReport(
        params_before=count_params(config),
        params_after=count_params(config, plan),
        flops_before=count_flops(config, image_size=image_size),
        flops_after=count_flops(config, plan, image_size=image_size),
        per_block=per_block,
        gate_params_removed=gate_params_removed,
    )


# ---------------------------------------------------------------------------
# report serialization


def report_to_kv(report: CostReport) -> str:
    """Machine-readable key=value form, one entry per line."""
    lines = [
        f"params_before={report.params_before}",
        f"params_after={report.params_after}",
        f"params_reduced_pct={report.params_reduced_pct!r}",
        f"flops_before={report.flops_before}",
        f"flops_after={report.flops_after}",
        f"flops_reduced_pct={report.flops_reduced_pct!r}",
    ]
    for block in report.per_block:
        prefix = f"per_block.{block.index}"
        for cat in CATEGORIES:
            lines.append(f"{prefix}.{cat}_params_before={block.params_before[cat]}")
            lines.append(f"{prefix}.{cat}_params_after={block.params_after[cat]}")
            lines.append(f"{prefix}.{cat}_flops_before={block.flops_before[cat]}")
            lines.append(f"{prefix}.{cat}_flops_after={block.flops_after[cat]}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str) -> dict[str, float]:
    """Inverse of ``report_to_kv`` (values as floats)."""
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        out[key] = float(value)
    return out


def report_to_table(report: CostReport) -> str:
    """Human-readable aligned table."""
    def fmt(x: int) -> str:
        return f"{x:,}"

    lines = [
        "Model cost (1 multiply-accumulate = 1 FLOP)",
        "",
        f"  {'':10s}{'params':>18s}{'FLOPs':>22s}",
        f"  {'before':10s}{fmt(report.params_before):>18s}"
        f"{fmt(report.flops_before):>22s}",
        f"  {'after':10s}{fmt(report.params_after):>18s}"
        f"{fmt(report.flops_after):>22s}",
        f"  {'reduced':10s}{report.params_reduced_pct * 100:>17.2f}%"
        f"{report.flops_reduced_pct * 100:>21.2f}%",
        "",
        f"  {'block':>5s} {'category':>8s} {'FLOPs before':>16s} "
        f"{'FLOPs after':>16s} {'params before':>14s} {'params after':>13s}",
    ]
    for block in report.per_block:
        for cat in CATEGORIES:
            lines.append(
                f"  {block.index:>5d} {cat:>8s} {fmt(block.flops_before[cat]):>16s} "
                f"{fmt(block.flops_after[cat]):>16s} "
                f"{fmt(block.params_before[cat]):>14s} "
                f"{fmt(block.params_after[cat]):>13s}")
    if report.gate_params_removed:
        lines.append("")
        lines.append(f"  gate parameters removed at slicing: "
                     f"{fmt(report.gate_params_removed)} "
                     "(not part of the params columns)")
    return "\n".join(lines) + "\n"
