"""The gated vision transformer.

Pre-norm blocks with four gate sites each: the shared q/k/v input, the
attention output (= value columns), the MLP input, and the MLP hidden
layer. In ``soft`` mode the gates are real-valued column scales learned
jointly with the weights; in ``hard`` mode the gate decisions have been
folded into physically sliced weight matrices and the gates are gone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, StateError
from .tensor import (Tensor, add, concat, gelu, layer_norm, matmul, mul,
                     narrow, reshape, scale_columns, softmax_rows,
                     take_columns, transpose)

LN_EPS = 1e-6
INIT_STD = 0.02

GATE_POSITIONS = ("qkv_in", "attn_out", "mlp_in", "mlp_hidden")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; token count includes the class token."""

    image_size: int
    patch_size: int
    in_channels: int
    embed_dim: int
    num_layers: int
    num_heads: int
    mlp_ratio: float
    num_classes: int

    def __post_init__(self):
        for name in ("image_size", "patch_size", "in_channels", "embed_dim",
                     "num_layers", "num_heads", "num_classes"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size "
                f"{self.patch_size}")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads "
                f"{self.num_heads}")
        hidden = self.mlp_ratio * self.embed_dim
        if self.mlp_ratio <= 0 or abs(hidden - round(hidden)) > 1e-9:
            raise ConfigError(
                f"mlp_ratio * embed_dim must be a positive integer, got "
                f"{self.mlp_ratio} * {self.embed_dim}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.in_channels

    @property
    def hidden_dim(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


PRESETS: dict[str, ModelConfig] = {
    # DeiT-B reference: 12 layers, 12 heads, 768-dim embeddings, 16px patches.
    "deit-b": ModelConfig(image_size=224, patch_size=16, in_channels=3,
                          embed_dim=768, num_layers=12, num_heads=12,
                          mlp_ratio=4, num_classes=1000),
    # Same backbone analyzed at 384x384 input.
    "vit-b16": ModelConfig(image_size=384, patch_size=16, in_channels=3,
                           embed_dim=768, num_layers=12, num_heads=12,
                           mlp_ratio=4, num_classes=1000),
    # Desk-scale configuration used by the synthetic-task pipeline.
    "toy": ModelConfig(image_size=16, patch_size=4, in_channels=3,
                       embed_dim=64, num_layers=4, num_heads=4,
                       mlp_ratio=4, num_classes=10),
}


@dataclass(frozen=True)
class GateSite:
    """One of the 4*L gate locations."""

    block_index: int
    position: str

    def __post_init__(self):
        if self.position not in GATE_POSITIONS:
            raise ConfigError(f"unknown gate position {self.position!r}")

    @property
    def key(self) -> str:
        return f"blocks.{self.block_index}.{self.position}"

    def dim(self, config: ModelConfig) -> int:
        return config.hidden_dim if self.position == "mlp_hidden" else config.embed_dim


def all_sites(config: ModelConfig) -> list[GateSite]:
    """Every gate site in canonical (block, position) order."""
    return [GateSite(i, pos)
            for i in range(config.num_layers) for pos in GATE_POSITIONS]


@dataclass
class GateVector:
    """Learnable importance scores attached to one site."""

    site: GateSite
    scores: Tensor


class TransformerBlock:
    """Parameters and keep-lists for one pre-norm block."""

    def __init__(self, config: ModelConfig, index: int,
                 keep: dict[str, np.ndarray] | None = None):
        d = config.embed_dim
        hidden = config.hidden_dim
        self.index = index
        self.keep = keep  # position -> kept original indices (hard mode only)
        kq = d if keep is None else len(keep["qkv_in"])
        ka = d if keep is None else len(keep["attn_out"])
        km = d if keep is None else len(keep["mlp_in"])
        kh = hidden if keep is None else len(keep["mlp_hidden"])
        self.norm1_gain = Tensor(np.ones(d), requires_grad=True)
        self.norm1_bias = Tensor(np.zeros(d), requires_grad=True)
        self.wq = Tensor(np.zeros((kq, d)), requires_grad=True)
        self.bq = Tensor(np.zeros(d), requires_grad=True)
        self.wk = Tensor(np.zeros((kq, d)), requires_grad=True)
        self.bk = Tensor(np.zeros(d), requires_grad=True)
        self.wv = Tensor(np.zeros((kq, ka)), requires_grad=True)
        self.bv = Tensor(np.zeros(ka), requires_grad=True)
        self.wo = Tensor(np.zeros((ka, d)), requires_grad=True)
        self.bo = Tensor(np.zeros(d), requires_grad=True)
        self.norm2_gain = Tensor(np.ones(d), requires_grad=True)
        self.norm2_bias = Tensor(np.zeros(d), requires_grad=True)
        self.w1 = Tensor(np.zeros((km, kh)), requires_grad=True)
        self.b1 = Tensor(np.zeros(kh), requires_grad=True)
        self.w2 = Tensor(np.zeros((kh, d)), requires_grad=True)
        self.b2 = Tensor(np.zeros(d), requires_grad=True)
        if keep is None:
            self.gates = {
                pos: GateVector(GateSite(index, pos),
                                Tensor(np.ones(GateSite(index, pos).dim(config)),
                                       requires_grad=True))
                for pos in GATE_POSITIONS
            }
        else:
            self.gates = None

    def v_head_splits(self, config: ModelConfig) -> list[int]:
        """Kept value-columns per head; equal widths before pruning."""
        if self.keep is None:
            return [config.head_dim] * config.num_heads
        dh = config.head_dim
        kept = np.asarray(self.keep["attn_out"])
        return [int(((kept >= h * dh) & (kept < (h + 1) * dh)).sum())
                for h in range(config.num_heads)]


class VitModel:
    """Patch embedding, L gated blocks, final norm, classification head."""

    def __init__(self, config: ModelConfig,
                 keep: dict[str, dict[str, np.ndarray]] | None = None):
        d = config.embed_dim
        self.config = config
        self.mode = "soft" if keep is None else "hard"
        self.patch_weight = Tensor(np.zeros((config.patch_dim, d)), requires_grad=True)
        self.patch_bias = Tensor(np.zeros(d), requires_grad=True)
        self.cls_token = Tensor(np.zeros((1, 1, d)), requires_grad=True)
        self.pos_embed = Tensor(np.zeros((1, config.num_tokens, d)), requires_grad=True)
        self.blocks = [
            TransformerBlock(config, i,
                             None if keep is None else keep[f"blocks.{i}"])
            for i in range(config.num_layers)
        ]
        self.norm_gain = Tensor(np.ones(d), requires_grad=True)
        self.norm_bias = Tensor(np.zeros(d), requires_grad=True)
        self.head_weight = Tensor(np.zeros((d, config.num_classes)), requires_grad=True)
        self.head_bias = Tensor(np.zeros(config.num_classes), requires_grad=True)

    def named_parameters(self) -> list[tuple[str, Tensor, bool]]:
        """(name, tensor, weight-decay flag) in a fixed deterministic order."""
        params: list[tuple[str, Tensor, bool]] = [
            ("patch_embed.weight", self.patch_weight, True),
            ("patch_embed.bias", self.patch_bias, False),
            ("cls_token", self.cls_token, True),
            ("pos_embed", self.pos_embed, True),
        ]
        for block in self.blocks:
            p = f"blocks.{block.index}"
            params += [
                (f"{p}.norm1.gain", block.norm1_gain, False),
                (f"{p}.norm1.bias", block.norm1_bias, False),
                (f"{p}.attn.wq", block.wq, True),
                (f"{p}.attn.bq", block.bq, False),
                (f"{p}.attn.wk", block.wk, True),
                (f"{p}.attn.bk", block.bk, False),
                (f"{p}.attn.wv", block.wv, True),
                (f"{p}.attn.bv", block.bv, False),
                (f"{p}.attn.wo", block.wo, True),
                (f"{p}.attn.bo", block.bo, False),
                (f"{p}.norm2.gain", block.norm2_gain, False),
                (f"{p}.norm2.bias", block.norm2_bias, False),
                (f"{p}.mlp.w1", block.w1, True),
                (f"{p}.mlp.b1", block.b1, False),
                (f"{p}.mlp.w2", block.w2, True),
                (f"{p}.mlp.b2", block.b2, False),
            ]
            if block.gates is not None:
                params += [(f"{p}.gate.{pos}", block.gates[pos].scores, False)
                           for pos in GATE_POSITIONS]
        params += [
            ("norm.gain", self.norm_gain, False),
            ("norm.bias", self.norm_bias, False),
            ("head.weight", self.head_weight, True),
            ("head.bias", self.head_bias, False),
        ]
        return params

    def gate_vectors(self) -> list[GateVector]:
        """All gates in canonical site order; empty for hard models."""
        if self.mode != "soft":
            return []
        return [block.gates[pos]
                for block in self.blocks for pos in GATE_POSITIONS]

    def keep_indices(self) -> dict[str, np.ndarray]:
        """Kept original indices per site key (identity before pruning)."""
        out = {}
        for block in self.blocks:
            for pos in GATE_POSITIONS:
                site = GateSite(block.index, pos)
                if block.keep is None:
                    out[site.key] = np.arange(site.dim(self.config), dtype=np.intp)
                else:
                    out[site.key] = np.asarray(block.keep[pos], dtype=np.intp)
        return out


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal draws resampled until within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_model(config: ModelConfig, seed: int) -> VitModel:
    """Fresh soft model: truncated-normal weights, zero biases, unit gates."""
    model = VitModel(config)
    rng = np.random.default_rng(seed)
    for name, tensor, _ in model.named_parameters():
        if name.endswith((".bias", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
            continue  # stays zero
        if ".norm" in name or name.startswith("norm.") or ".gate." in name:
            continue  # norm affine stays (1, 0); gates stay at exactly 1
        tensor.data[...] = _trunc_normal(rng, tensor.data.shape, INIT_STD)
    return model


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(b,c,H,W) -> (b, patches, p*p*c); row-major grid, channels fastest."""
    b, c, height, width = images.shape
    g = height // patch_size
    x = images.transpose(0, 2, 3, 1)
    x = x.reshape(b, g, patch_size, g, patch_size, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, g * g, patch_size * patch_size * c))


def attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int,
              v_splits: list[int] | None = None) -> Tensor:
    """Per-head scaled dot-product attention; heads concatenated.

    ``v_splits`` gives each head's value width (they may differ after
    pruning); by default the value width is split evenly like q and k.
    """
    dq = q.shape[-1]
    dv = v.shape[-1]
    if k.shape[-1] != dq:
        raise DimensionError(f"q width {dq} != k width {k.shape[-1]}")
    if dq % num_heads != 0:
        raise DimensionError(f"q/k width {dq} not divisible by {num_heads} heads")
    if v_splits is None:
        if dv % num_heads != 0:
            raise DimensionError(f"v width {dv} not divisible by {num_heads} heads")
        v_splits = [dv // num_heads] * num_heads
    if len(v_splits) != num_heads or sum(v_splits) != dv:
        raise DimensionError(
            f"head partition {v_splits} inconsistent with v width {dv}")
    dh = dq // num_heads
    scale = Tensor(1.0 / np.sqrt(dh))

    uniform = all(s == v_splits[0] for s in v_splits) and v_splits[0] > 0
    if uniform:
        # Single batched matmul over a head axis.
        lead = q.shape[:-2]
        n = q.shape[-2]
        dvh = v_splits[0]
        perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        qh = transpose(reshape(q, lead + (n, num_heads, dh)), perm)
        kh = transpose(reshape(k, lead + (n, num_heads, dh)), perm)
        vh = transpose(reshape(v, lead + (n, num_heads, dvh)), perm)
        scores = mul(matmul(qh, _swap(kh)), scale)
        out = matmul(softmax_rows(scores), vh)
        inv = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return reshape(transpose(out, inv), lead + (n, dv))

    heads = []
    offset = 0
    for h in range(num_heads):
        qh = narrow(q, -1, h * dh, dh)
        kh = narrow(k, -1, h * dh, dh)
        vh = narrow(v, -1, offset, v_splits[h])
        offset += v_splits[h]
        scores = mul(matmul(qh, _swap(kh)), scale)
        heads.append(matmul(softmax_rows(scores), vh))
    return concat(heads, axis=-1)


def _swap(t: Tensor) -> Tensor:
    axes = tuple(range(t.ndim - 2)) + (t.ndim - 1, t.ndim - 2)
    return transpose(t, axes)


def block_forward(x: Tensor, block: TransformerBlock, config: ModelConfig,
                  mode: str) -> Tensor:
    """One residual block; ``soft`` applies gates, ``hard`` uses sliced weights."""
    if mode == "soft":
        if block.gates is None:
            raise StateError("soft forward requested on a hard-pruned block")
        h = layer_norm(x, block.norm1_gain, block.norm1_bias, LN_EPS)
        h = scale_columns(h, block.gates["qkv_in"].scores)
        q = add(matmul(h, block.wq), block.bq)
        k = add(matmul(h, block.wk), block.bk)
        v = add(matmul(h, block.wv), block.bv)
        a = attention(q, k, v, config.num_heads)
        a = scale_columns(a, block.gates["attn_out"].scores)
        x = add(x, add(matmul(a, block.wo), block.bo))
        h = layer_norm(x, block.norm2_gain, block.norm2_bias, LN_EPS)
        h = scale_columns(h, block.gates["mlp_in"].scores)
        h = gelu(add(matmul(h, block.w1), block.b1))
        h = scale_columns(h, block.gates["mlp_hidden"].scores)
        return add(x, add(matmul(h, block.w2), block.b2))
    if mode == "hard":
        if block.keep is None:
            raise StateError("hard forward requested before a prune plan was applied")
        h = layer_norm(x, block.norm1_gain, block.norm1_bias, LN_EPS)
        h = take_columns(h, block.keep["qkv_in"])
        q = add(matmul(h, block.wq), block.bq)
        k = add(matmul(h, block.wk), block.bk)
        v = add(matmul(h, block.wv), block.bv)
        a = attention(q, k, v, config.num_heads, block.v_head_splits(config))
        x = add(x, add(matmul(a, block.wo), block.bo))
        h = layer_norm(x, block.norm2_gain, block.norm2_bias, LN_EPS)
        h = take_columns(h, block.keep["mlp_in"])
        h = gelu(add(matmul(h, block.w1), block.b1))
        return add(x, add(matmul(h, block.w2), block.b2))
    raise StateError(f"unknown forward mode {mode!r}")


def forward(model: VitModel, images, mode: str | None = None) -> Tensor:
    """Logits (b, num_classes) for a batch of images (b, c, H, W)."""
    cfg = model.config
    mode = model.mode if mode is None else mode
    if mode != model.mode:
        raise StateError(f"{mode} forward requested on a {model.mode} model")
    pixels = images.data if isinstance(images, Tensor) else np.asarray(images,
                                                                       dtype=np.float64)
    expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
    if pixels.ndim != 4 or pixels.shape[1:] != expected:
        raise DimensionError(
            f"images shape {pixels.shape} does not match (b, {expected[0]}, "
            f"{expected[1]}, {expected[2]})")
    b = pixels.shape[0]
    x = Tensor(patchify(pixels, cfg.patch_size))
    x = add(matmul(x, model.patch_weight), model.patch_bias)
    cls = add(Tensor(np.zeros((b, 1, cfg.embed_dim))), model.cls_token)
    x = concat([cls, x], axis=1)
    x = add(x, model.pos_embed)
    for block in model.blocks:
        x = block_forward(x, block, cfg, mode)
    x = layer_norm(x, model.norm_gain, model.norm_bias, LN_EPS)
    cls_row = reshape(narrow(x, 1, 0, 1), (b, cfg.embed_dim))
    return add(matmul(cls_row, model.head_weight), model.head_bias)
