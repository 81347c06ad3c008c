"""Two uni-modal backbones with cross-modal fusion inserted into their top layers.

The image backbone is a three-stage windowed-attention hierarchy; the text
backbone is a pre-norm transformer. The last ``fused_layers`` blocks of the
text backbone and of the image backbone's final stage carry the fusion
modules. In ``dual`` mode those modules are skipped, in ``fused`` mode the
paired blocks run in lockstep, each reading the other modality's input state.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .nn import (
    FFN,
    Attention,
    LayerNorm,
    Linear,
    Module,
    WindowConfig,
    attend,
    causal_mask,
    merge_heads,
    multi_head_attention,
    patch_merging,
    patchify,
    split_heads,
    window_attention,
    xavier_uniform,
)
from .tensor import ContractError, ShapeError, Tensor
from .vocab import PAD_ID, VOCAB_SIZE

STRATEGIES = ("merged_attention", "co_attention_ungated", "co_attention_gated")
MODES = ("dual", "fused")


@dataclass(frozen=True)
class FusionConfig:
    strategy: str = "co_attention_gated"
    fused_layers: int = 2
    alpha_init: float = 0.0
    vocab_size: int = VOCAB_SIZE
    max_text_len: int = 24
    text_width: int = 64
    text_depth: int = 6
    text_heads: int = 4
    image_size: int = 64
    patch_size: int = 4
    image_widths: tuple[int, ...] = (32, 64, 128)
    image_depths: tuple[int, ...] = (2, 2, 2)
    image_heads: tuple[int, ...] = (2, 4, 8)
    window: int = 4
    embed_dim: int = 64
    # tanh-form GELU by default: scipy's erf dominates a float32 step otherwise
    gelu: str = "tanh"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown fusion strategy {self.strategy!r}; choose from {STRATEGIES}")
        if not 0 <= self.fused_layers <= min(self.text_depth, self.image_depths[-1]):
            raise ValueError(
                f"fused_layers={self.fused_layers} exceeds min(text depth {self.text_depth}, "
                f"top image stage depth {self.image_depths[-1]})"
            )
        if not len(self.image_widths) == len(self.image_depths) == len(self.image_heads):
            raise ValueError("image_widths, image_depths and image_heads must have equal length")
        for w, w_next in zip(self.image_widths, self.image_widths[1:]):
            if w_next != 2 * w:
                raise ValueError(f"patch merging doubles width; got {self.image_widths}")
        side = self.grid_sides[0]
        if self.image_size % self.patch_size or side % self.window:
            raise ValueError("image size must tile into patches and the stage-1 grid into windows")
        if self.strategy == "merged_attention" and self.fused_layers and self.grid_sides[-1] != self.window:
            raise ValueError("merged attention needs the top image stage to be a single window")
        if self.gelu not in ("erf", "tanh"):
            raise ValueError(f"gelu must be 'erf' or 'tanh', got {self.gelu!r}")

    @property
    def grid_sides(self) -> list[int]:
        side = self.image_size // self.patch_size
        return [side >> i for i in range(len(self.image_depths))]

    def shift_for(self, stage: int, block: int) -> int:
        side = self.grid_sides[stage]
        if side <= self.window or block % 2 == 0:
            return 0
        return self.window // 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        known = {f.name for f in fields(cls)}
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in known}
        return cls(**kw)


@dataclass
class PassCounter:
    """Backbone invocations: one per image or text in dual mode, one per pair fused."""

    image: int = 0
    text: int = 0
    fused: int = 0

    @property
    def dual(self) -> int:
        return self.image + self.text

    @property
    def total(self) -> int:
        return self.image + self.text + self.fused

    def reset(self) -> None:
        self.image = self.text = self.fused = 0


@dataclass
class EncoderOutput:
    """``image_feats`` (text-aware, fine to coarse) and ``text_feats`` are set in
    fused mode; the L2-normalized pooled embeddings in dual mode."""

    image_feats: list[Tensor] | None = None
    text_feats: Tensor | None = None
    text_valid: np.ndarray | None = None
    image_emb: Tensor | None = None
    text_emb: Tensor | None = None
    mode: str = "dual"


# ---------------------------------------------------------------------------
# fused layers


class FusionBlock(Module):
    """Pre-norm transformer block with optional cross-modal fusion modules.

    ``d`` is this modality's width, ``d_other`` the partner's. ``strategy`` is
    None for a plain uni-modal block.
    """

    def __init__(
        self,
        d: int,
        heads: int,
        rng: np.random.Generator,
        dtype,
        strategy: str | None = None,
        d_other: int | None = None,
        alpha_init: float = 0.0,
        window: WindowConfig | None = None,
        gelu: str = "erf",
    ):
        self.strategy = strategy
        self.window = window
        self.norm1 = LayerNorm(d, dtype)
        self.attn = Attention(d, heads, rng, dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.ffn = FFN(d, rng, dtype, gelu=gelu)
        if strategy in ("co_attention_gated", "co_attention_ungated"):
            self.fuse_norm = LayerNorm(d, dtype)
            self.fuse_attn = Attention(d, heads, rng, dtype, d_kv=d_other)
            if strategy == "co_attention_gated":
                self.fuse_gate = Tensor(np.asarray(alpha_init, dtype=dtype), requires_grad=True)
        elif strategy == "merged_attention":
            self.fuse_k = Linear(d_other, d, rng, dtype)
            self.fuse_v = Linear(d_other, d, rng, dtype)

    @property
    def fused(self) -> bool:
        return self.strategy is not None

    def self_attend(self, h: Tensor, mask: np.ndarray | None) -> Tensor:
        if self.window is not None:
            return window_attention(self.window, self.attn, h)
        return multi_head_attention(self.attn, h, h, mask)


def plain_layer(blk: FusionBlock, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """The block with every fusion module deleted."""
    x = x + blk.self_attend(blk.norm1(x), mask)
    return x + blk.ffn(blk.norm2(x))


def _as_sequence(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1, x.shape[-1]) if x.ndim == 4 else x


def fused_coattention_layer(
    blk: FusionBlock,
    x: Tensor,
    y: Tensor,
    self_mask: np.ndarray | None = None,
    y_valid: np.ndarray | None = None,
) -> Tensor:
    """x~ = SelfAtt(x);  x <- x + x~ + a * CrossAtt(x~, y);  x <- x + FFN(x).

    Pre-norm: LN precedes self-attention, the cross-attention query and the FFN.
    ``y`` is the partner's state (``[B, L, d']`` or a ``[B, H, W, d']`` grid);
    ``y_valid`` ``[B, L']`` flags the partner's real (non-pad) positions.
    """
    ys = _as_sequence(y)
    if blk.fuse_attn.k.d_in != ys.shape[-1]:
        raise ShapeError(f"co-attention: partner width {ys.shape[-1]} != {blk.fuse_attn.k.d_in}")
    x_tilde = blk.self_attend(blk.norm1(x), self_mask)
    q = _as_sequence(blk.fuse_norm(x_tilde))
    mask = None if y_valid is None else y_valid[:, None, :]
    cross = multi_head_attention(blk.fuse_attn, q, ys, mask).reshape(x.shape)
    if blk.strategy == "co_attention_gated":
        cross = cross * blk.fuse_gate
    x = (x + x_tilde) + cross
    return x + blk.ffn(blk.norm2(x))


def merged_attention_layer(
    x_blk: FusionBlock,
    y_blk: FusionBlock,
    x: Tensor,
    y: Tensor,
    x_valid: np.ndarray | None = None,
    y_valid: np.ndarray | None = None,
    x_causal: bool = False,
) -> tuple[Tensor, Tensor]:
    """Concatenated [x; y] self-attention with per-modality key/value projections.

    Each modality's queries attend over both modalities' keys; keys and values
    of a token are produced by matrices belonging to the attending block (its
    own ``attn.k/v`` for its own tokens, ``fuse_k/v`` for the partner's).
    Returns the updated ``(x, y)``; grids are flattened internally.
    """
    xs, ys = _as_sequence(x), _as_sequence(y)
    hx, hy = x_blk.norm1(xs), y_blk.norm1(ys)
    b, lx, ly = xs.shape[0], xs.shape[1], ys.shape[1]
    vx = np.ones((b, lx), bool) if x_valid is None else np.asarray(x_valid, bool)
    vy = np.ones((b, ly), bool) if y_valid is None else np.asarray(y_valid, bool)
    keys_valid = np.concatenate([vx, vy], axis=1)

    def one_side(blk, h_self, h_other, n_self, valid_first, causal):
        heads = blk.attn.heads
        q = split_heads(blk.attn.q(h_self), heads)
        k = split_heads(T.concat([blk.attn.k(h_self), blk.fuse_k(h_other)], axis=1), heads)
        v = split_heads(T.concat([blk.attn.v(h_self), blk.fuse_v(h_other)], axis=1), heads)
        mask = np.broadcast_to(valid_first[:, None, :], (b, n_self, valid_first.shape[1])).copy()
        if causal:
            mask[:, :, :n_self] &= causal_mask(n_self)
        return blk.attn.o(merge_heads(attend(q, k, v, mask)))

    out_x = one_side(x_blk, hx, hy, lx, keys_valid, x_causal)
    keys_valid_y = np.concatenate([vy, vx], axis=1)
    out_y = one_side(y_blk, hy, hx, ly, keys_valid_y, False)
    new_x = xs + out_x
    new_x = new_x + x_blk.ffn(x_blk.norm2(new_x))
    new_y = ys + out_y
    new_y = new_y + y_blk.ffn(y_blk.norm2(new_y))
    return new_x.reshape(x.shape), new_y.reshape(y.shape)


# ---------------------------------------------------------------------------
# backbones


class ImageBackbone(Module):
    def __init__(self, cfg: FusionConfig, rng: np.random.Generator, dtype):
        side = cfg.grid_sides[0]
        patch_dim = cfg.patch_size * cfg.patch_size * 3
        d0 = cfg.image_widths[0]
        self.patch_embed = Linear(patch_dim, d0, rng, dtype)
        self.pos = Tensor((rng.standard_normal((side, side, d0)) * 0.02).astype(dtype), requires_grad=True)
        self.embed_norm = LayerNorm(d0, dtype)
        self.stages = []
        n_stages = len(cfg.image_depths)
        for s, (d, depth, heads) in enumerate(zip(cfg.image_widths, cfg.image_depths, cfg.image_heads)):
            blocks = []
            for i in range(depth):
                fused = s == n_stages - 1 and i >= depth - cfg.fused_layers
                blocks.append(
                    FusionBlock(
                        d,
                        heads,
                        rng,
                        dtype,
                        strategy=cfg.strategy if fused else None,
                        d_other=cfg.text_width,
                        alpha_init=cfg.alpha_init,
                        gelu=cfg.gelu,
                        window=WindowConfig(cfg.window, cfg.shift_for(s, i)),
                    )
                )
            self.stages.append(_Stage(blocks))
        self.merges = [Linear(4 * d, 2 * d, rng, dtype) for d in cfg.image_widths[:-1]]
        self.final_norm = LayerNorm(cfg.image_widths[-1], dtype)


class _Stage(Module):
    def __init__(self, blocks: list[FusionBlock]):
        self.blocks = blocks


class TextBackbone(Module):
    def __init__(self, cfg: FusionConfig, rng: np.random.Generator, dtype):
        d = cfg.text_width
        self.tok_emb = Tensor((rng.standard_normal((cfg.vocab_size, d)) * 0.02).astype(dtype), requires_grad=True)
        self.pos_emb = Tensor((rng.standard_normal((cfg.max_text_len, d)) * 0.02).astype(dtype), requires_grad=True)
        self.embed_norm = LayerNorm(d, dtype)
        self.layers = [
            FusionBlock(
                d,
                cfg.text_heads,
                rng,
                dtype,
                strategy=cfg.strategy if i >= cfg.text_depth - cfg.fused_layers else None,
                d_other=cfg.image_widths[-1],
                alpha_init=cfg.alpha_init,
                gelu=cfg.gelu,
            )
            for i in range(cfg.text_depth)
        ]
        self.final_norm = LayerNorm(d, dtype)


@dataclass
class TextState:
    hidden: Tensor
    valid: np.ndarray
    causal: bool = False

    @property
    def self_mask(self) -> np.ndarray:
        m = np.broadcast_to(self.valid[:, None, :], (self.valid.shape[0],) + (self.valid.shape[1],) * 2)
        if self.causal:
            m = m & causal_mask(self.valid.shape[1])
        return m


@dataclass
class ImageState:
    """Lower-stage outputs (fine to coarse, excluding the top) and the top-stage
    state at the input of the first fused block."""

    lower: list[Tensor] = field(default_factory=list)
    top: Tensor | None = None


class FusionEncoder(Module):
    def __init__(self, cfg: FusionConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.image = ImageBackbone(cfg, rng, dtype)
        self.text = TextBackbone(cfg, rng, dtype)
        self.image_proj = Linear(cfg.image_widths[-1], cfg.embed_dim, rng, dtype)
        self.text_proj = Linear(cfg.text_width, cfg.embed_dim, rng, dtype)
        # 1/temperature = 14.3 at start; exponential parameterization keeps it positive
        self.logit_scale = Tensor(np.asarray(np.log(14.3), dtype=dtype), requires_grad=True)
        self.counter = PassCounter()

    # -- lower (never fused) layers ------------------------------------
    def image_lower(self, pixels) -> ImageState:
        cfg = self.cfg
        px = pixels if isinstance(pixels, Tensor) else Tensor(np.asarray(pixels, dtype=self.dtype))
        if px.ndim != 4 or px.shape[1:] != (cfg.image_size, cfg.image_size, 3):
            raise ShapeError(f"image_lower: expected [B, {cfg.image_size}, {cfg.image_size}, 3], got {px.shape}")
        img = self.image
        x = img.patch_embed(patchify(px, cfg.patch_size)) + img.pos
        x = img.embed_norm(x)
        lower = []
        n_stages = len(img.stages)
        for s, stage in enumerate(img.stages):
            blocks = stage.blocks
            if s == n_stages - 1:
                for blk in blocks[: len(blocks) - cfg.fused_layers]:
                    x = plain_layer(blk, x)
                return ImageState(lower, x)
            for blk in blocks:
                x = plain_layer(blk, x)
            lower.append(x)
            x = patch_merging(x, img.merges[s])
        raise AssertionError("unreachable")

    def text_lower(self, token_ids, causal: bool = False) -> TextState:
        cfg = self.cfg
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ShapeError(f"text_lower: token ids must be [B, L], got {ids.shape}")
        if ids.shape[1] > cfg.max_text_len:
            raise ContractError(f"token length {ids.shape[1]} exceeds max_text_len={cfg.max_text_len}")
        txt = self.text
        x = T.take(txt.tok_emb, ids, axis=0) + txt.pos_emb[: ids.shape[1]]
        x = txt.embed_norm(x)
        state = TextState(x, ids != PAD_ID, causal)
        mask = state.self_mask
        for blk in txt.layers[: cfg.text_depth - cfg.fused_layers]:
            x = plain_layer(blk, x, mask)
        state.hidden = x
        return state

    # -- top (fusable) layers ------------------------------------------
    def image_top_dual(self, state: ImageState) -> Tensor:
        x = state.top
        for blk in self.image.stages[-1].blocks:
            if blk.fused:
                x = plain_layer(blk, x)
        return self.image.final_norm(x)

    def text_top_dual(self, state: TextState) -> Tensor:
        x = state.hidden
        mask = state.self_mask
        for blk in self.text.layers:
            if blk.fused:
                x = plain_layer(blk, x, mask)
        return self.text.final_norm(x)

    def top_fused(self, image_top: Tensor, text: TextState, image_to_text_only: bool = False) -> tuple[Tensor, Tensor]:
        """Run the fused blocks in lockstep on paired states.

        With ``image_to_text_only`` the image path is left uni-modal and only
        the text side reads the image (staged decoding).
        """
        cfg = self.cfg
        if image_top.shape[0] != text.hidden.shape[0]:
            raise ShapeError(f"top_fused: {image_top.shape[0]} images vs {text.hidden.shape[0]} texts")
        img_blocks = [b for b in self.image.stages[-1].blocks if b.fused]
        txt_blocks = [b for b in self.text.layers if b.fused]
        x_img, x_txt = image_top, text.hidden
        tmask = text.self_mask
        for ib, tb in zip(img_blocks, txt_blocks):
            if cfg.strategy == "merged_attention":
                if image_to_text_only:
                    new_img = plain_layer(ib, x_img)
                    new_txt, _ = merged_attention_layer(tb, ib, x_txt, x_img, text.valid, None, text.causal)
                else:
                    new_txt, new_img = merged_attention_layer(tb, ib, x_txt, x_img, text.valid, None, text.causal)
            else:
                if image_to_text_only:
                    new_img = plain_layer(ib, x_img)
                else:
                    new_img = fused_coattention_layer(ib, x_img, x_txt, None, text.valid)
                new_txt = fused_coattention_layer(tb, x_txt, x_img, tmask, None)
            x_img, x_txt = new_img, new_txt
        return self.image.final_norm(x_img), self.text.final_norm(x_txt)

    # -- pooled embeddings ---------------------------------------------
    def embed_image(self, top: Tensor) -> Tensor:
        return T.l2_normalize(self.image_proj(T.reduce_mean(top, axis=(1, 2))))

    def embed_text(self, feats: Tensor, valid: np.ndarray) -> Tensor:
        return T.l2_normalize(self.text_proj(T.masked_mean(feats, valid)))

    # -- public entry ----------------------------------------------------
    def encode(self, pixels=None, token_ids=None, mode: str = "fused") -> EncoderOutput:
        """Encode images and/or texts.

        ``dual``: images and texts are encoded independently (either may be
        None); fills the pooled embeddings and counts one pass per input.
        ``fused``: ``pixels[i]`` is paired with ``token_ids[i]``; fills
        ``image_feats``/``text_feats`` and counts one pass per pair.
        """
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        out = EncoderOutput(mode=mode)
        if mode == "dual":
            if pixels is not None:
                top = self.image_top_dual(self.image_lower(pixels))
                out.image_emb = self.embed_image(top)
                self.counter.image += top.shape[0]
            if token_ids is not None:
                state = self.text_lower(token_ids)
                feats = self.text_top_dual(state)
                out.text_emb = self.embed_text(feats, state.valid)
                self.counter.text += feats.shape[0]
            return out
        if pixels is None or token_ids is None:
            raise ContractError("fused mode needs both images and texts")
        istate = self.image_lower(pixels)
        tstate = self.text_lower(token_ids)
        img, txt = self.top_fused(istate.top, tstate)
        self.counter.fused += txt.shape[0]
        out.image_feats = istate.lower + [img]
        out.text_feats = txt
        out.text_valid = tstate.valid
        return out

    def encode_features(self, pixels, token_ids, fuse: bool) -> tuple[list[Tensor], Tensor]:
        """Full per-scale image features and token features with fusion on or off."""
        istate = self.image_lower(pixels)
        tstate = self.text_lower(token_ids)
        if fuse:
            img, txt = self.top_fused(istate.top, tstate)
        else:
            img, txt = self.image_top_dual(istate), self.text_top_dual(tstate)
        return istate.lower + [img], txt

    def gates(self) -> dict[str, float]:
        return {name: float(p.data) for name, p in self.named_parameters() if name.endswith("fuse_gate")}


def pooled_pair_features(out: EncoderOutput) -> Tensor:
    """Concatenate mean-pooled text features and mean-pooled top image features."""
    t = T.masked_mean(out.text_feats, out.text_valid)
    i = T.reduce_mean(out.image_feats[-1], axis=(1, 2))
    return T.concat([t, i], axis=-1)


# ---------------------------------------------------------------------------
# parameter accounting


def fusion_parameter_names(module: Module) -> list[str]:
    return [name for name, _ in module.named_parameters() if ".fuse_" in name]


def fusion_param_census(module: Module) -> int:
    """Count parameters of fusion modules in an instantiated encoder."""
    return sum(p.size for name, p in module.named_parameters() if ".fuse_" in name)


def count_fusion_params(cfg: FusionConfig) -> int:
    """Analytic count of parameters added by the fusion modules."""

    def per_block(d: int, d_other: int) -> int:
        if cfg.strategy == "merged_attention":
            return 2 * (d * d_other + d)
        n = 2 * d * d + 2 * d * d_other + 4 * d + 2 * d
        return n + (1 if cfg.strategy == "co_attention_gated" else 0)

    d_img, d_txt = cfg.image_widths[-1], cfg.text_width
    return cfg.fused_layers * (per_block(d_img, d_txt) + per_block(d_txt, d_img))
