"""Miniature masked autoencoder over image patches.

The encoder embeds patch tokens and runs pre-norm transformer blocks; in
the reconstruction path it sees only visible patches, while the student
path feeds it every patch of an (already occluded) image. The decoder
fills masked positions with one shared learned token, adds positional
tables to all tokens, and predicts raw pixel values per patch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .masking import MaskSpec
from .params import Affine, affine, make_affine, zeros_param
from .tensor import Tensor


@dataclass(frozen=True)
class MAEConfig:
    image_size: int = 64
    patch_size: int = 8
    enc_dim: int = 64
    enc_depth: int = 4
    enc_heads: int = 4
    dec_dim: int = 32
    dec_depth: int = 2
    dec_heads: int = 4
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ValueError("dims must be divisible by head counts")
        if not self.dec_depth < self.enc_depth:
            raise ValueError("decoder must be shallower than encoder")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


@dataclass
class TokenSequence:
    """Encoded tokens plus the patch index each row corresponds to."""

    tokens: Tensor  # (L, D) or (B, L, D)
    positions: tuple[int, ...] | np.ndarray  # (L,) or (B, L), strictly increasing per row

    def __post_init__(self):
        pos = np.asarray(self.positions)
        if pos.shape[-1] != self.tokens.shape[-2]:
            raise ValueError("token count does not match positions")
        if pos.size and not np.all(np.diff(pos, axis=-1) > 0):
            raise ValueError("positions must be strictly increasing")


@dataclass
class AttentionParams:
    query: Affine
    key: Affine
    value: Affine
    out: Affine


@dataclass
class BlockParams:
    ln1_scale: Tensor
    ln1_offset: Tensor
    attn: AttentionParams
    ln2_scale: Tensor
    ln2_offset: Tensor
    fc1: Affine
    fc2: Affine


@dataclass
class MAEEncoderParams:
    patch_embed: Affine
    pos: np.ndarray  # fixed sinusoidal table (P, enc_dim)
    blocks: list[BlockParams]
    ln_scale: Tensor
    ln_offset: Tensor


@dataclass
class MAEDecoderParams:
    embed: Affine  # enc_dim -> dec_dim
    mask_token: Tensor  # single shared (dec_dim,) vector
    pos: np.ndarray  # fixed sinusoidal table (P, dec_dim)
    blocks: list[BlockParams]
    ln_scale: Tensor
    ln_offset: Tensor
    pixel_head: Affine  # dec_dim -> patch_dim


@dataclass
class MAEParams:
    encoder: MAEEncoderParams
    decoder: MAEDecoderParams


def sincos_pos_table(grid: int, dim: int, dtype) -> np.ndarray:
    """Fixed 2-d sine/cosine positional table for a grid x grid patch layout."""
    if dim % 4 != 0:
        raise ValueError("positional dim must be divisible by 4")
    half = dim // 2
    omega = 1.0 / (10000.0 ** (np.arange(half // 2, dtype=np.float64) / (half // 2)))
    coords = np.arange(grid, dtype=np.float64)

    def axis_table(pos):
        ang = np.outer(pos, omega)
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    th = axis_table(coords)  # (grid, half)
    rows = np.repeat(th, grid, axis=0)
    cols = np.tile(th, (grid, 1))
    return np.concatenate([rows, cols], axis=1).astype(dtype)


def _init_block(rng, dim: int, mlp_ratio: float, dtype) -> BlockParams:
    hidden = int(dim * mlp_ratio)
    return BlockParams(
        ln1_scale=Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
        ln1_offset=zeros_param((dim,), dtype),
        attn=AttentionParams(
            query=make_affine(rng, dim, dim, dtype),
            key=make_affine(rng, dim, dim, dtype),
            value=make_affine(rng, dim, dim, dtype),
            out=make_affine(rng, dim, dim, dtype),
        ),
        ln2_scale=Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
        ln2_offset=zeros_param((dim,), dtype),
        fc1=make_affine(rng, dim, hidden, dtype),
        fc2=make_affine(rng, hidden, dim, dtype),
    )


def init_mae_params(cfg: MAEConfig, seed: int, dtype=np.float64) -> MAEParams:
    rng = np.random.Generator(np.random.PCG64(seed))
    enc = MAEEncoderParams(
        patch_embed=make_affine(rng, cfg.patch_dim, cfg.enc_dim, dtype),
        pos=sincos_pos_table(cfg.grid, cfg.enc_dim, dtype),
        blocks=[_init_block(rng, cfg.enc_dim, cfg.mlp_ratio, dtype) for _ in range(cfg.enc_depth)],
        ln_scale=Tensor(np.ones(cfg.enc_dim, dtype=dtype), requires_grad=True),
        ln_offset=zeros_param((cfg.enc_dim,), dtype),
    )
    dec = MAEDecoderParams(
        embed=make_affine(rng, cfg.enc_dim, cfg.dec_dim, dtype),
        mask_token=Tensor(rng.normal(0.0, 0.02, size=cfg.dec_dim).astype(dtype), requires_grad=True),
        pos=sincos_pos_table(cfg.grid, cfg.dec_dim, dtype),
        blocks=[_init_block(rng, cfg.dec_dim, cfg.mlp_ratio, dtype) for _ in range(cfg.dec_depth)],
        ln_scale=Tensor(np.ones(cfg.dec_dim, dtype=dtype), requires_grad=True),
        ln_offset=zeros_param((cfg.dec_dim,), dtype),
        pixel_head=make_affine(rng, cfg.dec_dim, cfg.patch_dim, dtype),
    )
    return MAEParams(encoder=enc, decoder=dec)


# ---------------------------------------------------------------------------
# patch layout
# ---------------------------------------------------------------------------

def patchify(image: Tensor | np.ndarray, patch_size: int):
    """(..., H, W, 3) -> (..., P, patch_size^2 * 3), patches in row-major order."""
    arr = image.data if isinstance(image, Tensor) else image
    h, w = arr.shape[-3], arr.shape[-2]
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    lead = arr.shape[:-3]
    nl = len(lead)
    mid = (gh, patch_size, gw, patch_size, 3)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4)
    final = lead + (gh * gw, patch_size * patch_size * 3)
    if isinstance(image, Tensor):
        return image.reshape(lead + mid).transpose(perm).reshape(final)
    return arr.reshape(lead + mid).transpose(perm).reshape(final)


def unpatchify(patches: Tensor | np.ndarray, patch_size: int, grid: int):
    """Inverse of patchify; bit-exact round trip."""
    arr = patches.data if isinstance(patches, Tensor) else patches
    lead = arr.shape[:-2]
    nl = len(lead)
    mid = (grid, grid, patch_size, patch_size, 3)
    perm = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4)
    final = lead + (grid * patch_size, grid * patch_size, 3)
    if isinstance(patches, Tensor):
        return patches.reshape(lead + mid).transpose(perm).reshape(final)
    return arr.reshape(lead + mid).transpose(perm).reshape(final)


# ---------------------------------------------------------------------------
# transformer forward
# ---------------------------------------------------------------------------

def layer_norm(x, scale: Tensor, offset: Tensor, eps: float = 1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / T.sqrt(var + eps) * scale + offset


def attention(x, p: AttentionParams, heads: int):
    """Standard multi-head self-attention on (..., L, D) tokens."""
    q, k, v = affine(x, p.query), affine(x, p.key), affine(x, p.value)
    lead = q.shape[:-2]
    length, dim = q.shape[-2], q.shape[-1]
    dh = dim // heads

    def split(t):
        t = t.reshape(lead + (length, heads, dh))
        return t.swapaxes(-3, -2)  # (..., heads, L, dh)

    qh, kh, vh = split(q), split(k), split(v)
    scores = (qh @ kh.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    ctx = attn @ vh
    ctx = ctx.swapaxes(-3, -2).reshape(lead + (length, dim))
    return affine(ctx, p.out)


def transformer_block(x, p: BlockParams, heads: int):
    x = x + attention(layer_norm(x, p.ln1_scale, p.ln1_offset), p.attn, heads)
    h = affine(layer_norm(x, p.ln2_scale, p.ln2_offset), p.fc1)
    return x + affine(T.relu(h), p.fc2)


def _encoder_of(params) -> MAEEncoderParams:
    return params.encoder if isinstance(params, MAEParams) else params


def _run_encoder(tokens, enc: MAEEncoderParams, heads: int):
    x = tokens
    for blk in enc.blocks:
        x = transformer_block(x, blk, heads)
    return layer_norm(x, enc.ln_scale, enc.ln_offset)


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

def encode_visible_batch(images: np.ndarray, specs: list[MaskSpec], params, cfg: MAEConfig) -> TokenSequence:
    """Encode only the visible patches of a batch with equal visible counts.

    Masked patch pixels are never read, so the output is exactly invariant
    to any change confined to masked patches.
    """
    enc = _encoder_of(params)
    counts = {len(s.visible) for s in specs}
    if len(counts) != 1:
        raise ValueError("batched visible encoding needs equal visible counts")
    if counts == {0}:
        raise ValueError("all patches are masked; the encoder has no input")
    positions = np.array([s.visible for s in specs])  # (B, L)
    px = patchify(images, cfg.patch_size)  # (B, P, pd) numpy
    batch_idx = np.arange(px.shape[0])[:, None]
    vis = Tensor(px[batch_idx, positions])
    x = affine(vis, enc.patch_embed) + Tensor(enc.pos[positions])
    return TokenSequence(tokens=_run_encoder(x, enc, cfg.enc_heads), positions=positions)


def encode_visible(image: np.ndarray, spec: MaskSpec, params, cfg: MAEConfig) -> TokenSequence:
    """Single-image visible-patch encoding; returns (L_vis, enc_dim) tokens."""
    seq = encode_visible_batch(image[None], [spec], params, cfg)
    return TokenSequence(tokens=seq.tokens.reshape(seq.tokens.shape[1:]), positions=spec.visible)


def encode_full_batch(images: np.ndarray, params, cfg: MAEConfig) -> TokenSequence:
    """Encode every patch; consumes no mask information anywhere."""
    enc = _encoder_of(params)
    px = patchify(images, cfg.patch_size)
    x = affine(Tensor(px), enc.patch_embed) + Tensor(enc.pos)
    positions = np.broadcast_to(np.arange(cfg.n_patches), (images.shape[0], cfg.n_patches))
    return TokenSequence(tokens=_run_encoder(x, enc, cfg.enc_heads), positions=positions)


def encode_full(image: np.ndarray, params, cfg: MAEConfig) -> TokenSequence:
    seq = encode_full_batch(image[None], params, cfg)
    return TokenSequence(tokens=seq.tokens.reshape(seq.tokens.shape[1:]), positions=tuple(range(cfg.n_patches)))


# ---------------------------------------------------------------------------
# decoding and reconstruction
# ---------------------------------------------------------------------------

def assemble_decoder_tokens(latent: TokenSequence, specs: list[MaskSpec], dec: MAEDecoderParams):
    """Project latents to decoder width and insert the shared mask token.

    Returns the (B, P, dec_dim) token set before positional tables are
    added, which is the point where every masked position holds one and
    the same vector.
    """
    tokens = latent.tokens
    if tokens.ndim == 2:
        tokens = tokens.reshape((1,) + tokens.shape)
    positions = np.atleast_2d(np.asarray(latent.positions))
    b = tokens.shape[0]
    p = specs[0].n_patches
    for s, pos in zip(specs, positions):
        expected = np.asarray(s.visible)
        if expected.shape != pos.shape or np.any(expected != pos):
            raise ValueError("latent positions must be the complement of the masked set")
    x = affine(tokens, dec.embed)  # (B, L, dec_dim)
    base = T.broadcast_to(dec.mask_token.reshape((1, 1, -1)), (b, p, dec.mask_token.shape[0]))
    return T.scatter_rows(base, positions, x)


def decode_batch(latent: TokenSequence, specs: list[MaskSpec], params: MAEParams, cfg: MAEConfig):
    """Decode to per-patch pixel predictions, shape (B, P, patch_dim)."""
    dec = params.decoder
    x = assemble_decoder_tokens(latent, specs, dec) + Tensor(dec.pos)
    for blk in dec.blocks:
        x = transformer_block(x, blk, cfg.dec_heads)
    x = layer_norm(x, dec.ln_scale, dec.ln_offset)
    return affine(x, dec.pixel_head)


def decode(latent: TokenSequence, spec: MaskSpec, params: MAEParams, cfg: MAEConfig):
    out = decode_batch(latent, [spec], params, cfg)
    return out.reshape(out.shape[1:])


def recon_loss(pred, target_images: np.ndarray, specs: list[MaskSpec] | MaskSpec, patch_size: int):
    """Mean squared error over masked pixel values only.

    Predictions on visible patches contribute exactly zero. Undefined
    (raises) when no patch is masked.
    """
    if isinstance(specs, MaskSpec):
        specs = [specs]
    if pred.ndim == 2:
        pred = pred.reshape((1,) + pred.shape)
        target_images = target_images[None]
    target = patchify(target_images, patch_size)  # (B, P, pd) numpy
    mask = np.stack([s.patch_mask() for s in specs]).astype(pred.dtype)  # (B, P)
    n_masked_values = float(mask.sum()) * target.shape[-1]
    if n_masked_values == 0:
        raise ValueError("reconstruction loss is undefined for an empty mask")
    diff = (pred - Tensor(target)) * Tensor(mask[:, :, None])
    return (diff * diff).sum() / n_masked_values


def composite_batch(images: np.ndarray, pred, specs: list[MaskSpec], cfg: MAEConfig):
    """Visible patches from the original image, masked patches from pred."""
    up = unpatchify(pred, cfg.patch_size, cfg.grid)  # Tensor (B, H, W, 3)
    pix = np.stack([s.pixel_mask() for s in specs]).astype(up.dtype)[..., None]
    return Tensor(images) * (1.0 - pix) + up * pix


def composite(image: np.ndarray, pred, spec: MaskSpec, cfg: MAEConfig):
    if pred.ndim == 2:
        pred = pred.reshape((1,) + pred.shape)
    out = composite_batch(image[None], pred, [spec], cfg)
    return out.reshape(out.shape[1:])
