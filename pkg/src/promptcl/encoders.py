"""Deterministic frozen stand-ins for the text encoder, vision encoder, and
the main transformer, including the per-layer residual injection hook.

All weights are pure functions of (config, seed) and are never updated by any
optimizer; gradients only ever flow into prompt tokens, residuals, or prefix
tokens passed in from outside.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .rng import Rng, stable_name_seed

CLIP_DEPTH = 2  # blocks in the mini text/vision encoders


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 32            # CLIP-space embedding dim
    d_prime: int = 64      # main-transformer hidden dim
    L: int = 4             # main-transformer blocks
    heads: int = 4
    seq_len: int = 17      # tokens per input, CLS included
    tau: float = 0.01      # softmax temperature for prototype logits
    patch_dim: int = 16    # raw dimension of one input patch row

    def __post_init__(self):
        if min(self.d, self.d_prime, self.L, self.heads, self.seq_len, self.patch_dim) < 1:
            raise ConfigError("all structural dims must be >= 1")
        if self.d_prime % self.heads:
            raise ConfigError(f"d_prime={self.d_prime} not divisible by heads={self.heads}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.seq_len < 2:
            raise ConfigError("seq_len must include CLS plus at least one patch")

    @property
    def patches(self) -> int:
        return self.seq_len - 1

    @property
    def raw_dim(self) -> int:
        """Flattened raw-input dimensionality of one sample."""
        return self.patches * self.patch_dim

    @property
    def clip_heads(self) -> int:
        for h in (self.heads, 4, 2, 1):
            if self.d % h == 0:
                return h
        return 1


@dataclass
class ClassNameEmbedding:
    name: str
    vector: np.ndarray  # unit d-vector


def class_name_embed(name: str, config: EncoderConfig) -> ClassNameEmbedding:
    """Seeded-hash surrogate for a tokenizer: stable across runs and platforms."""
    if not name:
        raise ValueError("class name must be nonempty")
    v = Rng(stable_name_seed("clname:" + name)).normal((config.d,))
    v /= np.linalg.norm(v)
    return ClassNameEmbedding(name=name, vector=v.astype(np.float32))


def _init_block(rng: Rng, dim: int) -> dict:
    s = 1.0 / np.sqrt(dim)
    hidden = 4 * dim
    return {
        "wq": rng.normal((dim, dim), std=s), "bq": np.zeros(dim, np.float32),
        "wk": rng.normal((dim, dim), std=s), "bk": np.zeros(dim, np.float32),
        "wv": rng.normal((dim, dim), std=s), "bv": np.zeros(dim, np.float32),
        "wo": rng.normal((dim, dim), std=s), "bo": np.zeros(dim, np.float32),
        "w1": rng.normal((dim, hidden), std=s), "b1": np.zeros(hidden, np.float32),
        "w2": rng.normal((hidden, dim), std=1.0 / np.sqrt(hidden)),
        "b2": np.zeros(dim, np.float32),
    }


def _orthogonal(rng: Rng, dim: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal((dim, dim), dtype=np.float64))
    q *= np.sign(np.diag(r))
    return q.astype(np.float32)


@dataclass
class FrozenStack:
    config: EncoderConfig
    seed: int
    text_blocks: list = field(repr=False, default_factory=list)
    text_pos: np.ndarray = None
    text_out: np.ndarray = None
    vis_blocks: list = field(repr=False, default_factory=list)
    vis_patch: np.ndarray = None
    vis_pos: np.ndarray = None
    vis_cls: np.ndarray = None
    vis_out: np.ndarray = None
    main_blocks: list = field(repr=False, default_factory=list)
    main_patch: np.ndarray = None
    main_pos: np.ndarray = None
    main_cls: np.ndarray = None
    lift: np.ndarray = None  # d -> raw_dim, for ingesting precomputed features

    def all_arrays(self):
        for group in (self.text_blocks, self.vis_blocks, self.main_blocks):
            for blk in group:
                for k in sorted(blk):
                    yield blk[k]
        for arr in (self.text_pos, self.text_out, self.vis_patch, self.vis_pos,
                    self.vis_cls, self.vis_out, self.main_patch, self.main_pos,
                    self.main_cls, self.lift):
            yield arr


def stack_hash(stack: FrozenStack) -> str:
    h = hashlib.sha256()
    for arr in stack.all_arrays():
        h.update(arr.tobytes())
    return h.hexdigest()


def build_stack(config: EncoderConfig, seed: int) -> FrozenStack:
    root = Rng(seed)
    d, dp = config.d, config.d_prime
    tr = root.child("text")
    vr = root.child("vision")
    mr = root.child("main")
    return FrozenStack(
        config=config,
        seed=seed,
        text_blocks=[_init_block(tr.child(f"block{i}"), d) for i in range(CLIP_DEPTH)],
        text_pos=tr.child("pos").normal((2, d), std=0.02),
        text_out=_orthogonal(tr.child("out"), d),
        vis_blocks=[_init_block(vr.child(f"block{i}"), d) for i in range(CLIP_DEPTH)],
        vis_patch=vr.child("patch").normal((config.patch_dim, d), std=1.0 / np.sqrt(config.patch_dim)),
        vis_pos=vr.child("pos").normal((config.patches + 1, d), std=0.02),
        vis_cls=vr.child("cls").normal((d,), std=0.02),
        vis_out=_orthogonal(vr.child("out"), d),
        main_blocks=[_init_block(mr.child(f"block{i}"), dp) for i in range(config.L)],
        main_patch=mr.child("patch").normal((config.patch_dim, dp), std=1.0 / np.sqrt(config.patch_dim)),
        main_pos=mr.child("pos").normal((config.seq_len, dp), std=0.02),
        main_cls=mr.child("cls").normal((dp,), std=0.02),
        lift=root.child("lift").normal((d, config.patches * config.patch_dim),
                                       std=1.0 / np.sqrt(d)),
    )


def _attention(blk, h, heads, residual=None, prefix_kv=None):
    """One pre-norm transformer block; ``residual`` is added to the
    post-attention activation (before the MLP branch)."""
    c = ad.constant
    x = ad.layer_norm(h)
    q = ad.add(ad.matmul(x, c(blk["wq"])), c(blk["bq"]))
    k = ad.add(ad.matmul(x, c(blk["wk"])), c(blk["bk"]))
    v = ad.add(ad.matmul(x, c(blk["wv"])), c(blk["bv"]))
    if prefix_kv is not None:
        pk, pv = prefix_kv  # each (..., n_tok, dim), same leading dims as k/v
        k = ad.concat([pk, k], axis=-2)
        v = ad.concat([pv, v], axis=-2)
    dim = q.shape[-1]
    dh = dim // heads
    ctx_heads = []
    for i in range(heads):
        qh = ad.slice_axis(q, -1, i * dh, (i + 1) * dh)
        kh = ad.slice_axis(k, -1, i * dh, (i + 1) * dh)
        vh = ad.slice_axis(v, -1, i * dh, (i + 1) * dh)
        scores = ad.scale(ad.matmul(qh, ad.transpose_last2(kh)), 1.0 / np.sqrt(dh))
        ctx_heads.append(ad.matmul(ad.softmax(scores), vh))
    ctx = ad.concat(ctx_heads, axis=-1)
    msa = ad.add(ad.matmul(ctx, c(blk["wo"])), c(blk["bo"]))
    e = ad.add(h, msa)
    if residual is not None:
        e = ad.add(e, residual)
    y = ad.layer_norm(e)
    mlp = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(y, c(blk["w1"])), c(blk["b1"]))),
                           c(blk["w2"])), c(blk["b2"]))
    return ad.add(e, mlp)


def text_encode(stack: FrozenStack, prompt_token, class_embed: ClassNameEmbedding):
    """Encode the 2-token sequence [prompt; class-name] to a unit key vector.

    Differentiable w.r.t. ``prompt_token`` when it is a Tensor requiring grad.
    """
    d = stack.config.d
    p = prompt_token if isinstance(prompt_token, ad.Tensor) else ad.constant(prompt_token)
    if p.shape != (d,):
        raise ad.ShapeError(f"text_encode: prompt token shape {p.shape}, expected ({d},)")
    if class_embed.vector.shape != (d,):
        raise ad.ShapeError(f"text_encode: class embedding shape {class_embed.vector.shape}")
    tokens = ad.add(ad.stack([p, ad.constant(class_embed.vector)], axis=0),
                    ad.constant(stack.text_pos))
    h = tokens
    for blk in stack.text_blocks:
        h = _attention(blk, h, stack.config.clip_heads)
    pooled = ad.mean(h, axis=0)
    out = ad.matmul(pooled, ad.constant(stack.text_out))
    return ad.l2_normalize(out)


def _check_grid(x, patches, patch_dim, who):
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 2:
        x = x[None]
        squeeze = True
    elif x.ndim == 3:
        squeeze = False
    else:
        raise ad.ShapeError(f"{who}: rank {x.ndim} input")
    if x.shape[-2:] != (patches, patch_dim):
        raise ad.ShapeError(f"{who}: token grid {x.shape[-2:]}, expected {(patches, patch_dim)}")
    return x, squeeze


def vision_encode(stack: FrozenStack, x) -> np.ndarray:
    """Map raw token grids to l2-normalized d-vectors. Never differentiable."""
    cfg = stack.config
    x, squeeze = _check_grid(x, cfg.patches, cfg.patch_dim, "vision_encode")
    b = x.shape[0]
    emb = np.matmul(x, stack.vis_patch)
    cls = np.broadcast_to(stack.vis_cls, (b, 1, cfg.d))
    tokens = np.concatenate([cls, emb], axis=1) + stack.vis_pos
    h = ad.constant(tokens)
    for blk in stack.vis_blocks:
        h = _attention(blk, h, cfg.clip_heads)
    cls_out = h.data[:, 0, :] @ stack.vis_out
    z = ad.l2_normalize(ad.constant(cls_out)).data
    return z[0] if squeeze else z


def embed_tokens(stack: FrozenStack, x) -> np.ndarray:
    """Patch-embed raw inputs for the main transformer: (b, seq_len, d')."""
    cfg = stack.config
    x, squeeze = _check_grid(x, cfg.patches, cfg.patch_dim, "embed_tokens")
    b = x.shape[0]
    emb = np.matmul(x, stack.main_patch)
    cls = np.broadcast_to(stack.main_cls, (b, 1, cfg.d_prime))
    tokens = np.concatenate([cls, emb], axis=1) + stack.main_pos
    return tokens[0] if squeeze else tokens


def lift_features(stack: FrozenStack, z) -> np.ndarray:
    """Deterministically lift d-dim feature rows to raw token grids."""
    cfg = stack.config
    z = np.asarray(z, dtype=np.float32)
    flat = z @ stack.lift
    return flat.reshape(z.shape[:-1] + (cfg.patches, cfg.patch_dim))


def vit_forward(stack: FrozenStack, x=None, residuals=None, tokens=None,
                prefix=None, cls_only_residual=False):
    """Run the main transformer and return the CLS output of the last block.

    ``residuals``: Tensor (L, d') for one sample or (b, L, d') for a batch;
    row l is added (broadcast across token positions) to the post-attention
    activation of block l. ``prefix``: Tensor (..., L, 2*n_tok, d') of per-layer
    key/value prompt tokens, used instead of residuals. Differentiable only
    w.r.t. ``residuals`` / ``prefix``.
    """
    cfg = stack.config
    if tokens is None:
        tokens = embed_tokens(stack, x)
    tokens = np.asarray(tokens, dtype=ad.default_dtype())
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tokens[None]
    if tokens.shape[-2:] != (cfg.seq_len, cfg.d_prime):
        raise ad.ShapeError(f"vit_forward: tokens shape {tokens.shape}")
    b = tokens.shape[0]

    if residuals is not None and prefix is not None:
        raise ValueError("vit_forward: residuals and prefix are mutually exclusive")
    if residuals is not None:
        if not isinstance(residuals, ad.Tensor):
            residuals = ad.constant(residuals)
        if residuals.ndim == 2:
            residuals = ad.reshape(residuals, (1,) + residuals.shape)
        if residuals.shape[-2:] != (cfg.L, cfg.d_prime):
            raise ad.ShapeError(
                f"vit_forward: residual shape {residuals.shape}, expected (.., {cfg.L}, {cfg.d_prime})")
    if prefix is not None:
        if not isinstance(prefix, ad.Tensor):
            prefix = ad.constant(prefix)
        if prefix.ndim == 3:
            prefix = ad.reshape(prefix, (1,) + prefix.shape)

    h = ad.constant(tokens)
    for l, blk in enumerate(stack.main_blocks):
        res_l = None
        pre_l = None
        if residuals is not None:
            r = ad.slice_axis(residuals, 1, l, l + 1)  # (b, 1, d') broadcasts over tokens
            if cls_only_residual:
                pad = ad.constant(np.zeros((b, cfg.seq_len - 1, cfg.d_prime),
                                           dtype=ad.default_dtype()))
                r = ad.concat([r, pad], axis=1)
            res_l = r
        if prefix is not None:
            layer = ad.slice_axis(prefix, 1, l, l + 1)
            n2 = layer.shape[2]
            layer = ad.reshape(layer, (layer.shape[0], n2, cfg.d_prime))
            pk = ad.slice_axis(layer, 1, 0, n2 // 2)
            pv = ad.slice_axis(layer, 1, n2 // 2, n2)
            pre_l = (pk, pv)
        h = _attention(blk, h, cfg.heads, residual=res_l, prefix_kv=pre_l)
    cls_out = ad.slice_axis(h, 1, 0, 1)
    cls_out = ad.reshape(cls_out, (b, cfg.d_prime))
    if squeeze:
        cls_out = ad.reshape(cls_out, (cfg.d_prime,))
    return cls_out
