"""The DiS noise-prediction network.

Images are cut into ``p x p`` patches and embedded as tokens; the timestep and
(optional) class embeddings are prepended as extra tokens, learnable positions
are added to every token, and the sequence runs through ``L`` bidirectional
SSM blocks. The first ``L // 2`` blocks store their outputs, which are fused
back into the mirrored deep blocks through long skips. After the last block
the condition tokens are dropped and each patch token is linearly decoded into
a noise prediction and a variance interpolation value.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .nn import DepthwiseConv1d, LayerNorm, Linear, Module, param, trunc_normal
from .ssm import SsmDirectionParams, bidirectional_ssm
from .tensor import Tensor

COND_MODES = ("token", "adaln")
SKIP_MODES = ("concat", "add", "none")
COMBINE_MODES = ("mean", "sum")


class ConfigError(ValueError):
    """Invalid model, training or run configuration."""


@dataclass(frozen=True)
class ModelConfig:
    L: int = 3
    D: int = 64
    E: int = 2
    N: int = 16
    p: int = 2
    H: int = 8
    W: int = 8
    C: int = 1
    num_classes: int = 0
    cond_mode: str = "token"
    skip_mode: str = "concat"
    learn_sigma: bool = True
    combine: str = "mean"
    pos_embed_cond: bool = True
    freq_dim: int = 256
    conv_kernel: int = 4
    num_timesteps: int = 1000

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.p not in (1, 2, 4, 8, 16):
            raise ConfigError(f"patch size p={self.p} not supported")
        if self.H % self.p or self.W % self.p:
            raise ConfigError(f"image {self.H}x{self.W} is not divisible by patch size {self.p}")
        if self.L < 1 or self.L % 2 == 0:
            raise ConfigError(f"block count L={self.L} must be odd (shallow + middle + deep)")
        for name in ("D", "E", "N", "C", "freq_dim", "conv_kernel", "num_timesteps"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.freq_dim % 2:
            raise ConfigError("freq_dim must be even")
        if self.num_classes < 0:
            raise ConfigError("num_classes must be >= 0")
        if self.cond_mode not in COND_MODES:
            raise ConfigError(f"cond_mode must be one of {COND_MODES}")
        if self.skip_mode not in SKIP_MODES:
            raise ConfigError(f"skip_mode must be one of {SKIP_MODES}")
        if self.combine not in COMBINE_MODES:
            raise ConfigError(f"combine must be one of {COMBINE_MODES}")

    @property
    def num_tokens(self) -> int:
        return (self.H // self.p) * (self.W // self.p)

    @property
    def n_cond(self) -> int:
        if self.cond_mode != "token":
            return 0
        return 2 if self.num_classes > 0 else 1

    @property
    def d_inner(self) -> int:
        return self.E * self.D

    @property
    def dt_rank(self) -> int:
        return math.ceil(self.D / 16)

    @property
    def patch_dim(self) -> int:
        return self.p * self.p * self.C

    @property
    def out_channels(self) -> int:
        return 2 * self.C if self.learn_sigma else self.C

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


class TableRow(NamedTuple):
    params_m: float
    gflops: float


# Scaling configurations with the reported parameter counts (millions) and Gflops.
PAPER_TABLE = {
    "S": (dict(L=25, D=384), TableRow(28.4, 0.43)),
    "B": (dict(L=25, D=768), TableRow(119.1, 1.86)),
    "M": (dict(L=49, D=768), TableRow(229.4, 3.70)),
    "L": (dict(L=49, D=1024), TableRow(404.0, 6.57)),
    "H": (dict(L=49, D=1536), TableRow(900.6, 14.79)),
}

# Desk-scale tiers used by the toy experiments and the scale ablation.
TOY_TIERS = {
    "XS": dict(L=3, D=64),
    "S-like": dict(L=5, D=96),
    "B-like": dict(L=5, D=128),
}


def table_config(name: str, **overrides) -> ModelConfig:
    """A scaling-table configuration at the 32x32x3, p=4, unconditional measuring point."""
    if name not in PAPER_TABLE:
        raise ConfigError(f"unknown table config {name!r}; expected one of {sorted(PAPER_TABLE)}")
    base = dict(E=2, N=16, p=4, H=32, W=32, C=3, num_classes=0)
    base.update(PAPER_TABLE[name][0])
    base.update(overrides)
    return ModelConfig(**base)


def match_table_row(config: ModelConfig) -> str | None:
    """Name of the scaling-table row whose L/D/E/N equal ``config``'s, if any."""
    for name, (dims, _) in PAPER_TABLE.items():
        if config.L == dims["L"] and config.D == dims["D"] and config.E == 2 and config.N == 16:
            return name
    return None


# ---------------------------------------------------------------------------
# patch layout


def _as_tensor(x) -> tuple[Tensor, bool]:
    return (x, False) if isinstance(x, Tensor) else (T.tensor(np.asarray(x)), True)


def patchify(img, p: int):
    """``[..., H, W, C] -> [..., J, p*p*C]``; patches row-major, channel fastest within a patch."""
    x, raw = _as_tensor(img)
    *lead, h, w, c = x.shape
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} is not divisible by patch size {p}")
    lead = tuple(lead)
    k = len(lead)
    y = x.reshape(lead + (h // p, p, w // p, p, c))
    y = T.transpose(y, tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4))
    y = y.reshape(lead + ((h // p) * (w // p), p * p * c))
    return y.data if raw else y


def unpatchify(tokens, p: int, H: int, W: int):
    """Inverse of :func:`patchify`: ``[..., J, p*p*C] -> [..., H, W, C]``."""
    x, raw = _as_tensor(tokens)
    *lead, j, width = x.shape
    if j * p * p != H * W or H % p or W % p or width % (p * p):
        raise T.DimensionError(f"{j} tokens of width {width} do not tile a {H}x{W} image with p={p}")
    c = width // (p * p)
    lead = tuple(lead)
    k = len(lead)
    y = x.reshape(lead + (H // p, W // p, p, p, c))
    y = T.transpose(y, tuple(range(k)) + (k, k + 2, k + 1, k + 3, k + 4))
    y = y.reshape(lead + (H, W, c))
    return y.data if raw else y


# ---------------------------------------------------------------------------
# embeddings


def sinusoidal_features(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """``[sin(t*f_0..f_{d/2-1}), cos(...)]`` with geometric frequencies starting at 1."""
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def timestep_embedding(t: int, dim: int, num_timesteps: int = 1000) -> Tensor:
    """Sinusoidal features of one integer timestep (before the learned projection)."""
    if not 0 <= int(t) < num_timesteps:
        raise ValueError(f"timestep {t} outside [0, {num_timesteps})")
    return T.tensor(sinusoidal_features(int(t), dim))


class TimestepEmbedder(Module):
    def __init__(self, d: int, freq_dim: int, num_timesteps: int, rng: np.random.Generator):
        self.freq_dim = freq_dim
        self.num_timesteps = num_timesteps
        self.fc1 = Linear(freq_dim, d, rng)
        self.fc2 = Linear(d, d, rng)

    def forward(self, t) -> Tensor:
        t = np.atleast_1d(np.asarray(t))
        if t.min() < 0 or t.max() >= self.num_timesteps:
            raise ValueError(f"timestep outside [0, {self.num_timesteps})")
        feats = T.tensor(sinusoidal_features(t, self.freq_dim).astype(T.default_dtype()))
        return self.fc2(T.silu(self.fc1(feats)))


@dataclass
class TokenSequence:
    tokens: Tensor
    n_cond: int
    num_patches: int = field(init=False)

    def __post_init__(self) -> None:
        self.num_patches = self.tokens.shape[-2] - self.n_cond

    def patches(self) -> Tensor:
        """The image tokens, with condition tokens removed."""
        return self.tokens[..., self.n_cond:, :]


def build_sequence(x_tokens: Tensor, t_emb: Tensor, c_emb: Tensor | None, pos: Tensor | None,
                   num_classes: int) -> TokenSequence:
    """Prefix ``[t; c]`` condition tokens to the patch tokens and add positions to all of them.

    ``x_tokens: [B, J, D]``, ``t_emb / c_emb: [B, D]``, ``pos: [n_cond + J, D]``
    (or ``[J, D]`` when condition tokens get no positions).
    """
    if c_emb is not None and num_classes == 0:
        raise ConfigError("class embedding given to an unconditional model")
    conds = [t_emb] + ([c_emb] if c_emb is not None else [])
    n_cond = len(conds)
    b, _, d = x_tokens.shape
    parts = [c.reshape(b, 1, d) for c in conds] + [x_tokens]
    seq = T.concat(parts, axis=1)
    if pos is not None:
        if pos.shape[0] == seq.shape[1]:
            seq = seq + pos
        elif pos.shape[0] == x_tokens.shape[1]:
            seq = T.concat([seq[:, :n_cond], seq[:, n_cond:] + pos], axis=1)
        else:
            raise T.DimensionError(f"positional table {pos.shape} does not fit sequence {seq.shape}")
    return TokenSequence(seq, n_cond)


def adaln(h: Tensor, emb: Tensor, proj: Linear, eps: float = 1e-6) -> Tensor:
    """``scale * LayerNorm(h) + shift`` with ``(scale, shift)`` regressed linearly from ``emb``.

    ``h: [B, M, D]``, ``emb: [B, D]``.
    """
    d = h.shape[-1]
    mod = proj(emb)
    mod = mod.reshape(mod.shape[:-1] + (1, 2 * d)) if h.ndim == emb.ndim + 1 else mod
    scale, shift = mod[..., :d], mod[..., d:]
    return T.layer_norm(h, None, None, eps) * scale + shift


class AdaLN(Module):
    def __init__(self, d: int, rng: np.random.Generator):
        self.proj = Linear(d, 2 * d, rng)
        # identity at init: scale 1, shift 0
        self.proj.weight = param(np.zeros((d, 2 * d)))
        self.proj.bias = param(np.concatenate([np.ones(d), np.zeros(d)]))

    def forward(self, h: Tensor, emb: Tensor) -> Tensor:
        return adaln(h, emb, self.proj)


def skip_fuse(h_shallow: Tensor, h_deep: Tensor, mode: str, proj: Linear | None = None) -> Tensor:
    """Merge a stored shallow activation into the deep stream."""
    if h_shallow.shape != h_deep.shape:
        raise T.DimensionError(f"skip shapes differ: {h_shallow.shape} vs {h_deep.shape}")
    if mode == "none":
        return h_deep
    if mode == "add":
        return h_shallow + h_deep
    if mode == "concat":
        if proj is None:
            raise ConfigError("concat skip needs a projection")
        return proj(T.concat([h_shallow, h_deep], axis=-1))
    raise ConfigError(f"unknown skip mode {mode!r}")


class SkipProjection(Linear):
    """``Linear(2D -> D)`` initialised to ``[0 | I]`` so it passes the deep input through."""

    def __init__(self, d: int, rng: np.random.Generator):
        super().__init__(2 * d, d, rng)
        self.weight = param(np.concatenate([np.zeros((d, d)), np.eye(d)], axis=0))


# ---------------------------------------------------------------------------
# blocks


class DiSBlock(Module):
    """Pre-norm residual Mamba-style block with a bidirectional selective scan."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, din = cfg.D, cfg.d_inner
        self.combine = cfg.combine
        self.norm = AdaLN(d, rng) if cfg.cond_mode == "adaln" else LayerNorm(d)
        self.lin_in = Linear(d, din, rng, bias=False)
        self.lin_g = Linear(d, din, rng, bias=False)
        self.conv = DepthwiseConv1d(din, cfg.conv_kernel, rng)
        self.ssm_fwd = SsmDirectionParams(din, cfg.N, rng, dt_rank=cfg.dt_rank)
        self.ssm_bwd = SsmDirectionParams(din, cfg.N, rng, dt_rank=cfg.dt_rank)
        self.out_proj = Linear(din, d, rng, bias=False)

    def forward(self, x: Tensor, emb: Tensor | None = None) -> Tensor:
        h = self.norm(x, emb) if isinstance(self.norm, AdaLN) else self.norm(x)
        u = T.silu(self.conv(self.lin_in(h)))
        gate = T.silu(self.lin_g(h))
        y = bidirectional_ssm(u, self.ssm_fwd, self.ssm_bwd, self.combine)
        return x + self.out_proj(y * gate)


class DiS(Module):
    """Noise prediction network ``eps_theta(x_t, t, c)``."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | int = 0):
        cfg.validate()
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        self.cfg = cfg
        d = cfg.D
        self.patch_embed = Linear(cfg.patch_dim, d, rng)
        self.t_embed = TimestepEmbedder(d, cfg.freq_dim, cfg.num_timesteps, rng)
        # last row is the "null" class used for classifier-free guidance
        self.class_embed = param(trunc_normal(rng, (cfg.num_classes + 1, d))) if cfg.num_classes else None
        n_pos = cfg.num_tokens + (cfg.n_cond if cfg.pos_embed_cond else 0)
        self.pos_embed = param(trunc_normal(rng, (n_pos, d)))
        self.blocks = [DiSBlock(cfg, rng) for _ in range(cfg.L)]
        m = cfg.L // 2
        self.skips = [SkipProjection(d, rng) for _ in range(m)] if cfg.skip_mode == "concat" else []
        self.final_norm = AdaLN(d, rng) if cfg.cond_mode == "adaln" else LayerNorm(d)
        self.decoder = Linear(d, cfg.p * cfg.p * cfg.out_channels, rng)

    # -- structure
    @property
    def groups(self) -> tuple[list[DiSBlock], DiSBlock, list[DiSBlock]]:
        m = self.cfg.L // 2
        return self.blocks[:m], self.blocks[m], self.blocks[m + 1:]

    @property
    def null_class(self) -> int:
        return self.cfg.num_classes

    def _class_ids(self, c, batch: int, cfg_dropout) -> np.ndarray | None:
        cfg = self.cfg
        if cfg.num_classes == 0:
            if c is not None:
                raise ConfigError("class label given to an unconditional model (num_classes=0)")
            return None
        if c is None:
            ids = np.full(batch, self.null_class, dtype=np.int64)
        else:
            ids = np.broadcast_to(np.asarray(c, dtype=np.int64), (batch,)).copy()
            if ids.min() < 0 or ids.max() >= cfg.num_classes:
                raise ConfigError(f"class id out of range for num_classes={cfg.num_classes}")
        drop = np.broadcast_to(np.asarray(cfg_dropout, dtype=bool), (batch,))
        ids[drop] = self.null_class
        return ids

    def forward(self, x_t, t, c=None, cfg_dropout=False):
        """Returns ``(eps, v)`` shaped like ``x_t``; ``v`` is None without a learned variance.

        ``x_t`` is ``[H, W, C]`` or ``[B, H, W, C]``; ``t`` and ``c`` are ints or
        per-sample integer arrays. ``cfg_dropout`` (bool or bool array) swaps
        the class for the null class.
        """
        cfg = self.cfg
        x, _ = _as_tensor(x_t)
        single = x.ndim == 3
        if single:
            x = x.reshape((1,) + x.shape)
        if x.shape[1:] != (cfg.H, cfg.W, cfg.C):
            raise T.DimensionError(f"input {x.shape[1:]} does not match configured {(cfg.H, cfg.W, cfg.C)}")
        b = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (b,))
        ids = self._class_ids(c, b, cfg_dropout)

        tok = self.patch_embed(patchify(x, cfg.p))
        t_emb = self.t_embed(t)
        c_emb = T.take_rows(self.class_embed, ids) if ids is not None else None

        emb = None
        if cfg.cond_mode == "token":
            seq = build_sequence(tok, t_emb, c_emb, self.pos_embed, cfg.num_classes)
            h, n_cond = seq.tokens, seq.n_cond
        else:
            emb = t_emb if c_emb is None else t_emb + c_emb
            h, n_cond = tok + self.pos_embed, 0

        shallow, middle, deep = self.groups
        stored = []
        for blk in shallow:
            h = blk(h, emb)
            stored.append(h)
        h = middle(h, emb)
        for i, blk in enumerate(deep):
            proj = self.skips[i] if self.skips else None
            h = skip_fuse(stored.pop(), h, cfg.skip_mode, proj)
            h = blk(h, emb)

        h = h[:, n_cond:]
        h = self.final_norm(h, emb) if isinstance(self.final_norm, AdaLN) else self.final_norm(h)
        out = self.decoder(h)
        k = cfg.p * cfg.p * cfg.C
        eps = unpatchify(out[..., :k], cfg.p, cfg.H, cfg.W)
        v = unpatchify(out[..., k:], cfg.p, cfg.H, cfg.W) if cfg.learn_sigma else None
        if single:
            eps = eps.reshape(eps.shape[1:])
            v = v.reshape(v.shape[1:]) if v is not None else None
        return eps, v


# ---------------------------------------------------------------------------
# parameter accounting


def parameter_inventory(cfg: ModelConfig) -> dict[str, int]:
    """Scalar parameter count per component, mirroring :class:`DiS` exactly."""
    d, din, n, r = cfg.D, cfg.d_inner, cfg.N, cfg.dt_rank
    norm = 2 * d * d + 2 * d if cfg.cond_mode == "adaln" else 2 * d
    direction = din * r + r * din + din + 2 * din * n + din * n + din
    n_pos = cfg.num_tokens + (cfg.n_cond if cfg.pos_embed_cond else 0)
    inv = {
        "patch_embed": cfg.patch_dim * d + d,
        "pos_embed": n_pos * d,
        "t_embed": cfg.freq_dim * d + d + d * d + d,
        "class_embed": (cfg.num_classes + 1) * d if cfg.num_classes else 0,
        "blocks.norm": cfg.L * norm,
        "blocks.in_gate_out_proj": cfg.L * 3 * d * din,
        "blocks.conv": cfg.L * (din * cfg.conv_kernel + din),
        "blocks.ssm": cfg.L * 2 * direction,
        "skips": (cfg.L // 2) * (2 * d * d + d) if cfg.skip_mode == "concat" else 0,
        "final_norm": norm,
        "decoder": d * cfg.p * cfg.p * cfg.out_channels + cfg.p * cfg.p * cfg.out_channels,
    }
    return inv


def param_count(cfg: ModelConfig) -> int:
    return sum(parameter_inventory(cfg).values())


def inventory_of(model: DiS) -> dict[str, int]:
    """Same grouping as :func:`parameter_inventory`, measured from a built model."""
    groups = {k: 0 for k in parameter_inventory(model.cfg)}
    for name, p in model.named_parameters():
        head = name.split(".")[0]
        if head == "blocks":
            part = name.split(".")[2]
            key = {"norm": "blocks.norm", "conv": "blocks.conv", "ssm_fwd": "blocks.ssm",
                   "ssm_bwd": "blocks.ssm"}.get(part, "blocks.in_gate_out_proj")
        else:
            key = head
        groups[key] += p.size
    return groups
