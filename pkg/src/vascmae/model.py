"""Tokenizer, factorized-attention encoder, MAE decoder, and detection head.

The encoder is a 3D ViT whose self-attention is computed in two restricted
steps per layer: full attention among tokens sharing a z slice, then full
attention among tokens sharing an in-plane (y, x) column. A learnable CLS
token joins every group as an extra key/value and attends to all tokens as
a query in both steps, so no attention matrix ever exceeds
(tokens-per-slice + 1)^2 entries. Token order is canonicalized internally,
making outputs invariant to the order of the input token list.
"""

from __future__ import annotations

import json
import math
import struct
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

TOKEN_PATCH = 4
IN_CHANNELS = 2


class ConfigurationError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Desk defaults; ``paper_scale`` gives the
    full-size configuration (depth 6, dim 384)."""

    depth: int = 2
    dim: int = 64
    heads_spatial: int = 8
    heads_axial: int = 8
    patch: int = TOKEN_PATCH
    grid: int = 16
    n_queries: int = 8
    decoder_depth: int | None = None
    decoder_dim: int | None = None
    channels: int = IN_CHANNELS
    mlp_ratio: float = 4.0

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        return cls(depth=6, dim=384)

    @property
    def resolved_decoder_depth(self) -> int:
        return self.depth if self.decoder_depth is None else self.decoder_depth

    @property
    def resolved_decoder_dim(self) -> int:
        return self.dim if self.decoder_dim is None else self.decoder_dim

    @property
    def token_input_dim(self) -> int:
        return self.channels * self.patch**3

    def validate(self) -> None:
        for dim, label in ((self.dim, "dim"), (self.resolved_decoder_dim, "decoder_dim")):
            if dim % self.heads_spatial or dim % self.heads_axial:
                raise ConfigurationError(
                    f"{label}={dim} not divisible by head counts "
                    f"({self.heads_spatial}, {self.heads_axial})"
                )
            _axis_splits(dim)  # raises if no even three-way split exists
        if self.grid < 1 or self.patch < 1:
            raise ConfigurationError("grid and patch must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_depth"] = self.resolved_decoder_depth
        d["decoder_dim"] = self.resolved_decoder_dim
        return d


# ---------------------------------------------------------------------------
# Attention instrumentation: observers record the largest logical attention
# matrix materialised by any step, to assert the per-slice memory bound.
# ---------------------------------------------------------------------------


@dataclass
class AttentionStats:
    max_elements: int = 0
    max_shape: tuple[int, int] = (0, 0)
    n_matrices: int = 0
    shapes: list = field(default_factory=list)

    def observe(self, q_len: int, k_len: int) -> None:
        self.n_matrices += 1
        self.shapes.append((q_len, k_len))
        if q_len * k_len > self.max_elements:
            self.max_elements = q_len * k_len
            self.max_shape = (q_len, k_len)


_OBSERVERS: list[AttentionStats] = []


@contextmanager
def attention_instrumentation():
    stats = AttentionStats()
    _OBSERVERS.append(stats)
    try:
        yield stats
    finally:
        _OBSERVERS.remove(stats)


def _record_matrix(q_len: int, k_len: int) -> None:
    for stats in _OBSERVERS:
        stats.observe(q_len, k_len)


# ---------------------------------------------------------------------------
# 3D sinusoidal position encoding
# ---------------------------------------------------------------------------


def _axis_splits(dim: int) -> tuple[int, int, int]:
    """Split ``dim`` into three even per-axis groups, as equal as possible.

    Exactly equal when dim is divisible by 6 (the paper-scale case); odd or
    tiny dims are rejected.
    """
    if dim % 2 or dim < 6:
        raise ConfigurationError(
            f"model dim must be even and >= 6 for 3D sinusoidal encoding, got {dim}"
        )
    base = (dim // 6) * 2
    sizes = [base, base, base]
    leftover = dim - 3 * base
    for i in range(leftover // 2):
        sizes[i % 3] += 2
    return tuple(sizes)


def sincos_position_encoding(coords: torch.Tensor, dim: int) -> torch.Tensor:
    """Parameter-free sine/cosine encoding of integer (z, y, x) coords.

    The feature dimension is split into one group per axis; within a group,
    even slots carry sines and odd slots cosines of geometrically spaced
    frequencies. Position 0 therefore encodes to (0, 1, 0, 1, ...).
    """
    sizes = _axis_splits(dim)
    pos = coords.to(torch.float64)
    blocks = []
    for axis, m in enumerate(sizes):
        omega = 1.0 / (10000.0 ** (2.0 * np.arange(m // 2) / m))
        angles = pos[..., axis, None] * torch.from_numpy(omega)
        block = torch.empty(*angles.shape[:-1], m, dtype=torch.float64)
        block[..., 0::2] = torch.sin(angles)
        block[..., 1::2] = torch.cos(angles)
        blocks.append(block)
    return torch.cat(blocks, dim=-1)


# ---------------------------------------------------------------------------
# Patchify / token grid
# ---------------------------------------------------------------------------


def patchify(x: torch.Tensor, patch: int = TOKEN_PATCH) -> torch.Tensor:
    """(B, C, S, S, S) -> (B, P, C*patch^3) in z-major scan order.

    Each token vector is channel-major: all patch voxels of channel 0, then
    of channel 1.
    """
    b, c, sz, sy, sx = x.shape
    gz, gy, gx = sz // patch, sy // patch, sx // patch
    x = x.reshape(b, c, gz, patch, gy, patch, gx, patch)
    x = x.permute(0, 2, 4, 6, 1, 3, 5, 7)
    return x.reshape(b, gz * gy * gx, c * patch**3)


def unpatchify(tokens: torch.Tensor, grid: tuple[int, int, int], channels: int = IN_CHANNELS, patch: int = TOKEN_PATCH) -> torch.Tensor:
    """Inverse of :func:`patchify`."""
    b = tokens.shape[0]
    gz, gy, gx = grid
    x = tokens.reshape(b, gz, gy, gx, channels, patch, patch, patch)
    x = x.permute(0, 4, 1, 5, 2, 6, 3, 7)
    return x.reshape(b, channels, gz * patch, gy * patch, gx * patch)


def grid_coords(grid: tuple[int, int, int]) -> torch.Tensor:
    """All (z, y, x) patch coordinates in scan order, shape (P, 3)."""
    gz, gy, gx = grid
    zz, yy, xx = torch.meshgrid(
        torch.arange(gz), torch.arange(gy), torch.arange(gx), indexing="ij"
    )
    return torch.stack([zz, yy, xx], dim=-1).reshape(-1, 3)


def query_anchor_coords(n_queries: int, grid: int) -> torch.Tensor:
    """Lattice of query anchor positions spread over the token grid.

    The smallest cubic lattice with at least n_queries sites, at cell
    centres; e.g. 8 queries on grid 16 sit at (4, 4, 4) .. (12, 12, 12).
    """
    per_axis = 1
    while per_axis**3 < n_queries:
        per_axis += 1
    step = grid / per_axis
    axis = torch.arange(per_axis, dtype=torch.float64) * step + step / 2
    zz, yy, xx = torch.meshgrid(axis, axis, axis, indexing="ij")
    lattice = torch.stack([zz, yy, xx], dim=-1).reshape(-1, 3)
    return lattice[:n_queries]


def flat_index(coords: torch.Tensor, grid: tuple[int, int, int]) -> torch.Tensor:
    gz, gy, gx = grid
    return (coords[..., 0] * gy + coords[..., 1]) * gx + coords[..., 2]


def slice_group_ids(coords: torch.Tensor, grid: tuple[int, int, int]) -> tuple[torch.Tensor, int]:
    """Group id per token for the in-slice attention step."""
    return coords[..., 0], grid[0]


def column_group_ids(coords: torch.Tensor, grid: tuple[int, int, int]) -> tuple[torch.Tensor, int]:
    """Group id per token for the across-slice (axial column) step."""
    return coords[..., 1] * grid[2] + coords[..., 2], grid[1] * grid[2]


@dataclass
class TokenGrid:
    """A batch of tokens with their patch coordinates and the CLS token."""

    features: torch.Tensor  # (B, N, D)
    coords: torch.Tensor  # (B, N, 3) long
    cls: torch.Tensor  # (B, D)
    grid: tuple[int, int, int]


# ---------------------------------------------------------------------------
# Grouped attention and transformer blocks
# ---------------------------------------------------------------------------


class GroupedAttention(nn.Module):
    """Multi-head attention restricted to token groups, with a global CLS.

    Group members attend to their group plus CLS; CLS attends to every
    token plus itself. Groups may be ragged (masked-out tokens simply leave
    a group smaller); raggedness is handled by padding per group.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def _split_heads(self, t: torch.Tensor) -> torch.Tensor:
        # (..., L, D) -> (..., H, L, dh)
        *lead, L, D = t.shape
        return t.reshape(*lead, L, self.heads, D // self.heads).transpose(-3, -2)

    def forward(
        self,
        tokens: torch.Tensor,
        cls: torch.Tensor,
        group_ids: torch.Tensor,
        n_groups: int,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, d = tokens.shape
        q, k, v = self.qkv(tokens).chunk(3, dim=-1)
        qc, kc, vc = self.qkv(cls).chunk(3, dim=-1)

        sizes = torch.zeros(b, n_groups, dtype=torch.long).scatter_add_(
            1, group_ids, torch.ones_like(group_ids)
        )
        l_max = int(sizes.max())
        order = torch.argsort(group_ids, dim=1, stable=True)
        gid_sorted = torch.gather(group_ids, 1, order)
        offsets = torch.cumsum(sizes, dim=1) - sizes
        pos = torch.arange(n)[None, :] - torch.gather(offsets, 1, gid_sorted)
        b_idx = torch.arange(b)[:, None].expand(b, n)
        gather_idx = order.unsqueeze(-1).expand(b, n, d)

        def pad(t: torch.Tensor) -> torch.Tensor:
            out = t.new_zeros(b, n_groups, l_max, d)
            out[b_idx, gid_sorted, pos] = torch.gather(t, 1, gather_idx)
            return out

        pk = torch.cat([pad(k), kc[:, None, None, :].expand(b, n_groups, 1, d)], dim=2)
        pv = torch.cat([pad(v), vc[:, None, None, :].expand(b, n_groups, 1, d)], dim=2)
        valid = torch.arange(l_max)[None, None, :] < sizes[:, :, None]
        valid = torch.cat(
            [valid, torch.ones(b, n_groups, 1, dtype=torch.bool)], dim=2
        )

        qh = self._split_heads(pad(q).reshape(b * n_groups, l_max, d))
        kh = self._split_heads(pk.reshape(b * n_groups, l_max + 1, d))
        vh = self._split_heads(pv.reshape(b * n_groups, l_max + 1, d))
        mask = valid.reshape(b * n_groups, 1, 1, l_max + 1)
        _record_matrix(l_max, l_max + 1)
        att = F.scaled_dot_product_attention(qh, kh, vh, attn_mask=mask)
        att = att.transpose(-3, -2).reshape(b, n_groups, l_max, d)

        out_sorted = att[b_idx, gid_sorted, pos]
        tokens_out = torch.empty_like(out_sorted)
        tokens_out.scatter_(1, gather_idx, out_sorted)

        # CLS row: one query over all tokens plus itself.
        k_all = self._split_heads(torch.cat([k, kc[:, None, :]], dim=1))
        v_all = self._split_heads(torch.cat([v, vc[:, None, :]], dim=1))
        q_cls = self._split_heads(qc[:, None, :])
        _record_matrix(1, n + 1)
        cls_out = F.scaled_dot_product_attention(q_cls, k_all, v_all)
        cls_out = cls_out.transpose(-3, -2).reshape(b, d)

        return self.proj(tokens_out), self.proj(cls_out)


class Mlp(nn.Module):
    def __init__(self, dim: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class FactorizedBlock(nn.Module):
    """One transformer layer = in-slice step then axial-column step, each a
    pre-norm attention + feed-forward residual block."""

    def __init__(self, dim: int, heads_spatial: int, heads_axial: int, mlp_ratio: float):
        super().__init__()
        self.norm_sp = nn.LayerNorm(dim)
        self.attn_sp = GroupedAttention(dim, heads_spatial)
        self.norm_mlp_sp = nn.LayerNorm(dim)
        self.mlp_sp = Mlp(dim, mlp_ratio)
        self.norm_ax = nn.LayerNorm(dim)
        self.attn_ax = GroupedAttention(dim, heads_axial)
        self.norm_mlp_ax = nn.LayerNorm(dim)
        self.mlp_ax = Mlp(dim, mlp_ratio)

    def forward(self, tokens, cls, coords, grid):
        gid, n_groups = slice_group_ids(coords, grid)
        dt, dc = self.attn_sp(self.norm_sp(tokens), self.norm_sp(cls), gid, n_groups)
        tokens, cls = tokens + dt, cls + dc
        tokens = tokens + self.mlp_sp(self.norm_mlp_sp(tokens))
        cls = cls + self.mlp_sp(self.norm_mlp_sp(cls))

        gid, n_groups = column_group_ids(coords, grid)
        dt, dc = self.attn_ax(self.norm_ax(tokens), self.norm_ax(cls), gid, n_groups)
        tokens, cls = tokens + dt, cls + dc
        tokens = tokens + self.mlp_ax(self.norm_mlp_ax(tokens))
        cls = cls + self.mlp_ax(self.norm_mlp_ax(cls))
        return tokens, cls


def attention_adjacency(coords: torch.Tensor, grid: tuple[int, int, int]) -> torch.Tensor:
    """Boolean (N+1, N+1) matrix of which token pairs share an attention
    matrix in one layer; index N is CLS. Derived from the same grouping
    functions the forward pass uses."""
    sl, _ = slice_group_ids(coords, grid)
    co, _ = column_group_ids(coords, grid)
    n = coords.shape[0]
    adj = torch.zeros(n + 1, n + 1, dtype=torch.bool)
    adj[:n, :n] = (sl[:, None] == sl[None, :]) | (co[:, None] == co[None, :])
    adj[n, :] = True
    adj[:, n] = True
    return adj


# ---------------------------------------------------------------------------
# Encoder / decoder / detection head
# ---------------------------------------------------------------------------


def _canonicalize(tokens, coords, grid):
    flat = flat_index(coords, grid)
    order = torch.argsort(flat, dim=1, stable=True)
    tokens = torch.gather(tokens, 1, order.unsqueeze(-1).expand_as(tokens))
    coords = torch.gather(coords, 1, order.unsqueeze(-1).expand_as(coords))
    return tokens, coords, order


def _uncanonicalize(tokens, order):
    out = torch.empty_like(tokens)
    out.scatter_(1, order.unsqueeze(-1).expand_as(tokens), tokens)
    return out


class Encoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.tokenizer = nn.Linear(config.token_input_dim, config.dim)
        self.cls_token = nn.Parameter(torch.zeros(config.dim))
        self.blocks = nn.ModuleList(
            FactorizedBlock(config.dim, config.heads_spatial, config.heads_axial, config.mlp_ratio)
            for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(config.dim)
        nn.init.normal_(self.cls_token, std=0.02)

    def forward(self, channels: torch.Tensor, visible: torch.Tensor | None = None) -> TokenGrid:
        """Tokenize a (B, C, S, S, S) crop and encode its visible tokens.

        ``visible`` is an optional (B, P) boolean mask from a MaskPlan; the
        number of visible tokens must be equal across the batch.
        """
        b = channels.shape[0]
        patch = self.config.patch
        grid = tuple(s // patch for s in channels.shape[2:])
        tokens = self.tokenizer(patchify(channels, patch))
        coords = grid_coords(grid).to(channels.device)
        coords = coords[None].expand(b, -1, -1)
        if visible is not None:
            counts = visible.sum(dim=1)
            if not bool((counts == counts[0]).all()):
                raise ValueError("visible-token counts must match across the batch")
            n_vis = int(counts[0])
            idx = visible.nonzero(as_tuple=False)[:, 1].reshape(b, n_vis)
            tokens = torch.gather(tokens, 1, idx.unsqueeze(-1).expand(b, n_vis, tokens.shape[-1]))
            coords = torch.gather(coords, 1, idx.unsqueeze(-1).expand(b, n_vis, 3))
        return self.encode_tokens(tokens, coords, grid)

    def encode_tokens(self, tokens: torch.Tensor, coords: torch.Tensor, grid) -> TokenGrid:
        """Run the transformer stack over an explicit token list.

        Tokens are canonicalized by coordinate before any arithmetic, so the
        output for a given coordinate does not depend on input order.
        """
        tokens, coords_sorted, order = _canonicalize(tokens, coords, grid)
        pos = sincos_position_encoding(coords_sorted, self.config.dim).to(tokens.dtype)
        tokens = tokens + pos
        cls = self.cls_token.to(tokens.dtype).expand(tokens.shape[0], -1)
        for block in self.blocks:
            tokens, cls = block(tokens, cls, coords_sorted, grid)
        tokens = self.norm(tokens)
        cls = self.norm(cls)
        return TokenGrid(
            features=_uncanonicalize(tokens, order),
            coords=coords,
            cls=cls,
            grid=grid,
        )


class MaeDecoder(nn.Module):
    """Reassembles the full grid with a shared mask token and reconstructs
    the raw 2-channel patch values (channels * patch^3 outputs per token)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        ddim = config.resolved_decoder_dim
        self.embed = nn.Linear(config.dim, ddim)
        self.mask_token = nn.Parameter(torch.zeros(ddim))
        self.blocks = nn.ModuleList(
            FactorizedBlock(ddim, config.heads_spatial, config.heads_axial, config.mlp_ratio)
            for _ in range(config.resolved_decoder_depth)
        )
        self.norm = nn.LayerNorm(ddim)
        self.head = nn.Linear(ddim, config.token_input_dim)
        nn.init.normal_(self.mask_token, std=0.02)

    def forward(self, encoded: TokenGrid) -> torch.Tensor:
        grid = encoded.grid
        n_patches = grid[0] * grid[1] * grid[2]
        b = encoded.features.shape[0]
        ddim = self.embed.out_features
        dtype = encoded.features.dtype

        full = self.mask_token.to(dtype).expand(b, n_patches, ddim).clone()
        vis_idx = flat_index(encoded.coords, grid)
        vis = self.embed(encoded.features)
        full.scatter_(1, vis_idx.unsqueeze(-1).expand_as(vis), vis)

        coords = grid_coords(grid)[None].expand(b, -1, -1)
        full = full + sincos_position_encoding(coords, ddim).to(dtype)
        cls = self.embed(encoded.cls)
        for block in self.blocks:
            full, cls = block(full, cls, coords, grid)
        return self.head(self.norm(full))


class DetectionHead(nn.Module):
    """Learned queries -> cross-attention over all tokens + CLS -> query
    self-attention -> three MLP heads (class logit, center, size)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        dim = config.dim
        self.queries = nn.Parameter(torch.zeros(config.n_queries, dim))
        # Queries are conditioned on the CLS summary before cross-attention;
        # with purely static queries the soft attention over ~4k keys starts
        # near-uniform and the class head converges to an input-independent
        # prior at desk-scale budgets.
        self.query_cond = nn.Linear(dim, dim)
        # Learnable cross-attention temperature, warm enough that queries
        # start with tight receptive fields instead of averaging ~4k keys;
        # the location centroid uses an extra sharpening factor on the same
        # logits so it can localize to token precision while value pooling
        # stays soft enough to pass gradients.
        self.cross_scale = nn.Parameter(torch.tensor(3.0))
        self.centroid_sharpness = nn.Parameter(torch.tensor(3.0))
        self.heads = config.heads_spatial
        self.norm_mem = nn.LayerNorm(dim)
        self.norm_q1 = nn.LayerNorm(dim)
        self.cross_q = nn.Linear(dim, dim)
        self.cross_k = nn.Linear(dim, dim)
        self.cross_v = nn.Linear(dim, dim)
        self.cross_proj = nn.Linear(dim, dim)
        self.norm_q2 = nn.LayerNorm(dim)
        self.self_qkv = nn.Linear(dim, dim * 3)
        self.self_proj = nn.Linear(dim, dim)
        self.norm_q3 = nn.LayerNorm(dim)
        self.ffn = Mlp(dim, config.mlp_ratio)
        self.norm_out = nn.LayerNorm(dim)
        self.head_class = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, 1))
        self.head_center = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, 3))
        self.head_size = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, 1))
        # Anchor initialization: each query starts as the positional code of
        # a lattice point and the cross Q/K projections start as identity,
        # so attention begins sharply local (the pos-pos inner product peaks
        # at the anchor) and every query acts as a regional detector from
        # step 0. Random Q/K would scramble that peak and the head then
        # needs tens of thousands of steps to discover content routing.
        with torch.no_grad():
            anchors = query_anchor_coords(config.n_queries, config.grid)
            self.queries.copy_(
                sincos_position_encoding(anchors, dim).to(self.queries.dtype)
            )
            self.cross_q.weight.copy_(torch.eye(dim))
            self.cross_q.bias.zero_()
            self.cross_k.weight.copy_(torch.eye(dim))
            self.cross_k.bias.zero_()
            # Center refinement starts at zero: predictions begin exactly at
            # the attention centroid.
            self.head_center[-1].weight.zero_()
            self.head_center[-1].bias.zero_()

    def _heads(self, t: torch.Tensor) -> torch.Tensor:
        b, l, d = t.shape
        return t.reshape(b, l, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, encoded: TokenGrid) -> torch.Tensor:
        features, coords, _ = _canonicalize(encoded.features, encoded.coords, encoded.grid)
        b, n, dim = features.shape
        pos = sincos_position_encoding(coords, dim).to(features.dtype)
        mem = self.norm_mem(torch.cat([features, encoded.cls[:, None, :]], dim=1))
        key_pos = torch.cat([pos, torch.zeros_like(pos[:, :1])], dim=1)

        q = self.queries.to(features.dtype) + self.query_cond(encoded.cls)[:, None, :]
        n_q = q.shape[1]
        _record_matrix(n_q, n + 1)
        qh = self._heads(self.cross_q(self.norm_q1(q))) * self.cross_scale
        kh = self._heads(self.cross_k(mem + key_pos))
        vh = self._heads(self.cross_v(mem))
        logits = qh @ kh.transpose(-2, -1) / math.sqrt(qh.shape[-1])
        weights = logits.softmax(dim=-1)
        att = weights @ vh
        q = q + self.cross_proj(att.transpose(1, 2).reshape(b, -1, dim))

        # Attention centroid over token positions (CLS excluded): the base
        # location estimate. Tying it to the logits gives the center loss a
        # direct gradient onto attention placement, which an MLP-only center
        # cannot match at small step budgets.
        token_w = (logits.mean(dim=1)[..., :n] * self.centroid_sharpness).softmax(dim=-1)
        grid_size = token_w.new_tensor(encoded.grid)
        pos_norm = (coords.to(token_w.dtype) + 0.5) / grid_size  # (B, N, 3)
        centroid = token_w @ pos_norm
        centroid_logit = torch.logit(centroid.clamp(1e-4, 1 - 1e-4))

        qq, kk, vv = self.self_qkv(self.norm_q2(q)).chunk(3, dim=-1)
        _record_matrix(n_q, n_q)
        att = F.scaled_dot_product_attention(self._heads(qq), self._heads(kk), self._heads(vv))
        q = q + self.self_proj(att.transpose(1, 2).reshape(b, -1, dim))
        q = q + self.ffn(self.norm_q3(q))

        q = self.norm_out(q)
        raw_center = centroid_logit + self.head_center(q)
        return torch.cat([self.head_class(q), raw_center, self.head_size(q)], dim=-1)


class MaeModel(nn.Module):
    """Encoder + reconstruction decoder for pre-training."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = MaeDecoder(config)

    def forward(self, channels: torch.Tensor, visible: torch.Tensor | None) -> torch.Tensor:
        return self.decoder(self.encoder(channels, visible))


class AneurysmDetector(nn.Module):
    """Encoder + query-based detection head for fine-tuning and inference."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.head = DetectionHead(config)

    def forward(self, channels: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(channels, visible=None))


# ---------------------------------------------------------------------------
# Detection decoding
# ---------------------------------------------------------------------------

RAW_SIZE_CLAMP = 6.0  # |log side| bound; keeps exp() finite early in training


@dataclass(frozen=True)
class Detection:
    """A decoded detection: calibrated score, cube centre (z, y, x) in mm,
    and cube side in mm. Coordinates are crop-local unless shifted."""

    score: float
    center_mm: tuple[float, float, float]
    side_mm: float


def decode_raw(raw: torch.Tensor, extent_mm: torch.Tensor):
    """Differentiable decode of raw head outputs.

    Returns (scores, centers_mm, sides_mm, log_sides); centres are within
    [0, extent] per axis, sides strictly positive.
    """
    scores = torch.sigmoid(raw[..., 0])
    centers = torch.sigmoid(raw[..., 1:4]) * extent_mm.to(raw.dtype)
    log_sides = torch.clamp(raw[..., 4], -RAW_SIZE_CLAMP, RAW_SIZE_CLAMP)
    return scores, centers, torch.exp(log_sides), log_sides


def detections_from_raw(raw: torch.Tensor, extent_mm) -> list[list[Detection]]:
    """Decode a (B, n_queries, 5) raw tensor into per-sample detections."""
    extent = torch.as_tensor(extent_mm, dtype=raw.dtype)
    scores, centers, sides, _ = decode_raw(raw.detach(), extent)
    out = []
    for b in range(raw.shape[0]):
        out.append(
            [
                Detection(
                    score=float(scores[b, i]),
                    center_mm=tuple(float(v) for v in centers[b, i]),
                    side_mm=float(sides[b, i]),
                )
                for i in range(raw.shape[1])
            ]
        )
    return out


# ---------------------------------------------------------------------------
# Checkpoints: versioned container, config echo + named float32 arrays.
# ---------------------------------------------------------------------------

_MAGIC = b"VMCK"
_FORMAT_VERSION = 1


def save_checkpoint(path, kind: str, config: ModelConfig, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    payloads = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f4"})
        payloads.append(arr.tobytes())
    header = {
        "format_version": _FORMAT_VERSION,
        "kind": kind,
        "config": config.to_dict(),
        "meta": meta or {},
        "arrays": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for payload in payloads:
            fh.write(payload)


@dataclass
class Checkpoint:
    kind: str
    config: dict
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = struct.unpack("<II", data[4:12])
    if version != _FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = json.loads(data[12 : 12 + header_len])
    offset = 12 + header_len
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 4 if shape else 4
        chunk = data[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointError(
                f"{path}: truncated payload for {entry['name']}: "
                f"expected {nbytes} bytes, got {len(chunk)}"
            )
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return Checkpoint(
        kind=header["kind"], config=header["config"], arrays=arrays, meta=header["meta"]
    )


def model_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {
        name: tensor.detach().cpu().to(torch.float32).numpy()
        for name, tensor in module.state_dict().items()
    }


def load_model_arrays(module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    dtype = next(module.parameters()).dtype
    state = {name: torch.from_numpy(np.asarray(arr)).to(dtype) for name, arr in arrays.items()}
    missing, unexpected = module.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise CheckpointError(
            f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}"
        )


def ensure_config_match(saved_config: dict, config: ModelConfig) -> None:
    mine = config.to_dict()
    diffs = {
        key: (saved_config.get(key), mine.get(key))
        for key in set(saved_config) | set(mine)
        if saved_config.get(key) != mine.get(key)
    }
    if diffs:
        raise CheckpointError(f"checkpoint config mismatch: {diffs}")
