"""Plug-and-play lightweight transformer over feature maps with prunable tokens.

The operator projects an N×c×H×W map (concatenated with a normalized 2D
positional map) down to a small token grid, runs a single encoder and a
decoder whose queries are learned embeddings, and projects the result back
to a feature map. In the default `channel` token mode each of the n
projected channels is one token of dimension s²; `spatial` mode transposes
the roles so each of the s² positions is a token of dimension n.

Removing token i deletes projector row i, query row i and inverse-projector
column i. With zero tokens the operator degenerates: it passes the input
through unchanged when the requested output shape matches, and contributes
an all-zero map otherwise (the reduction-block case).
"""

from __future__ import annotations

import math

import numpy as np

from .layers import LayerNorm, fan_in_normal, uniform_init, zeros_param
from .tensor import (
    DEFAULT_DTYPE,
    BatchNorm,
    ConfigurationError,
    Module,
    ShapeError,
    Tensor,
    add,
    batch_norm,
    bilinear_resize,
    concat,
    concat_channels,
    conv2d_pointwise,
    expand_batch,
    linear,
    matmul,
    relu,
    reshape,
    softmax_lastdim,
    take_axis,
    transpose_last2,
)

_POSITIONAL_CACHE: dict[tuple, np.ndarray] = {}


def positional_map(h_img: int, w_img: int, dtype=DEFAULT_DTYPE) -> Tensor:
    """Normalized 2D positional map: channel 0 is i/h, channel 1 is j/w."""
    if h_img < 1 or w_img < 1:
        raise ShapeError(f"positional map needs positive dims, got {h_img}×{w_img}")
    key = (h_img, w_img, np.dtype(dtype).str)
    if key not in _POSITIONAL_CACHE:
        rows = (np.arange(h_img, dtype=np.float64) / h_img)[:, None]
        cols = (np.arange(w_img, dtype=np.float64) / w_img)[None, :]
        pmap = np.stack(
            [np.broadcast_to(rows, (h_img, w_img)), np.broadcast_to(cols, (h_img, w_img))]
        )
        _POSITIONAL_CACHE[key] = pmap.astype(dtype)
    return Tensor(_POSITIONAL_CACHE[key])


class AttentionStage(Module):
    """One multi-head self-attention + feed-forward stage with residual norms."""

    def __init__(self, embed_dim: int, attn_dim: int, heads: int, rng: np.random.Generator):
        if attn_dim <= 0:
            raise ConfigurationError(f"attention hidden width must be positive, got {attn_dim}")
        e, d = embed_dim, attn_dim
        self.wq = [fan_in_normal(rng, (e, d), e, gain=1.0) for _ in range(heads)]
        self.wk = [fan_in_normal(rng, (e, d), e, gain=1.0) for _ in range(heads)]
        self.wv = [fan_in_normal(rng, (e, d), e, gain=1.0) for _ in range(heads)]
        self.wo = fan_in_normal(rng, (heads * d, e), heads * d, gain=1.0)
        self.ln_attn = LayerNorm(e)
        self.ffn_w1 = fan_in_normal(rng, (e, 4 * e), e)
        self.ffn_b1 = zeros_param((4 * e,))
        self.ffn_w2 = fan_in_normal(rng, (4 * e, e), 4 * e, gain=1.0)
        self.ffn_b2 = zeros_param((e,))
        self.ln_ffn = LayerNorm(e)
        self.heads = heads
        self.attn_dim = d


def mhsa(queries: Tensor, keys: Tensor, values: Tensor, stage: AttentionStage,
         attn_sink: list | None = None) -> Tensor:
    """Multi-head scaled-dot-product attention, residual on the query stream,
    followed by layer normalization. Optionally records attention rows."""
    scale = 1.0 / math.sqrt(stage.attn_dim)
    head_outs = []
    for i in range(stage.heads):
        q = matmul(queries, stage.wq[i])
        k = matmul(keys, stage.wk[i])
        v = matmul(values, stage.wv[i])
        attn = softmax_lastdim(matmul(q, transpose_last2(k)) * scale)
        if attn_sink is not None:
            attn_sink.append(attn.data)
        head_outs.append(matmul(attn, v))
    ctx = head_outs[0] if len(head_outs) == 1 else concat(head_outs, axis=-1)
    out = matmul(ctx, stage.wo)
    return stage.ln_attn.forward(add(queries, out))


def ffn(tokens: Tensor, stage: AttentionStage) -> Tensor:
    """Two linear maps with a relu in between, residual, layer norm."""
    hidden = relu(linear(tokens, stage.ffn_w1, stage.ffn_b1))
    out = linear(hidden, stage.ffn_w2, stage.ffn_b2)
    return stage.ln_ffn.forward(add(tokens, out))


class Transformer(Module):
    """Feature-map-to-feature-map attention operator with prunable tokens."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        tokens: int,
        proj_size: int,
        attn_dim: int | None = None,
        heads: int = 1,
        token_mode: str = "channel",
        rng: np.random.Generator | None = None,
    ):
        if token_mode not in ("channel", "spatial"):
            raise ConfigurationError(f"unknown token mode {token_mode!r}")
        if tokens < 0 or proj_size < 1 or heads < 1:
            raise ConfigurationError(
                f"invalid transformer sizes: tokens={tokens}, proj_size={proj_size}, heads={heads}"
            )
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in = c_in
        self.c_out = c_out
        self.n_init = tokens
        self.s = proj_size
        self.d = attn_dim if attn_dim is not None else proj_size * proj_size
        self.heads = heads
        self.token_mode = token_mode
        self.alive = list(range(tokens))
        self.last_attention: list[np.ndarray] = []
        if tokens == 0:
            return  # degenerate from construction: no parameters at all
        n, s = tokens, proj_size
        embed = s * s if token_mode == "channel" else n
        self.proj_w = fan_in_normal(rng, (n, c_in + 2), c_in + 2)
        self.proj_bn = BatchNorm(n)
        self.encoder = AttentionStage(embed, self.d, heads, rng)
        self.decoder = AttentionStage(embed, self.d, heads, rng)
        if token_mode == "channel":
            self.queries = uniform_init(rng, (n, s * s), 1.0 / s)
        else:
            self.queries = uniform_init(rng, (s * s, n), 1.0 / s)
        self.inv_w = fan_in_normal(rng, (c_out, n), n)
        self.inv_bn = BatchNorm(c_out)

    # -- structure ----------------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.alive)

    def prune_tokens(self, keep_positions: np.ndarray) -> None:
        """Keep only the given current token positions (channel mode only)."""
        if self.token_mode != "channel":
            raise ConfigurationError("token pruning is defined for channel token mode only")
        keep = np.asarray(keep_positions, dtype=np.int64)
        take_axis(self.proj_w, 0, keep)
        self.proj_bn.prune_channels(keep)
        take_axis(self.queries, 0, keep)
        take_axis(self.inv_w, 1, keep)
        self.alive = [self.alive[i] for i in keep.tolist()]

    # -- forward ------------------------------------------------------------

    def project(self, x: Tensor) -> Tensor:
        """Concat positional map, reduce channels to n, resize to s×s, flatten."""
        if self.n == 0:
            raise ConfigurationError("cannot project with zero tokens; handle degeneracy first")
        if x.shape[1] != self.c_in:
            raise ShapeError(f"expected {self.c_in} input channels, got {x.shape}")
        batch, _, h, w = x.shape
        pos = expand_batch(positional_map(h, w, dtype=x.dtype), batch)
        stacked = concat_channels([x, pos])
        mapped = batch_norm(conv2d_pointwise(stacked, self.proj_w), self.proj_bn)
        grid = bilinear_resize(mapped, self.s, self.s)
        tokens = reshape(grid, (batch, self.n, self.s * self.s))
        if self.token_mode == "spatial":
            tokens = transpose_last2(tokens)
        return tokens

    def encode(self, tokens: Tensor) -> Tensor:
        attended = mhsa(tokens, tokens, tokens, self.encoder, self.last_attention)
        return ffn(attended, self.encoder)

    def decode(self, encoded: Tensor) -> Tensor:
        """Decoder with learned queries; keys and values come from the encoder."""
        expected = self.n if self.token_mode == "channel" else self.s * self.s
        if self.queries.shape[0] != expected:
            raise ShapeError(
                f"query rows {self.queries.shape[0]} do not match token count {expected}"
            )
        q = expand_batch(self.queries, encoded.shape[0])
        attended = mhsa(q, encoded, encoded, self.decoder, self.last_attention)
        return ffn(attended, self.decoder)

    def inverse_project(self, tokens: Tensor, h_out: int, w_out: int) -> Tensor:
        """Unflatten to n×s×s, resize to the target grid, map to c_out channels."""
        if self.token_mode == "spatial":
            tokens = transpose_last2(tokens)
        batch = tokens.shape[0]
        grid = reshape(tokens, (batch, self.n, self.s, self.s))
        resized = bilinear_resize(grid, h_out, w_out)
        return batch_norm(conv2d_pointwise(resized, self.inv_w), self.inv_bn)

    def forward(self, x: Tensor, h_out: int, w_out: int) -> Tensor:
        """Full operator; with zero tokens returns x (matching shapes) or zeros."""
        self.last_attention = []
        if self.n == 0:
            if x.shape[1] == self.c_out and x.shape[2] == h_out and x.shape[3] == w_out:
                return x
            return Tensor(np.zeros((x.shape[0], self.c_out, h_out, w_out), dtype=x.data.dtype))
        tokens = self.project(x)
        decoded = self.decode(self.encode(tokens))
        return self.inverse_project(decoded, h_out, w_out)
