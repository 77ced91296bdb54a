"""Searching block: a MixConv path plus a lightweight transformer, summed.

The MixConv path expands the input with a pointwise convolution to three
equal kernel groups (3×3, 5×5, 7×7 depthwise), then projects the concatenated
group outputs back down with a second pointwise convolution (linear
bottleneck, no activation after the projection). Every expansion channel and
every transformer token is an independently prunable search unit; the batch
norm scale sitting directly behind a unit is its importance factor.

A block whose units are all pruned is converted to a degenerate form:
identity when stride is 1 and the channel counts match, otherwise a zero
contribution of the reduced output shape.
"""

from __future__ import annotations

import math

import numpy as np

from .layers import fan_in_normal
from .tensor import (
    BatchNorm,
    ConfigurationError,
    Module,
    ShapeError,
    Tensor,
    batch_norm,
    concat_channels,
    conv2d_depthwise,
    conv2d_pointwise,
    relu,
    split_channels,
    take_axis,
)
from .transformer import Transformer

KERNEL_SIZES = (3, 5, 7)
CONV_KINDS = ("conv3", "conv5", "conv7")


class KernelGroup(Module):
    """One depthwise kernel-size group with its importance-carrying batch norm."""

    def __init__(self, channels: int, kernel: int, stride: int, rng: np.random.Generator):
        self.weight = fan_in_normal(rng, (channels, kernel, kernel), kernel * kernel)
        self.bn = BatchNorm(channels)
        self.kernel = kernel
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return relu(batch_norm(conv2d_depthwise(x, self.weight, stride=self.stride), self.bn))

    def prune(self, keep: np.ndarray) -> None:
        take_axis(self.weight, 0, keep)
        self.bn.prune_channels(keep)


class SearchingBlock(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        stride: int = 1,
        expansion: int = 4,
        tokens: int = 8,
        proj_size: int = 8,
        attn_dim: int | None = None,
        heads: int = 1,
        token_mode: str = "channel",
        rng: np.random.Generator | None = None,
        path: str = "",
    ):
        if stride not in (1, 2):
            raise ConfigurationError(f"block stride must be 1 or 2, got {stride}")
        if expansion < 0:
            raise ConfigurationError(f"expansion ratio must be non-negative, got {expansion}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in = c_in
        self.c_out = c_out
        self.stride = stride
        self.expansion = expansion
        self.group_size = expansion * c_in
        self.path = path
        self.degenerate: str | None = None
        # alive original indices per kernel group, in ascending order
        self.alive_conv = {kind: list(range(self.group_size)) for kind in CONV_KINDS}
        g = self.group_size
        if g > 0:
            self.c0_w = fan_in_normal(rng, (3 * g, c_in), c_in)
            self.c0_bn = BatchNorm(3 * g)
            self.groups = [KernelGroup(g, k, stride, rng) for k in KERNEL_SIZES]
            self.c4_w = fan_in_normal(rng, (c_out, 3 * g), 3 * g)
            self.c4_bn = BatchNorm(c_out)
        else:
            self.c0_w = None
            self.c0_bn = None
            self.groups = []
            self.c4_w = None
            self.c4_bn = None
        self.transformer = Transformer(
            c_in, c_out, tokens, proj_size, attn_dim=attn_dim, heads=heads,
            token_mode=token_mode, rng=rng,
        )
        self.tokens_init = tokens
        # operating resolution, filled in by the owning network
        self.h_in = self.w_in = self.h_out = self.w_out = 0

    # -- structure ------------------------------------------------------------

    def set_resolution(self, h_in: int, w_in: int) -> None:
        self.h_in, self.w_in = h_in, w_in
        self.h_out = math.ceil(h_in / self.stride)
        self.w_out = math.ceil(w_in / self.stride)

    def alive_counts(self) -> dict[str, int]:
        counts = {kind: len(self.alive_conv[kind]) for kind in CONV_KINDS}
        counts["token"] = self.transformer.n if self.transformer is not None else 0
        return counts

    @property
    def conv_alive_total(self) -> int:
        return sum(len(v) for v in self.alive_conv.values())

    @property
    def unit_count(self) -> int:
        return self.conv_alive_total + (self.transformer.n if self.transformer else 0)

    @property
    def initial_units(self) -> int:
        return 3 * self.group_size + self.tokens_init

    def unit_kinds(self) -> list[tuple[str, int]]:
        """All alive units as (kind, original-index) pairs, in a stable order."""
        if self.degenerate is not None:
            return []
        units: list[tuple[str, int]] = []
        for kind in CONV_KINDS:
            units.extend((kind, idx) for idx in self.alive_conv[kind])
        if self.transformer is not None:
            units.extend(("token", idx) for idx in self.transformer.alive)
        return units

    def alpha_of(self, kind: str, index: int) -> float:
        """Current importance factor: the batch-norm scale bound to the unit."""
        if kind == "token":
            pos = self.transformer.alive.index(index)
            return float(self.transformer.proj_bn.gamma.data[pos])
        pos = self.alive_conv[kind].index(index)
        group = self.groups[CONV_KINDS.index(kind)]
        return float(group.bn.gamma.data[pos])

    # -- forward ----------------------------------------------------------------

    def forward(self, x: Tensor) -> Tensor:
        if self.degenerate == "identity":
            return x
        if self.degenerate == "zero":
            n, _, h, w = x.shape
            shape = (n, self.c_out, math.ceil(h / self.stride), math.ceil(w / self.stride))
            return Tensor(np.zeros(shape, dtype=x.data.dtype))
        if self.unit_count == 0:
            raise RuntimeError(
                f"block {self.path or '<unnamed>'} has no units left; convert it with degenerate_form"
            )
        if x.shape[1] != self.c_in:
            raise ShapeError(f"block expects {self.c_in} input channels, got {x.shape}")
        h_out = math.ceil(x.shape[2] / self.stride)
        w_out = math.ceil(x.shape[3] / self.stride)
        mix = None
        if self.conv_alive_total > 0:
            expanded = relu(batch_norm(conv2d_pointwise(x, self.c0_w), self.c0_bn))
            sizes = [len(self.alive_conv[kind]) for kind in CONV_KINDS]
            live = [i for i, s in enumerate(sizes) if s > 0]
            parts = split_channels(expanded, [sizes[i] for i in live])
            outs = [self.groups[i].forward(part) for i, part in zip(live, parts)]
            cat = outs[0] if len(outs) == 1 else concat_channels(outs)
            mix = batch_norm(conv2d_pointwise(cat, self.c4_w), self.c4_bn)
        t = self.transformer.forward(x, h_out, w_out)
        if mix is None:
            return t
        return mix + t

    # -- pruning ------------------------------------------------------------------

    def prune(self, units: list[tuple[str, int]]) -> None:
        """Remove the given (kind, original-index) units, slicing all bound weights."""
        if self.degenerate is not None:
            raise ValueError(f"block {self.path} is degenerate; nothing left to prune")
        removal = {kind: set() for kind in CONV_KINDS}
        removal["token"] = set()
        for kind, idx in units:
            if kind not in removal:
                raise ValueError(f"unknown unit kind {kind!r}")
            pool = (
                self.transformer.alive if kind == "token" else self.alive_conv[kind]
            )
            if idx not in pool:
                raise ValueError(f"unit ({kind}, {idx}) in block {self.path} is unknown or already removed")
            if idx in removal[kind]:
                raise ValueError(f"unit ({kind}, {idx}) in block {self.path} removed twice")
            removal[kind].add(idx)

        conv_removed = any(removal[kind] for kind in CONV_KINDS)
        if conv_removed:
            keep_rows = []  # surviving row positions in the current C0 output layout
            offset = 0
            for kind in CONV_KINDS:
                alive = self.alive_conv[kind]
                keep_local = [pos for pos, idx in enumerate(alive) if idx not in removal[kind]]
                keep_rows.extend(offset + pos for pos in keep_local)
                group = self.groups[CONV_KINDS.index(kind)]
                group.prune(np.asarray(keep_local, dtype=np.int64))
                self.alive_conv[kind] = [alive[pos] for pos in keep_local]
                offset += len(alive)
            keep_rows = np.asarray(keep_rows, dtype=np.int64)
            take_axis(self.c0_w, 0, keep_rows)
            self.c0_bn.prune_channels(keep_rows)
            take_axis(self.c4_w, 1, keep_rows)
            if self.conv_alive_total == 0:
                self.c0_w = self.c0_bn = None
                self.groups = []
                self.c4_w = self.c4_bn = None
        if removal["token"]:
            keep = [
                pos for pos, idx in enumerate(self.transformer.alive)
                if idx not in removal["token"]
            ]
            self.transformer.prune_tokens(np.asarray(keep, dtype=np.int64))
        if self.unit_count == 0:
            self.degenerate_form()

    def degenerate_form(self) -> str:
        """Convert an empty block to its degenerate replacement and return its kind."""
        if self.degenerate is not None:
            return self.degenerate
        if self.unit_count != 0:
            raise RuntimeError(
                f"block {self.path} still has {self.unit_count} units; cannot degenerate"
            )
        self.degenerate = (
            "identity" if self.stride == 1 and self.c_in == self.c_out else "zero"
        )
        self.c0_w = self.c0_bn = None
        self.groups = []
        self.c4_w = self.c4_bn = None
        self.transformer = None
        return self.degenerate
