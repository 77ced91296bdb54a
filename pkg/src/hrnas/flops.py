"""Closed-form multiply-accumulate accounting with a brute-force oracle.

Every count is a multiply-accumulate (1 MAC = 1 cost unit, per-sample).
Kernels that perform no accumulation (resize, normalization, softmax,
pooling, residual adds) are excluded from both the closed forms and the
instrumented counter, so the two agree exactly by construction; the oracle
equality tests keep that honest.

Cost weights for search units: a convolution channel saves its fixed kernel
cost k²·h·w at the block's output resolution; a token saves the marginal
transformer cost O_T(n') − O_T(n'−1) at the current remaining token count,
where O_T includes the projector and inverse-projector convolutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blocks import CONV_KINDS, SearchingBlock
from .supernet import ClassificationHead, Supernet
from .tensor import BatchNorm, ConfigurationError, Tensor, count_macs, freeze_bn_stats, no_grad

_KERNEL_OF = {"conv3": 3, "conv5": 5, "conv7": 7}


def conv_flops(kind: str, c_in: int, c_out: int, k: int, h_out: int, w_out: int) -> int:
    """MACs of one convolution layer at its output resolution."""
    if min(c_in, c_out, k, h_out, w_out) <= 0:
        raise ConfigurationError("convolution dimensions must be positive")
    if kind == "pointwise":
        return c_in * c_out * h_out * w_out
    if kind == "depthwise":
        return c_out * k * k * h_out * w_out
    raise ConfigurationError(f"unknown convolution kind {kind!r}")


def _attention_stage_flops(t: int, e: int, d: int, heads: int) -> int:
    # per head: Q/K/V projections 3·t·e·d, scores t²·d, context t²·d;
    # shared output projection t·(heads·d)·e
    return heads * (4 * t * e * d + 2 * t * t * d)


def _ffn_flops(t: int, e: int) -> int:
    return 8 * t * e * e


def transformer_core_flops(
    n: int, s: int, d: int, heads: int = 1, token_mode: str = "channel"
) -> int:
    """Encoder + decoder attention and feed-forward MACs (projections excluded)."""
    if n == 0:
        return 0
    t, e = (n, s * s) if token_mode == "channel" else (s * s, n)
    return 2 * (_attention_stage_flops(t, e, d, heads) + _ffn_flops(t, e))


def transformer_flops(
    n: int,
    s: int,
    d: int,
    heads: int,
    c_in: int,
    c_out: int,
    h_in: int,
    w_in: int,
    h_out: int,
    w_out: int,
    token_mode: str = "channel",
) -> int:
    """Full transformer MACs O_T(n), including projector and inverse projector."""
    if n == 0:
        return 0
    projector = n * (c_in + 2) * h_in * w_in
    inverse = n * c_out * h_out * w_out
    return projector + transformer_core_flops(n, s, d, heads, token_mode) + inverse


def block_transformer_flops(block: SearchingBlock, n: int | None = None) -> int:
    tr = block.transformer
    if tr is None:
        return 0
    tokens = tr.n if n is None else n
    return transformer_flops(
        tokens, tr.s, tr.d, tr.heads, block.c_in, block.c_out,
        block.h_in, block.w_in, block.h_out, block.w_out, tr.token_mode,
    )


def block_mixconv_flops(block: SearchingBlock) -> int:
    alive = block.conv_alive_total
    if block.degenerate is not None or alive == 0:
        return 0
    total = conv_flops("pointwise", block.c_in, alive, 1, block.h_in, block.w_in)
    for kind in CONV_KINDS:
        g = len(block.alive_conv[kind])
        if g:
            total += conv_flops("depthwise", g, g, _KERNEL_OF[kind], block.h_out, block.w_out)
    total += conv_flops("pointwise", alive, block.c_out, 1, block.h_out, block.w_out)
    return total


def block_flops(block: SearchingBlock) -> dict[str, int]:
    mix = block_mixconv_flops(block)
    tr = 0 if block.degenerate is not None else block_transformer_flops(block)
    return {"mixconv": mix, "transformer": tr, "total": mix + tr}


def delta_of_unit(block: SearchingBlock, kind: str) -> int:
    """Cost weight Δ of one alive unit of the given kind in this block."""
    if block.h_out <= 0:
        raise ConfigurationError(f"block {block.path} has no resolution assigned")
    if kind in _KERNEL_OF:
        k = _KERNEL_OF[kind]
        return k * k * block.h_out * block.w_out
    if kind == "token":
        n = block.transformer.n
        if n == 0:
            raise ConfigurationError(f"block {block.path} has no tokens left")
        return block_transformer_flops(block, n) - block_transformer_flops(block, n - 1)
    raise ConfigurationError(f"unknown unit kind {kind!r}")


# ---------------------------------------------------------------------------
# Network-level report
# ---------------------------------------------------------------------------


@dataclass
class FlopsReport:
    input_hw: tuple[int, int]
    stem: int
    head: int
    blocks: list[dict] = field(default_factory=list)
    delta_table: list[dict] = field(default_factory=list)

    @property
    def module_totals(self) -> dict[str, int]:
        totals: dict[str, int] = {}
        for entry in self.blocks:
            module = entry["path"].split("/")[0]
            totals[module] = totals.get(module, 0) + entry["total"]
        return totals

    @property
    def total(self) -> int:
        return self.stem + self.head + sum(e["total"] for e in self.blocks)

    def to_dict(self) -> dict:
        return {
            "input_hw": list(self.input_hw),
            "stem": self.stem,
            "head": self.head,
            "blocks": self.blocks,
            "module_totals": self.module_totals,
            "total": self.total,
            "delta_table": self.delta_table,
        }

    def to_text(self) -> str:
        lines = [f"{'block':<16}{'mixconv':>14}{'transformer':>14}{'total':>14}"]
        for e in self.blocks:
            lines.append(
                f"{e['path']:<16}{e['mixconv']:>14}{e['transformer']:>14}{e['total']:>14}"
            )
        lines.append(f"{'stem':<16}{'':>14}{'':>14}{self.stem:>14}")
        lines.append(f"{'head':<16}{'':>14}{'':>14}{self.head:>14}")
        for module, value in self.module_totals.items():
            lines.append(f"{'module ' + module:<30}{'':>14}{value:>14}")
        lines.append(f"{'network total':<44}{self.total:>14}")
        return "\n".join(lines)


def stem_flops(net: Supernet) -> int:
    cfg = net.config
    (h1, w1), (h2, w2) = net.stem_hw
    ci, sc = cfg.input_channels, cfg.stem_channels
    total = conv_flops("depthwise", ci, ci, 3, h1, w1)
    total += conv_flops("pointwise", ci, sc, 1, h1, w1)
    total += conv_flops("depthwise", sc, sc, 3, h2, w2)
    total += conv_flops("pointwise", sc, sc, 1, h2, w2)
    total += conv_flops("pointwise", sc, cfg.parallel_modules[0][0].width, 1, h2, w2)
    return total


def head_flops(net: Supernet) -> int:
    widths = [s.width for s in net.config.parallel_modules[-1]]
    if isinstance(net.head, ClassificationHead):
        return sum(widths) * net.classes
    h1, w1 = net.stem_hw[1]
    return conv_flops("pointwise", sum(widths), net.classes, 1, h1, w1)


def network_flops(net: Supernet) -> FlopsReport:
    report = FlopsReport(input_hw=net.input_hw, stem=stem_flops(net), head=head_flops(net))
    for path, block in net.named_blocks():
        entry = {"path": path}
        entry.update(block_flops(block))
        report.blocks.append(entry)
        deltas: dict = {"path": path}
        counts = block.alive_counts()
        for kind in CONV_KINDS:
            deltas[kind] = delta_of_unit(block, kind) if counts[kind] else None
        deltas["token"] = delta_of_unit(block, "token") if counts["token"] else None
        report.delta_table.append(deltas)
    return report


def brute_force_count(net: Supernet, input_hw: tuple[int, int] | None = None) -> int:
    """Instrumented per-sample MAC count from one batch-1 forward pass.

    Runs with batch-norm forced to batch statistics and updates frozen, so the
    pass neither mutates the network nor requires initialized running stats.
    """
    h, w = input_hw if input_hw is not None else net.input_hw
    x = Tensor(np.zeros((1, net.config.input_channels, h, w), dtype=np.float32))
    modes: list[tuple[BatchNorm, bool]] = []

    def snapshot(m):
        if isinstance(m, BatchNorm):
            modes.append((m, m.training))
            m.training = True

    net.apply_modules(snapshot)
    try:
        with no_grad(), freeze_bn_stats(), count_macs() as counter:
            net.forward(x)
    finally:
        for bn, flag in modes:
            bn.training = flag
    return counter.total
