"""Multi-branch supernet: stem, alternating parallel/fusion stages, task head.

Branch b runs at downsampling ratio 1/4 · (1/2)^(b-1); fusion stages exchange
information between neighboring branches (reduction block downward, stride-1
block plus bilinear upsampling upward, elementwise sum) and spawn one new
lowest-resolution branch per stage until the 1/32 cap. The dense head
concatenates all branches at the highest branch resolution; the
classification head concatenates at the lowest and global-average-pools.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .blocks import SearchingBlock
from .layers import ConvBN, DepthwiseConv, Linear, PointwiseConv
from .tensor import (
    ConfigurationError,
    Module,
    ShapeError,
    Tensor,
    bilinear_resize,
    concat_channels,
    global_avg_pool,
    relu,
)


@dataclass
class BranchSpec:
    blocks: int
    width: int


@dataclass
class TransformerSettings:
    tokens: int = 8
    proj_size: int = 8
    attn_dim: int | None = None
    heads: int = 1
    token_mode: str = "channel"

    def to_dict(self) -> dict:
        return {
            "tokens": self.tokens,
            "proj_size": self.proj_size,
            "attn_dim": self.attn_dim,
            "heads": self.heads,
            "token_mode": self.token_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransformerSettings":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class SupernetConfig:
    parallel_modules: list[list[BranchSpec]]
    stem_channels: int = 24
    input_channels: int = 3
    expansion: int = 4
    transformer: TransformerSettings = field(default_factory=TransformerSettings)
    head: str = "dense"
    max_downsample: int = 32

    @classmethod
    def default(cls) -> "SupernetConfig":
        """Five parallel stages with 1/2/3/4/4 branches at widths 18/36/72/144."""
        widths = [18, 36, 72, 144]
        counts = [1, 2, 3, 4, 4]
        modules = [[BranchSpec(blocks=1, width=widths[b]) for b in range(m)] for m in counts]
        return cls(parallel_modules=modules)

    def validate(self) -> None:
        if self.head not in ("dense", "classification"):
            raise ConfigurationError(f"unknown head kind {self.head!r}")
        if not self.parallel_modules:
            raise ConfigurationError("at least one parallel module is required")
        max_branches = int(math.log2(self.max_downsample)) - 1
        prev = None
        for i, branches in enumerate(self.parallel_modules):
            m = len(branches)
            if m < 1:
                raise ConfigurationError(f"parallel module {i} has no branches")
            if m > max_branches:
                raise ConfigurationError(
                    f"parallel module {i} has {m} branches; the 1/{self.max_downsample} "
                    f"downsampling cap allows at most {max_branches}"
                )
            if prev is not None and (m < prev or m > prev + 1):
                raise ConfigurationError(
                    f"branch count may grow by at most one per module and never shrink "
                    f"(module {i - 1} has {prev}, module {i} has {m})"
                )
            for spec in branches:
                if spec.width < 1 or spec.blocks < 0:
                    raise ConfigurationError(f"invalid branch spec {spec} in module {i}")
            prev = m

    def to_dict(self) -> dict:
        return {
            "parallel_modules": [
                [{"blocks": s.blocks, "width": s.width} for s in branches]
                for branches in self.parallel_modules
            ],
            "stem_channels": self.stem_channels,
            "input_channels": self.input_channels,
            "expansion": self.expansion,
            "transformer": self.transformer.to_dict(),
            "head": self.head,
            "max_downsample": self.max_downsample,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SupernetConfig":
        modules = [
            [BranchSpec(blocks=int(s["blocks"]), width=int(s["width"])) for s in branches]
            for branches in d["parallel_modules"]
        ]
        cfg = cls(parallel_modules=modules)
        for key in ("stem_channels", "input_channels", "expansion", "head", "max_downsample"):
            if key in d:
                setattr(cfg, key, d[key])
        if "transformer" in d:
            cfg.transformer = TransformerSettings.from_dict(d["transformer"])
        cfg.validate()
        return cfg


class StemConv(Module):
    """3×3 stride-2 stage realized with the engine's kernel set (depthwise +
    pointwise), batch norm, relu."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.dw = DepthwiseConv(c_in, kernel=3, stride=2, rng=rng)
        self.pw = ConvBN(c_out, c_in, rng)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.pw.forward(self.dw.forward(x)))


class BranchChain(Module):
    def __init__(self, blocks: list[SearchingBlock]):
        self.blocks = blocks

    def forward(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk.forward(x)
        return x


class ParallelModule(Module):
    """Independent per-branch chains of stride-1 searching blocks."""

    def __init__(self, chains: list[BranchChain], widths: list[int]):
        self.chains = chains
        self.widths = widths

    def forward(self, feats: list[Tensor]) -> list[Tensor]:
        if len(feats) != len(self.chains):
            raise ShapeError(f"expected {len(self.chains)} branches, got {len(feats)}")
        for f, wdt in zip(feats, self.widths):
            if f.shape[1] != wdt:
                raise ShapeError(f"branch width mismatch: feature {f.shape} vs width {wdt}")
        return [chain.forward(f) for chain, f in zip(self.chains, feats)]

    def named_blocks(self):
        for b, chain in enumerate(self.chains):
            for i, blk in enumerate(chain.blocks):
                yield blk.path, blk


class FusionPath(Module):
    def __init__(self, block: SearchingBlock, src: int, dst: int, upsample: bool):
        self.block = block
        self.src = src
        self.dst = dst
        self.upsample = upsample


class FusionModule(Module):
    """Neighbor fusion: each output branch sums a reduction path from above,
    a same-scale path, and an upsampled path from below, where they exist."""

    def __init__(self, paths: list[FusionPath], m_in: int, m_out: int):
        self.paths = paths
        self.m_in = m_in
        self.m_out = m_out

    def forward(self, feats: list[Tensor]) -> list[Tensor]:
        if len(feats) != self.m_in:
            raise ShapeError(f"expected {self.m_in} branches, got {len(feats)}")
        outs: list[Tensor] = []
        for dst in range(self.m_out):
            total: Tensor | None = None
            pending_up: list[Tensor] = []
            for p in self.paths:
                if p.dst != dst:
                    continue
                y = p.block.forward(feats[p.src])
                if p.upsample:
                    pending_up.append(y)
                    continue
                total = y if total is None else total + y
            for y in pending_up:
                y = bilinear_resize(y, total.shape[2], total.shape[3])
                total = total + y
            outs.append(total)
        return outs

    def named_blocks(self):
        for p in self.paths:
            yield p.block.path, p.block


class DenseHead(Module):
    """Resize every branch to the highest branch resolution, concatenate,
    classify per pixel, resize logits to the input resolution."""

    def __init__(self, widths: list[int], classes: int, rng: np.random.Generator):
        if classes <= 0:
            raise ConfigurationError(f"class count must be positive, got {classes}")
        self.conv = PointwiseConv(classes, sum(widths), rng, bias=True)
        self.classes = classes

    def forward(self, feats: list[Tensor], input_hw: tuple[int, int]) -> Tensor:
        target_h, target_w = feats[0].shape[2], feats[0].shape[3]
        aligned = [feats[0]] + [bilinear_resize(f, target_h, target_w) for f in feats[1:]]
        merged = concat_channels(aligned) if len(aligned) > 1 else aligned[0]
        logits = self.conv.forward(merged)
        return bilinear_resize(logits, input_hw[0], input_hw[1])


class ClassificationHead(Module):
    """Resize every branch to the lowest branch resolution, concatenate,
    global-average-pool, single linear classifier."""

    def __init__(self, widths: list[int], classes: int, rng: np.random.Generator):
        if classes <= 0:
            raise ConfigurationError(f"class count must be positive, got {classes}")
        self.fc = Linear(sum(widths), classes, rng)
        self.classes = classes

    def forward(self, feats: list[Tensor], input_hw: tuple[int, int]) -> Tensor:
        target_h, target_w = feats[-1].shape[2], feats[-1].shape[3]
        aligned = [bilinear_resize(f, target_h, target_w) for f in feats[:-1]] + [feats[-1]]
        merged = concat_channels(aligned) if len(aligned) > 1 else aligned[0]
        return self.fc.forward(global_avg_pool(merged))


def _halve(v: int) -> int:
    return math.ceil(v / 2)


class Supernet(Module):
    def __init__(self, config: SupernetConfig, classes: int, input_hw: tuple[int, int], seed: int):
        config.validate()
        rng = np.random.default_rng(seed)
        self.config = config
        self.classes = classes
        self.input_hw = tuple(input_hw)
        self.seed = seed

        h, w = self.input_hw
        self.stem_hw = [(_halve(h), _halve(w))]
        self.stem_hw.append((_halve(self.stem_hw[0][0]), _halve(self.stem_hw[0][1])))
        self.stem1 = StemConv(config.input_channels, config.stem_channels, rng)
        self.stem2 = StemConv(config.stem_channels, config.stem_channels, rng)
        first_width = config.parallel_modules[0][0].width
        self.adapter = ConvBN(first_width, config.stem_channels, rng)

        # branch resolutions: branch b is the stem resolution halved b times
        def branch_hw(b: int) -> tuple[int, int]:
            hh, ww = self.stem_hw[1]
            for _ in range(b):
                hh, ww = _halve(hh), _halve(ww)
            return hh, ww

        tcfg = config.transformer

        def new_block(c_in, c_out, stride, path, h_in, w_in) -> SearchingBlock:
            blk = SearchingBlock(
                c_in, c_out, stride=stride, expansion=config.expansion,
                tokens=tcfg.tokens, proj_size=tcfg.proj_size, attn_dim=tcfg.attn_dim,
                heads=tcfg.heads, token_mode=tcfg.token_mode, rng=rng, path=path,
            )
            blk.set_resolution(h_in, w_in)
            return blk

        self.stages: list[Module] = []
        for k, branches in enumerate(config.parallel_modules):
            chains = []
            for b, spec in enumerate(branches):
                hh, ww = branch_hw(b)
                chain = [
                    new_block(spec.width, spec.width, 1, f"P{k + 1}/b{b + 1}/k{i}", hh, ww)
                    for i in range(spec.blocks)
                ]
                chains.append(BranchChain(chain))
            self.stages.append(ParallelModule(chains, [s.width for s in branches]))
            if k + 1 < len(config.parallel_modules):
                nxt = config.parallel_modules[k + 1]
                m_in, m_out = len(branches), len(nxt)
                paths = []
                for dst in range(m_out):
                    for src in (dst - 1, dst, dst + 1):
                        if src < 0 or src >= m_in:
                            continue
                        stride = 2 if src == dst - 1 else 1
                        hh, ww = branch_hw(src)
                        paths.append(
                            FusionPath(
                                new_block(
                                    branches[src].width, nxt[dst].width, stride,
                                    f"F{k + 1}/d{dst + 1}/s{src + 1}", hh, ww,
                                ),
                                src, dst, upsample=(src == dst + 1),
                            )
                        )
                self.stages.append(FusionModule(paths, m_in, m_out))

        final_widths = [s.width for s in config.parallel_modules[-1]]
        head_rng = rng
        if config.head == "dense":
            self.head = DenseHead(final_widths, classes, head_rng)
        else:
            self.head = ClassificationHead(final_widths, classes, head_rng)

    # -- forward ---------------------------------------------------------------

    def stem_forward(self, x: Tensor) -> Tensor:
        """Two stride-2 stages: resolution drops to 1/4 at `stem_channels`."""
        return self.stem2.forward(self.stem1.forward(x))

    def adapter_forward(self, x: Tensor) -> Tensor:
        """Width adapter from the stem to the first branch."""
        return relu(self.adapter.forward(x))

    def forward(self, x: Tensor) -> Tensor:
        feats = self.branch_features(x)
        return self.head.forward(feats, self.input_hw)

    def branch_features(self, x: Tensor) -> list[Tensor]:
        if x.shape[1] != self.config.input_channels:
            raise ShapeError(
                f"expected {self.config.input_channels} input channels, got {x.shape}"
            )
        feats = [self.adapter_forward(self.stem_forward(x))]
        for stage in self.stages:
            feats = stage.forward(feats)
        return feats

    # -- registry ----------------------------------------------------------------

    def named_blocks(self) -> list[tuple[str, SearchingBlock]]:
        out = []
        for stage in self.stages:
            out.extend(stage.named_blocks())
        return out

    def unit_total(self) -> int:
        return sum(blk.unit_count for _, blk in self.named_blocks())


def build_supernet(
    config: SupernetConfig, classes: int, input_hw: int | tuple[int, int], seed: int = 0
) -> Supernet:
    """Instantiate the full supernet with deterministic seeded initialization."""
    if isinstance(input_hw, int):
        input_hw = (input_hw, input_hw)
    return Supernet(config, classes, input_hw, seed)
