"""Desk-scale architecture search over a multi-branch high-resolution supernet
with prunable mixed-kernel convolutions and lightweight transformers.

The package is organized as:

- `tensor`: float32 tensors with reverse-mode autodiff and the exact kernel
  set the supernet needs, plus the finite-difference test oracle.
- `transformer`: the plug-and-play attention operator with prunable tokens.
- `blocks`: the searching block (MixConv path + transformer path, summed).
- `supernet`: stem, parallel/fusion stages, task heads, configuration.
- `flops`: closed-form MAC accounting, per-unit cost weights, brute-force
  counting oracle.
- `search`: penalty, training loop, threshold pruning, BN recalibration,
  the end-to-end search.
- `descriptor`: versioned binary container that rebuilds searched networks
  bit-exactly.
- `toytasks`: deterministic synthetic datasets and losses.
- `cli` / `report`: command-line entry point and figure rendering.
"""

from .blocks import SearchingBlock
from .descriptor import export_descriptor, import_descriptor, rebuild_network
from .flops import FlopsReport, brute_force_count, network_flops
from .search import SearchConfig, SearchResult, search
from .supernet import SupernetConfig, Supernet, build_supernet
from .tensor import Tensor
from .transformer import Transformer

__version__ = "0.1.0"

__all__ = [
    "FlopsReport",
    "SearchConfig",
    "SearchResult",
    "SearchingBlock",
    "Supernet",
    "SupernetConfig",
    "Tensor",
    "Transformer",
    "brute_force_count",
    "build_supernet",
    "export_descriptor",
    "import_descriptor",
    "network_flops",
    "rebuild_network",
    "search",
]
