"""Shared test utilities."""

import numpy as np

from hrnas.tensor import BatchNorm, Module


def promote_to_float64(module: Module) -> Module:
    """Cast every parameter and batch-norm buffer to float64 in place.

    Finite-difference oracles need 64-bit evaluation; production code stays
    float32.
    """

    def visit(m: Module) -> None:
        for name, value in vars(m).items():
            from hrnas.tensor import Tensor

            if isinstance(value, Tensor):
                value.data = value.data.astype(np.float64)
                if value.grad is not None:
                    value.grad = np.zeros_like(value.data)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Tensor):
                        item.data = item.data.astype(np.float64)
                        if item.grad is not None:
                            item.grad = np.zeros_like(item.data)
        if isinstance(m, BatchNorm):
            m.running_mean = m.running_mean.astype(np.float64)
            m.running_var = m.running_var.astype(np.float64)

    module.apply_modules(visit)
    return module
