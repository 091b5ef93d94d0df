"""Forward-pass compute accounting for the three distillation schemes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .config import Scheme
from .models import Branch

# Per-image forward costs quoted for the full-size models (ResNet-50 teacher, ResNet-18 student).
REF_C_T = 4_100_000_000
REF_C_S = 1_800_000_000
REF_C_HEADS = 12_000_000

COSTED_SCHEMES = (Scheme.SIMDIS_OFF, Scheme.SIMDIS_ON, Scheme.SIMDIS_ON_7V)


class AccountingError(ValueError):
    pass


@dataclass(frozen=True)
class CostModel:
    c_T: float
    c_S: float
    c_heads: float
    M: int
    N: int

    def __post_init__(self):
        if min(self.c_T, self.c_S, self.c_heads) <= 0:
            raise AccountingError("per-image costs must be positive")
        if self.M < 0 or self.N < 0:
            raise AccountingError("M and N must be nonnegative")


def scheme_cost(model: CostModel, scheme: Scheme | str) -> float:
    """Total forward FLOPs of a scheme, following the per-image terms of the cost table.

    Offline counts the teacher twice (stage-1 training plus stage-2 inference),
    online once; multi-view adds the extra prediction heads.
    """
    try:
        scheme = Scheme(scheme)
    except ValueError:
        raise AccountingError(f"unknown scheme {scheme!r}") from None
    if scheme is Scheme.SIMDIS_OFF:
        per_image = 2 * model.c_T + model.c_S
    elif scheme is Scheme.SIMDIS_ON:
        per_image = model.c_T + model.c_S
    elif scheme is Scheme.SIMDIS_ON_7V:
        per_image = model.c_T + model.c_S + model.c_heads
    else:
        raise AccountingError(f"no cost formula for scheme {scheme.value!r}")
    return per_image * model.M * model.N


def format_flops(x: float) -> str:
    for unit, scale in (("T", 1e12), ("G", 1e9), ("M", 1e6), ("K", 1e3)):
        if abs(x) >= scale:
            return f"{x / scale:.4g}{unit}"
    return f"{x:.4g}"


def scheme_formula(scheme: Scheme | str, c_T: float, c_S: float, c_heads: float) -> str:
    """The per-image bracket of the cost table, e.g. ``(8.2G + 1.8G) x M x N``."""
    scheme = Scheme(scheme)
    if scheme is Scheme.SIMDIS_OFF:
        terms = [2 * c_T, c_S]
    elif scheme is Scheme.SIMDIS_ON:
        terms = [c_T, c_S]
    elif scheme is Scheme.SIMDIS_ON_7V:
        terms = [c_T, c_S, c_heads]
    else:
        raise AccountingError(f"no cost formula for scheme {scheme.value!r}")
    return "(" + " + ".join(format_flops(t) for t in terms) + ") x M x N"


# --------------------------------------------------------------------------- layer counting

_FREE = (
    nn.BatchNorm1d,
    nn.BatchNorm2d,
    nn.ReLU,
    nn.AdaptiveAvgPool2d,
    nn.Flatten,
    nn.Identity,
    nn.Sequential,  # only reached when empty, i.e. an identity shortcut
)


def _leaves(module: nn.Module):
    for name, m in module.named_modules():
        if not any(True for _ in m.children()):
            yield name, m


def measure_forward_flops(module: nn.Module, input_shape: Sequence[int]) -> int:
    """2 x multiply-accumulates of every conv/linear layer for one input of ``input_shape``.

    A ``Branch`` is run encoder -> projector -> predictor. Normalization,
    activations and pooling count as free; any other layer type is rejected.
    """
    unsupported = [f"{n or '<root>'}: {type(m).__name__}" for n, m in _leaves(module) if not isinstance(m, (nn.Conv2d, nn.Linear) + _FREE)]
    if unsupported:
        raise AccountingError("unsupported layers: " + ", ".join(unsupported))

    total = 0

    def conv_hook(m: nn.Conv2d, inp, out):
        nonlocal total
        per_out = (m.in_channels // m.groups) * m.kernel_size[0] * m.kernel_size[1]
        total += 2 * out.numel() * per_out

    def linear_hook(m: nn.Linear, inp, out):
        nonlocal total
        total += 2 * (inp[0].numel() // m.in_features) * m.in_features * m.out_features

    handles = []
    for _, m in _leaves(module):
        if isinstance(m, nn.Conv2d):
            handles.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            handles.append(m.register_forward_hook(linear_hook))
    was_training = module.training
    module.eval()
    try:
        with torch.no_grad():
            x = torch.zeros(1, *input_shape)
            if isinstance(module, Branch):
                _, z = module(x)
                if module.predictor is not None:
                    module.predictor(z)
            else:
                module(x)
    finally:
        for h in handles:
            h.remove()
        module.train(was_training)
    return total
