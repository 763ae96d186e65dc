"""Trainable pieces the strategies add on top of an encoder bundle."""

from __future__ import annotations

import math

import torch
import torch.nn as nn


def _uniform_(t: torch.Tensor, bound: float, g: torch.Generator) -> None:
    with torch.no_grad():
        t.copy_((torch.rand(t.shape, generator=g, dtype=torch.float64) * 2 - 1) * bound)


class Conditioner(nn.Module):
    """MLP from intermediate image features to ``n_p`` token embeddings.

    ``layers`` linear maps with GELU between them; hidden width defaults to
    ``d_i``. Weights are uniform in ``+-1/sqrt(fan_in)``, hidden biases likewise,
    and the final bias starts at zero. Output ``(B, n_p * d_t)`` is reshaped
    row-major to ``(B, n_p, d_t)``.
    """

    def __init__(self, d_i: int, n_p: int, d_t: int, layers: int = 2, hidden: int | None = None,
                 generator: torch.Generator | None = None):
        super().__init__()
        if layers < 1:
            raise ValueError("conditioner needs at least one layer")
        if n_p < 0:
            raise ValueError("n_p must be >= 0")
        self.d_i, self.n_p, self.d_t = d_i, n_p, d_t
        hidden = hidden or d_i
        g = generator or torch.Generator().manual_seed(0)
        widths = [d_i] + [hidden] * (layers - 1) + [n_p * d_t]
        mods: list[nn.Module] = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            lin = nn.Linear(fan_in, fan_out)
            _uniform_(lin.weight, 1 / math.sqrt(fan_in), g)
            if i == layers - 1:
                nn.init.zeros_(lin.bias)
            else:
                _uniform_(lin.bias, 1 / math.sqrt(fan_in), g)
            mods.append(lin)
            if i < layers - 1:
                mods.append(nn.GELU())
        self.net = nn.Sequential(*mods)

    @property
    def out_dim(self) -> int:
        return self.n_p * self.d_t

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.shape[-1] != self.d_i:
            raise ValueError(f"conditioner expects width {self.d_i}, got {feats.shape[-1]}")
        return self.net(feats).reshape(feats.shape[0], self.n_p, self.d_t)


class ClassifierHead(nn.Linear):
    """Linear map from shared features to ``K`` class logits."""

    def __init__(self, c_f: int, n_classes: int, generator: torch.Generator | None = None):
        super().__init__(c_f, n_classes)
        g = generator or torch.Generator().manual_seed(0)
        _uniform_(self.weight, 1 / math.sqrt(c_f), g)
        nn.init.zeros_(self.bias)


class LogitScale(nn.Module):
    """Temperature stored as a log; the applied multiplier is clamped to [1, 100]."""

    MIN, MAX = 1.0, 100.0

    def __init__(self, init: float = 1 / 0.07, learnable: bool = True):
        super().__init__()
        if not self.MIN <= init <= self.MAX:
            raise ValueError(f"initial logit scale must lie in [{self.MIN}, {self.MAX}]")
        self.log_scale = nn.Parameter(torch.tensor(math.log(init)), requires_grad=learnable)

    def forward(self) -> torch.Tensor:
        return self.log_scale.exp().clamp(self.MIN, self.MAX)
