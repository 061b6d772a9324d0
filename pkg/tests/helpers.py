"""Independent oracles and scripted networks shared by the tests."""
from __future__ import annotations

import itertools

import torch
import torch.nn as nn


def closed_walks(n: int, length: int, start: int) -> list[tuple[int, ...]]:
    """Every walk of ``length`` edges on the path graph 0-1-...-(n-1) returning to ``start``."""
    out = []
    for moves in itertools.product((-1, 1), repeat=length):
        pos, walk = start, [start]
        for m in moves:
            pos += m
            if not 0 <= pos < n:
                break
            walk.append(pos)
        else:
            if pos == start:
                out.append(tuple(walk))
    return out


def single_turn(walk) -> bool:
    diffs = [b - a for a, b in zip(walk, walk[1:])]
    return sum(1 for a, b in zip(diffs, diffs[1:]) if a != b) == 1


def brute_force_cycles(n: int) -> tuple[set, set]:
    """(local, global) cycle step-sets of an n-domain chain by exhaustive walk search."""
    local = {w for s in range(n) for w in closed_walks(n, 2, s)}
    glob = {
        w
        for s in range(n)
        for w in closed_walks(n, 2 * (n - 1), s)
        if set(w) == set(range(n)) and single_turn(w)
    }
    return local, glob - local


def analytic_generator_params(in_ch: int, width: int, n_res: int, n_down: int) -> int:
    """Sum of k*k*c_in*c_out + c_out over the declared conv layers (norms carry no weights)."""
    layers = [(7, in_ch, width)]
    c = width
    for _ in range(n_down):
        layers.append((3, c, 2 * c))
        c *= 2
    layers += [(3, c, c)] * (2 * n_res)
    for _ in range(n_down):
        layers.append((3, c, c // 2))
        c //= 2
    layers.append((7, c, in_ch))
    return sum(k * k * ci * co + co for k, ci, co in layers)


class Shift(nn.Module):
    def __init__(self, c: float = 0.0):
        super().__init__()
        self.c = c

    def forward(self, x):
        return x + self.c


class AddAtPixel(nn.Module):
    def __init__(self, value: float, index=(0, 0)):
        super().__init__()
        self.value, self.index = value, index

    def forward(self, x):
        y = x.clone()
        y[..., self.index[0], self.index[1]] += self.value
        return y


class ConstScore(nn.Module):
    """Patch score map filled with one value (a logit for the log form)."""

    def __init__(self, score: float, side: int = 2):
        super().__init__()
        self.score, self.side = score, side

    def forward(self, x):
        return torch.full((x.shape[0], 1, self.side, self.side), self.score, dtype=x.dtype)


class MeanScore(nn.Module):
    """Score = per-image mean pixel, broadcast over a 2x2 patch map."""

    def forward(self, x):
        return x.mean(dim=(1, 2, 3), keepdim=True).expand(-1, 1, 2, 2)


class TinyGenerator(nn.Module):
    def __init__(self, seed: int):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.c1 = nn.Conv2d(1, 2, 3, padding=1)
        self.c2 = nn.Conv2d(2, 1, 3, padding=1)
        for p in self.parameters():
            with torch.no_grad():
                p.copy_(torch.randn(p.shape, generator=g) * 0.5)

    def forward(self, x):
        return self.c2(torch.tanh(self.c1(x)))


class TinyDiscriminator(nn.Module):
    def __init__(self, seed: int):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.c1 = nn.Conv2d(1, 2, 3, stride=2, padding=1)
        self.c2 = nn.Conv2d(2, 1, 1)
        for p in self.parameters():
            with torch.no_grad():
                p.copy_(torch.randn(p.shape, generator=g) * 0.5)

    def forward(self, x):
        return self.c2(torch.tanh(self.c1(x)))
