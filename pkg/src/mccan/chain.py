"""Domain chains, cycles, half-paths and discriminator bindings.

A chain is an ordered list of image domains from noisiest (index 0) to
cleanest (index N-1). Generators exist only between adjacent domains, in
both directions. Everything here is pure and deterministic.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

DEFAULT_NAMES = {2: ("X", "Y"), 3: ("X", "Z", "Y")}


class ChainError(ValueError):
    pass


class ModeMismatchError(ChainError):
    pass


class ExperimentMode(str, enum.Enum):
    CCADN = "ccadn"
    MCCAN = "mccan"
    MCCAN_NO_LOCAL = "mccan_no_local"
    MCCAN_NO_GLOBAL = "mccan_no_global"

    @classmethod
    def parse(cls, value: "str | ExperimentMode") -> "ExperimentMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower().replace("-", "_"))
        except ValueError:
            choices = ", ".join(m.value for m in cls)
            raise ChainError(f"unknown mode {value!r} (expected one of {choices})") from None


class CycleKind(str, enum.Enum):
    LOCAL = "local"
    GLOBAL = "global"


@dataclass(frozen=True)
class DomainChain:
    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) < 2:
            raise ChainError(f"a chain needs at least 2 domains, got {len(self.names)}")
        if len(set(self.names)) != len(self.names):
            raise ChainError(f"domain names must be unique: {self.names}")

    def __len__(self) -> int:
        return len(self.names)

    @property
    def domains(self) -> tuple[int, ...]:
        return tuple(range(len(self.names)))

    @property
    def head(self) -> int:
        return 0

    @property
    def tail(self) -> int:
        return len(self.names) - 1

    def adjacent(self, a: int, b: int) -> bool:
        return abs(a - b) == 1 and 0 <= min(a, b) and max(a, b) < len(self.names)

    def generator_slots(self) -> list[tuple[int, int]]:
        """Ordered (source, target) pairs, forward then backward per adjacent pair."""
        slots = []
        for k in range(len(self.names) - 1):
            slots.append((k, k + 1))
            slots.append((k + 1, k))
        return slots

    def index(self, name_or_id: "str | int") -> int:
        if isinstance(name_or_id, int):
            if not 0 <= name_or_id < len(self.names):
                raise ChainError(f"domain {name_or_id} not in chain of length {len(self.names)}")
            return name_or_id
        try:
            return self.names.index(name_or_id)
        except ValueError:
            raise ChainError(f"unknown domain {name_or_id!r}; chain is {self.names}") from None

    def label(self, steps: Sequence[int]) -> str:
        return "->".join(self.names[s] for s in steps)


@dataclass(frozen=True)
class Path:
    steps: tuple[int, ...]

    def __post_init__(self):
        if len(self.steps) < 2:
            raise ChainError(f"a path needs at least 2 steps: {self.steps}")
        for a, b in zip(self.steps, self.steps[1:]):
            if abs(a - b) != 1:
                raise ChainError(f"path {self.steps} uses a non-adjacent step {a}->{b}")

    @property
    def source(self) -> int:
        return self.steps[0]

    @property
    def target(self) -> int:
        return self.steps[-1]

    def edges(self) -> list[tuple[int, int]]:
        return list(zip(self.steps, self.steps[1:]))


@dataclass(frozen=True)
class Cycle:
    steps: tuple[int, ...]
    kind: CycleKind

    def __post_init__(self):
        s = self.steps
        if len(s) < 3 or len(s) % 2 == 0 or s[0] != s[-1]:
            raise ChainError(f"not a closed out-and-back walk: {s}")
        m = len(s) // 2
        if s[: m + 1] != tuple(reversed(s[m:])):
            raise ChainError(f"cycle {s} is not symmetric about its turning point")
        Path(s)  # adjacency check

    @property
    def source(self) -> int:
        return self.steps[0]

    @property
    def turning_point(self) -> int:
        return len(self.steps) // 2

    def edges(self) -> list[tuple[int, int]]:
        return list(zip(self.steps, self.steps[1:]))


@dataclass(frozen=True)
class DiscriminatorBinding:
    """One discriminator: the domain whose reals it sees and the paths whose fakes it judges."""

    key: str
    domain: int
    paths: tuple[Path, ...]


def build_chain(n_domains: int, names: Sequence[str] | None = None) -> DomainChain:
    if n_domains < 2:
        raise ChainError(f"n_domains must be >= 2, got {n_domains}")
    if names is None:
        names = DEFAULT_NAMES.get(n_domains)
        if names is None:
            names = ["X"] + [f"Z{k}" for k in range(1, n_domains - 1)] + ["Y"]
    names = tuple(str(n) for n in names)
    if len(names) != n_domains:
        raise ChainError(f"expected {n_domains} names, got {len(names)}: {names}")
    return DomainChain(names)


def _local_cycles(chain: DomainChain) -> list[Cycle]:
    out = []
    for k in range(len(chain) - 1):
        out.append(Cycle((k, k + 1, k), CycleKind.LOCAL))
        out.append(Cycle((k + 1, k, k + 1), CycleKind.LOCAL))
    return out


def _global_cycles(chain: DomainChain) -> list[Cycle]:
    fwd = tuple(chain.domains)
    bwd = tuple(reversed(fwd))
    # span of one pair: identical to the local cycles, so tag them local
    kind = CycleKind.GLOBAL if len(chain) > 2 else CycleKind.LOCAL
    return [Cycle(fwd + bwd[1:], kind), Cycle(bwd + fwd[1:], kind)]


def enumerate_cycles(chain: DomainChain, mode: "ExperimentMode | str") -> list[Cycle]:
    mode = ExperimentMode.parse(mode)
    if mode is ExperimentMode.CCADN:
        if len(chain) != 2:
            raise ModeMismatchError(f"ccadn needs a 2-domain chain, got {len(chain)} domains")
        return _local_cycles(chain)
    if mode is ExperimentMode.MCCAN_NO_GLOBAL:
        return _local_cycles(chain)
    if mode is ExperimentMode.MCCAN_NO_LOCAL:
        return _global_cycles(chain)
    cycles, seen = [], set()
    for c in _local_cycles(chain) + _global_cycles(chain):
        if c.steps not in seen:
            seen.add(c.steps)
            cycles.append(c)
    return cycles


def half_paths(cycle: Cycle) -> tuple[Path, Path]:
    m = cycle.turning_point
    return Path(cycle.steps[: m + 1]), Path(cycle.steps[m:])


def active_paths(chain: DomainChain, mode: "ExperimentMode | str") -> list[Path]:
    """Every distinct half-path of the mode's cycles, in first-seen order."""
    out, seen = [], set()
    for c in enumerate_cycles(chain, mode):
        for p in half_paths(c):
            if p.steps not in seen:
                seen.add(p.steps)
                out.append(p)
    return out


def paths_ending_at(chain: DomainChain, mode: "ExperimentMode | str", domain: "int | str") -> list[Path]:
    d = chain.index(domain)
    return [p for p in active_paths(chain, mode) if p.target == d]


def discriminator_bindings(chain: DomainChain, mode: "ExperimentMode | str") -> list[DiscriminatorBinding]:
    """Discriminators in domain order.

    Without global cycles an interior domain gets one discriminator per
    neighbouring local pair, so the two local systems never share one.
    """
    mode = ExperimentMode.parse(mode)
    bindings = []
    for d in chain.domains:
        paths = paths_ending_at(chain, mode, d)
        name = chain.names[d]
        split = mode is ExperimentMode.MCCAN_NO_GLOBAL and 0 < d < chain.tail
        if split:
            for nb in (d - 1, d + 1):
                bound = tuple(p for p in paths if p.source == nb)
                bindings.append(DiscriminatorBinding(f"D_{name}@{chain.names[nb]}", d, bound))
        else:
            bindings.append(DiscriminatorBinding(f"D_{name}", d, tuple(paths)))
    return bindings


def discriminator_assignment(chain: DomainChain, mode: "ExperimentMode | str") -> dict[int, int]:
    counts = {d: 0 for d in chain.domains}
    for b in discriminator_bindings(chain, mode):
        counts[b.domain] += 1
    return counts


def inference_path(chain: DomainChain) -> Path:
    """Noisy-to-clean direction through every domain."""
    return Path(tuple(chain.domains))


def plan_table(chain: DomainChain, mode: "ExperimentMode | str") -> str:
    """Human-readable dump of cycles, half-paths and discriminator bindings."""
    mode = ExperimentMode.parse(mode)
    lines = [f"mode={mode.value} chain={'/'.join(chain.names)}", "", "cycles:"]
    for i, c in enumerate(enumerate_cycles(chain, mode)):
        a, b = half_paths(c)
        lines.append(
            f"  C{i:<3d} {c.kind.value:<6s} {chain.label(c.steps):<24s} "
            f"halves: {chain.label(a.steps)} | {chain.label(b.steps)}"
        )
    lines += ["", "discriminators:"]
    for b in discriminator_bindings(chain, mode):
        judged = ", ".join(chain.label(p.steps) for p in b.paths)
        lines.append(f"  {b.key:<10s} judges: {judged}")
    return "\n".join(lines)
