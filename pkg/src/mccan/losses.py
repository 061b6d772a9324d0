"""Adversarial, cycle-consistency and identity losses over a domain chain.

Adversarial values follow the discriminator's point of view: the value a
discriminator ascends. With ``form="log"`` that is

    mean(log D(real)) + mean(log(1 - D(fake)))

where D(.) = sigmoid(score). With ``form="lsq"`` it is the negated
least-squares discriminator loss

    -(mean((score(real) - 1)^2) + mean(score(fake)^2))

Both are 0 for a perfect discriminator. Generators descend
``generator_adversarial_term`` instead, which for the log form is the
literal minimax objective (the real half has no generator gradient) and for
the least-squares form is ``mean((score(fake) - 1)^2)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal, Mapping, MutableMapping

import torch
import torch.nn.functional as F

from .chain import Cycle, DomainChain, Path, active_paths, discriminator_bindings, enumerate_cycles
from .networks import NetworkSet

AdversarialForm = Literal["log", "lsq"]
ADV_FORMS = ("log", "lsq")


class LossConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_cyc: float = 10.0
    lambda_idt: float = 0.5

    def __post_init__(self):
        if self.lambda_cyc < 0 or self.lambda_idt < 0:
            raise LossConfigError(f"loss weights must be non-negative: {self}")


@dataclass
class LossBreakdown:
    adversarial_total: torch.Tensor
    per_cycle_consistency: dict[Cycle, torch.Tensor]
    identity_total: torch.Tensor
    composite: torch.Tensor
    weights: LossWeights = field(default_factory=LossWeights)

    @property
    def cycle_total(self) -> torch.Tensor:
        if not self.per_cycle_consistency:
            return self.composite.new_zeros(())
        return torch.stack(list(self.per_cycle_consistency.values())).sum()

    def as_record(self, chain: DomainChain) -> dict:
        return {
            "adversarial": float(self.adversarial_total.detach()),
            "cycle": {chain.label(c.steps): float(v.detach()) for c, v in self.per_cycle_consistency.items()},
            "identity": float(self.identity_total.detach()),
            "composite": float(self.composite.detach()),
        }


def _check_form(form: str) -> None:
    if form not in ADV_FORMS:
        raise LossConfigError(f"adversarial form must be one of {ADV_FORMS}, got {form!r}")


def _nonempty(batch: torch.Tensor, what: str) -> None:
    if batch.ndim == 0 or batch.shape[0] == 0:
        raise LossConfigError(f"{what} batch is empty")


def adversarial_term(
    disc: Callable[[torch.Tensor], torch.Tensor],
    real_batch: torch.Tensor,
    fake_batch: torch.Tensor,
    form: AdversarialForm = "log",
) -> torch.Tensor:
    _check_form(form)
    _nonempty(real_batch, "real")
    _nonempty(fake_batch, "fake")
    if real_batch.shape[1:] != fake_batch.shape[1:]:
        raise LossConfigError(f"real/fake shapes differ: {tuple(real_batch.shape)} vs {tuple(fake_batch.shape)}")
    s_real, s_fake = disc(real_batch), disc(fake_batch)
    if form == "log":
        return F.logsigmoid(s_real).mean() + F.logsigmoid(-s_fake).mean()
    return -(((s_real - 1) ** 2).mean() + (s_fake ** 2).mean())


def generator_adversarial_term(
    disc: Callable[[torch.Tensor], torch.Tensor],
    real_batch: torch.Tensor,
    fake_batch: torch.Tensor,
    form: AdversarialForm = "log",
) -> torch.Tensor:
    """What the generators minimise for one (domain, path) pair."""
    if form == "log":
        return adversarial_term(disc, real_batch, fake_batch, "log")
    _check_form(form)
    _nonempty(fake_batch, "fake")
    return ((disc(fake_batch) - 1) ** 2).mean()


def compose_path(
    steps: tuple[int, ...],
    nets: NetworkSet,
    batch: torch.Tensor,
    cache: MutableMapping[tuple[int, ...], torch.Tensor] | None = None,
) -> torch.Tensor:
    """Apply the generators along ``steps`` to ``batch`` (drawn from ``steps[0]``).

    With a cache, every prefix output is memoised so shared prefixes of
    different cycles and paths are computed once.
    """
    if cache is None:
        cache = {}
    if cache.setdefault(steps[:1], batch) is not batch:
        raise LossConfigError(f"cache holds a different batch for domain {steps[0]}")
    k = len(steps)
    while steps[:k] not in cache:
        k -= 1
    out = cache[steps[:k]]
    for i in range(k, len(steps)):
        a, b = steps[i - 1], steps[i]
        if not nets.has_generator(a, b):
            raise LossConfigError(f"no generator for step {a}->{b}")
        out = nets.generator(a, b)(out)
        cache[steps[: i + 1]] = out
    return out


def adversarial_pairs(chain: DomainChain, mode) -> list[tuple[str, Path]]:
    """(discriminator key, path) for every adversarial term of the mode."""
    paths = active_paths(chain, mode)
    pairs = []
    for b in discriminator_bindings(chain, mode):
        for p in paths:
            if p in b.paths:
                pairs.append((b.key, p))
    return pairs


def total_adversarial(
    chain: DomainChain,
    mode,
    nets: NetworkSet,
    batches: Mapping[int, torch.Tensor],
    form: AdversarialForm = "log",
    side: Literal["discriminator", "generator"] = "discriminator",
    cache: MutableMapping | None = None,
) -> torch.Tensor:
    """Sum of adversarial terms over every (terminal domain, half-path) of the mode."""
    term = adversarial_term if side == "discriminator" else generator_adversarial_term
    if cache is None:
        cache = {}
    total = None
    for key, path in adversarial_pairs(chain, mode):
        fake = compose_path(path.steps, nets, _batch(batches, path.source), cache)
        v = term(nets.discriminator(key), _batch(batches, path.target), fake, form)
        total = v if total is None else total + v
    if total is None:
        raise LossConfigError("mode has no adversarial terms")
    return total


def cycle_consistency(
    cycle: Cycle,
    nets: NetworkSet,
    source_batch: torch.Tensor,
    cache: MutableMapping | None = None,
) -> torch.Tensor:
    out = compose_path(cycle.steps, nets, source_batch, cache)
    if out.shape != source_batch.shape:
        raise LossConfigError(f"round trip changed shape {tuple(source_batch.shape)} -> {tuple(out.shape)}")
    return (out - source_batch).abs().mean()


def identity_term(nets: NetworkSet, batches: Mapping[int, torch.Tensor]) -> torch.Tensor:
    total = None
    for (src, dst), g in nets.generator_items():
        x = _batch(batches, dst)
        v = (g(x) - x).abs().mean()
        total = v if total is None else total + v
    if total is None:
        return torch.zeros(())
    return total


def composite_objective(
    chain: DomainChain,
    mode,
    nets: NetworkSet,
    batches: Mapping[int, torch.Tensor],
    weights: LossWeights = LossWeights(),
    form: AdversarialForm = "lsq",
    cache: MutableMapping | None = None,
) -> LossBreakdown:
    """Generator-side objective: adversarial + lambda_cyc * sum(cycles) + lambda_idt * identity."""
    if cache is None:
        cache = {}
    adv = total_adversarial(chain, mode, nets, batches, form, side="generator", cache=cache)
    per_cycle = {}
    for c in enumerate_cycles(chain, mode):
        per_cycle[c] = cycle_consistency(c, nets, _batch(batches, c.source), cache)
    idt = identity_term(nets, batches)
    cyc = torch.stack(list(per_cycle.values())).sum() if per_cycle else adv.new_zeros(())
    composite = adv + weights.lambda_cyc * cyc + weights.lambda_idt * idt
    return LossBreakdown(adv, per_cycle, idt, composite, weights)


def _batch(batches: Mapping[int, torch.Tensor], domain: int) -> torch.Tensor:
    try:
        return batches[domain]
    except KeyError:
        raise LossConfigError(f"no batch for domain {domain}") from None

