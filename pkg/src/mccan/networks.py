"""Generators, patch discriminators and parameter/FLOP accounting."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import Mapping

import torch
import torch.nn as nn

from .chain import DiscriminatorBinding, DomainChain, ExperimentMode, discriminator_bindings

# Native slice side used when quoting inference FLOPs.
DEFAULT_FLOP_SIDE = 512


class NetworkSpecError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int = 1
    base_width: int = 64
    n_resblocks: int = 9
    n_down: int = 2
    crop_size: int = 256
    # Add the input to the tanh head's output (clamped to [-1, 1]) and start the
    # head at zero, so an untrained generator is the identity. Instance
    # normalisation discards each crop's absolute level, so without this path
    # a nearly uniform crop cannot be mapped back to its calibrated intensity.
    global_skip: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.base_width < 1:
            raise NetworkSpecError(f"channel counts must be positive: {self}")
        if self.n_resblocks < 1:
            raise NetworkSpecError(f"n_resblocks must be >= 1, got {self.n_resblocks}")
        if self.n_down < 0:
            raise NetworkSpecError(f"n_down must be >= 0, got {self.n_down}")
        if self.crop_size % (2 ** self.n_down):
            raise NetworkSpecError(f"crop_size {self.crop_size} not divisible by 2**{self.n_down}")

    @property
    def bottleneck_width(self) -> int:
        return self.base_width * 2 ** self.n_down


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 1
    base_width: int = 64
    n_layers: int = 4

    def __post_init__(self):
        if self.n_layers < 1:
            raise NetworkSpecError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.in_channels < 1 or self.base_width < 1:
            raise NetworkSpecError(f"channel counts must be positive: {self}")


# Both families share the stem; only the residual trunk differs.
CCADN_GENERATOR = GeneratorSpec(n_resblocks=9)
MCCAN_GENERATOR = GeneratorSpec(n_resblocks=4)


def default_generator_spec(mode: "ExperimentMode | str") -> GeneratorSpec:
    mode = ExperimentMode.parse(mode)
    return CCADN_GENERATOR if mode is ExperimentMode.CCADN else MCCAN_GENERATOR


class ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(width, width, 3),
            nn.InstanceNorm2d(width),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(width, width, 3),
            nn.InstanceNorm2d(width),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Residual encoder/decoder; output in [-1, 1] with the input's shape."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(spec.in_channels, w, 7),
            nn.InstanceNorm2d(w),
            nn.ReLU(inplace=True),
        ]
        for i in range(spec.n_down):
            c = w * 2 ** i
            layers += [nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.InstanceNorm2d(2 * c), nn.ReLU(inplace=True)]
        layers += [ResBlock(spec.bottleneck_width) for _ in range(spec.n_resblocks)]
        for i in reversed(range(spec.n_down)):
            c = w * 2 ** (i + 1)
            layers += [
                nn.ConvTranspose2d(c, c // 2, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(c // 2),
                nn.ReLU(inplace=True),
            ]
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(w, spec.in_channels, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        y = self.model(x)
        if self.spec.global_skip:
            return (x + y).clamp(-1.0, 1.0)
        return y


class PatchDiscriminator(nn.Module):
    """Strided conv stack; each layer halves the side, then a 1-channel score map."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        layers: list[nn.Module] = []
        c_in, c_out = spec.in_channels, spec.base_width
        for i in range(spec.n_layers):
            layers.append(nn.Conv2d(c_in, c_out, 4, stride=2, padding=1))
            if i > 0:
                layers.append(nn.InstanceNorm2d(c_out))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            c_in, c_out = c_out, min(2 * c_out, 8 * spec.base_width)
        layers.append(nn.Conv2d(c_in, 1, 3, stride=1, padding=1))
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


def _init_weights(net: nn.Module, seed: int | None) -> nn.Module:
    gen = None
    if seed is not None:
        gen = torch.Generator().manual_seed(int(seed))
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, 0.02, generator=gen)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return net


def make_generator(spec: GeneratorSpec, seed: int | None = None) -> Generator:
    net = _init_weights(Generator(spec), seed)
    if spec.global_skip:
        nn.init.zeros_(net.model[-2].weight)
    return net


def make_discriminator(spec: DiscriminatorSpec, seed: int | None = None) -> PatchDiscriminator:
    return _init_weights(PatchDiscriminator(spec), seed)


def count_params(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


@dataclass(frozen=True)
class FlopCount:
    flops: int
    macs: int
    input_side: int


def estimate_flops(net: nn.Module, input_side: int, in_channels: int | None = None) -> FlopCount:
    """Convolution FLOPs for one image at ``input_side``; one MAC counts as 2 FLOPs.

    Shapes are propagated on the meta device, so no arithmetic is performed.
    """
    if input_side <= 0:
        raise ValueError(f"input_side must be positive, got {input_side}")
    if in_channels is None:
        spec = getattr(net, "spec", None)
        in_channels = getattr(spec, "in_channels", 1)
    probe = copy.deepcopy(net).to("meta")
    macs = 0

    def hook(mod, inputs, output):
        nonlocal macs
        k = mod.kernel_size[0] * mod.kernel_size[1]
        if isinstance(mod, nn.ConvTranspose2d):
            # every input pixel scatters a full kernel
            x = inputs[0]
            macs += x.shape[-2] * x.shape[-1] * k * mod.in_channels * mod.out_channels // mod.groups
        else:
            macs += output.shape[-2] * output.shape[-1] * k * mod.in_channels * mod.out_channels // mod.groups

    handles = [
        m.register_forward_hook(hook)
        for m in probe.modules()
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d))
    ]
    try:
        with torch.no_grad():
            probe(torch.empty(1, in_channels, input_side, input_side, device="meta"))
    finally:
        for h in handles:
            h.remove()
    return FlopCount(flops=2 * macs, macs=macs, input_side=input_side)


@dataclass(frozen=True)
class BudgetReport:
    mode: str
    params_per_generator: int
    n_inference_generators: int
    total_inference_params: int
    total_inference_flops: int
    input_side: int


def inference_budget(
    mode: "ExperimentMode | str",
    spec: GeneratorSpec | None = None,
    n_domains: int | None = None,
    input_side: int = DEFAULT_FLOP_SIDE,
) -> BudgetReport:
    """Parameters and FLOPs of the generators used at inference (noisy to clean)."""
    mode = ExperimentMode.parse(mode)
    if spec is None:
        spec = default_generator_spec(mode)
    if n_domains is None:
        n_domains = 2 if mode is ExperimentMode.CCADN else 3
    net = make_generator(spec, seed=0)
    per_gen = count_params(net)
    flops = estimate_flops(net, input_side).flops
    n_gen = n_domains - 1
    return BudgetReport(mode.value, per_gen, n_gen, n_gen * per_gen, n_gen * flops, input_side)


class NetworkSet(nn.Module):
    """All generators and discriminators of one experiment.

    Generators are keyed by (source, target) domain index; discriminators by
    binding key (``D_Z`` or, without global cycles, ``D_Z@X``/``D_Z@Y``).
    """

    def __init__(
        self,
        generators: Mapping[tuple[int, int], nn.Module],
        discriminators: Mapping[str, nn.Module] | None = None,
        bindings: list[DiscriminatorBinding] | None = None,
    ):
        super().__init__()
        self.generators = nn.ModuleDict({f"G_{a}_{b}": g for (a, b), g in generators.items()})
        self.discriminators = nn.ModuleDict(dict(discriminators or {}))
        self.bindings = list(bindings or [])
        self._slots = {f"G_{a}_{b}": (a, b) for (a, b) in generators}

    def generator(self, src: int, dst: int) -> nn.Module:
        key = f"G_{src}_{dst}"
        if key not in self.generators:
            raise KeyError(f"no generator for step {src}->{dst}")
        return self.generators[key]

    def has_generator(self, src: int, dst: int) -> bool:
        return f"G_{src}_{dst}" in self.generators

    def generator_items(self) -> list[tuple[tuple[int, int], nn.Module]]:
        return [(self._slots[k], g) for k, g in self.generators.items()]

    def discriminator(self, key: str) -> nn.Module:
        return self.discriminators[key]

    def binding_for(self, path) -> DiscriminatorBinding:
        for b in self.bindings:
            if path in b.paths:
                return b
        raise KeyError(f"no discriminator judges path {path.steps}")


def build_networks(
    chain: DomainChain,
    mode: "ExperimentMode | str",
    gen_spec: GeneratorSpec,
    disc_spec: DiscriminatorSpec,
    seed: int = 0,
) -> NetworkSet:
    """Instantiate every network of the experiment.

    Seeds depend only on slot position, so two modes sharing a chain and specs
    start from identical weights.
    """
    gens = {slot: make_generator(gen_spec, seed=seed * 1000 + i) for i, slot in enumerate(chain.generator_slots())}
    bindings = discriminator_bindings(chain, mode)
    discs = {b.key: make_discriminator(disc_spec, seed=seed * 1000 + 500 + i) for i, b in enumerate(bindings)}
    return NetworkSet(gens, discs, bindings)


def spec_dict(spec) -> dict:
    return asdict(spec)
