"""Adversarial min-max training for every experiment mode.

Each step updates all discriminators on (real batch, replayed fakes), then
all generators jointly on the composite objective with the discriminators
frozen. Runs are bit-reproducible on a single thread for a fixed seed.
"""
from __future__ import annotations

import configparser
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .chain import DomainChain, ExperimentMode, build_chain, discriminator_bindings
from .data import Dataset, batch_stream, to_unit
from .losses import (
    ADV_FORMS,
    LossWeights,
    adversarial_pairs,
    adversarial_term,
    composite_objective,
    compose_path,
)
from .networks import (
    DiscriminatorSpec,
    GeneratorSpec,
    NetworkSet,
    build_networks,
    default_generator_spec,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mccan-checkpoint/1"
CHECKPOINT_NAME = "checkpoint.pt"
LOG_NAME = "train_log.jsonl"


class TrainingError(RuntimeError):
    pass


class CheckpointError(TrainingError):
    pass


class TrainingDiverged(TrainingError):
    pass


@dataclass
class TrainConfig:
    mode: str = "mccan"
    n_domains: int = 3
    lambda_cyc: float = 10.0
    lambda_idt: float = 0.5
    adv_form: str = "lsq"
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epochs: int = 50
    decay_start: int | None = None  # epoch where linear decay begins; default epochs // 2
    batch_size: int = 1
    crop: int = 256
    buffer_capacity: int = 50
    seed: int = 0
    checkpoint_interval: int = 0  # steps; 0 writes only the final checkpoint
    steps_per_epoch: int | None = None  # default: largest domain / batch_size, rounded up
    base_width: int = 64
    n_resblocks: int | None = None  # default from mode: 9 for ccadn, 4 otherwise
    n_down: int = 2
    global_skip: bool = True
    disc_width: int = 64
    disc_layers: int = 4
    dtype: str = "float32"
    num_threads: int = 1
    max_nonfinite: int = 10

    def __post_init__(self):
        self.mode = ExperimentMode.parse(self.mode).value
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.buffer_capacity < 0:
            raise TrainingError("buffer_capacity must be >= 0")
        if self.adv_form not in ADV_FORMS:
            raise TrainingError(f"adv_form must be one of {ADV_FORMS}")
        if self.dtype not in ("float32", "float64"):
            raise TrainingError("dtype must be float32 or float64")
        if self.n_resblocks is None:
            self.n_resblocks = default_generator_spec(self.mode).n_resblocks
        if self.decay_start is None:
            self.decay_start = self.epochs // 2
        LossWeights(self.lambda_cyc, self.lambda_idt)
        self.generator_spec()
        self.discriminator_spec()

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_cyc, self.lambda_idt)

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def generator_spec(self) -> GeneratorSpec:
        return GeneratorSpec(1, self.base_width, self.n_resblocks, self.n_down, self.crop, self.global_skip)

    def discriminator_spec(self) -> DiscriminatorSpec:
        return DiscriminatorSpec(1, self.disc_width, self.disc_layers)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TrainingError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: "str | Path", **overrides) -> "TrainConfig":
        """Read a ``[train]`` section of ``key = value`` lines."""
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise TrainingError(f"cannot read config file {path}")
        if not parser.has_section("train"):
            raise TrainingError(f"{path}: missing [train] section")
        raw = dict(parser["train"])
        values = {}
        types = {f.name: f.type for f in fields(cls)}
        for k, v in raw.items():
            if k not in types:
                raise TrainingError(f"{path}: unknown key {k!r}")
            values[k] = _coerce(types[k], v)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(values)


def _coerce(type_name: str, text: str):
    text = text.strip()
    if text.lower() in ("none", ""):
        return None
    if type_name == "bool":
        if text.lower() not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
            raise TrainingError(f"expected a boolean, got {text!r}")
        return text.lower() in ("true", "yes", "1", "on")
    if "int" in type_name:
        return int(text)
    if "float" in type_name:
        return float(text)
    return text


class ReplayBuffer:
    """Pool of past fakes; once full, each query returns a stored fake with probability 1/2."""

    def __init__(self, capacity: int = 50, seed: "int | list[int]" = 0):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.images: list[torch.Tensor] = []
        self.rng = np.random.default_rng(np.random.SeedSequence(seed))

    def __len__(self):
        return len(self.images)

    def query(self, batch: torch.Tensor) -> torch.Tensor:
        if self.capacity == 0:
            return batch
        out = []
        for img in batch.detach():
            if len(self.images) < self.capacity:
                self.images.append(img.clone())
                out.append(img)
            elif self.rng.random() < 0.5:
                i = int(self.rng.integers(self.capacity))
                out.append(self.images[i].clone())
                self.images[i] = img.clone()
            else:
                out.append(img)
        return torch.stack(out)

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "images": list(self.images), "rng": self.rng.bit_generator.state}

    def load_state_dict(self, state: dict) -> None:
        self.capacity = int(state["capacity"])
        self.images = [t.clone() for t in state["images"]]
        self.rng.bit_generator.state = state["rng"]


def _lr_factor(epochs: int, decay_start: int):
    span = max(1, epochs - decay_start)

    def factor(epoch: int) -> float:
        if epoch < decay_start:
            return 1.0
        return max(0.0, (epochs - epoch) / span)

    return factor


class Trainer:
    def __init__(
        self,
        cfg: TrainConfig,
        dataset: Dataset,
        out_dir: "str | Path | None" = None,
        chain: DomainChain | None = None,
    ):
        self.cfg = cfg
        self.mode = ExperimentMode.parse(cfg.mode)
        if chain is None:
            names = dataset.domain_names if len(dataset.domain_names) == cfg.n_domains else None
            chain = build_chain(cfg.n_domains, names)
        self.chain = chain
        missing = [chain.names[d] for d in chain.domains if not dataset.domain_records(d)]
        if missing:
            raise TrainingError(f"dataset has no images for domain(s) {missing}")
        torch.set_num_threads(cfg.num_threads)
        self.dtype = cfg.torch_dtype
        self.nets: NetworkSet = build_networks(
            chain, self.mode, cfg.generator_spec(), cfg.discriminator_spec(), seed=cfg.seed
        ).to(self.dtype)
        gen_params = [p for _, g in self.nets.generator_items() for p in g.parameters()]
        self.g_opt = torch.optim.Adam(gen_params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
        self.d_opt = torch.optim.Adam(self.nets.discriminators.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
        factor = _lr_factor(cfg.epochs, cfg.decay_start)
        self.g_sched = torch.optim.lr_scheduler.LambdaLR(self.g_opt, factor)
        self.d_sched = torch.optim.lr_scheduler.LambdaLR(self.d_opt, factor)
        self.buffers = {
            b.key: ReplayBuffer(cfg.buffer_capacity, [cfg.seed, 7, i])
            for i, b in enumerate(discriminator_bindings(chain, self.mode))
        }
        self.streams = {d: batch_stream(dataset, d, cfg.batch_size, cfg.crop, cfg.seed) for d in chain.domains}
        largest = max(len(dataset.domain_records(d)) for d in chain.domains)
        self.steps_per_epoch = cfg.steps_per_epoch or math.ceil(largest / cfg.batch_size)
        self.total_steps = cfg.epochs * self.steps_per_epoch
        self.step = 0
        self.nonfinite = 0
        self.pairs = adversarial_pairs(chain, self.mode)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self._t0 = time.perf_counter()

    # -- one optimisation step ------------------------------------------------

    def _batches(self) -> dict[int, torch.Tensor]:
        return {
            d: torch.as_tensor(to_unit(next(s)), dtype=self.dtype).unsqueeze(1) for d, s in self.streams.items()
        }

    def _discriminators_trainable(self, flag: bool) -> None:
        for p in self.nets.discriminators.parameters():
            p.requires_grad_(flag)

    def train_step(self) -> dict:
        cfg, nets = self.cfg, self.nets
        batches = self._batches()
        cache: dict = {}
        fakes = [(key, path, compose_path(path.steps, nets, batches[path.source], cache)) for key, path in self.pairs]

        self._discriminators_trainable(True)
        self.d_opt.zero_grad(set_to_none=True)
        d_value = None
        for key, path, fake in fakes:
            replayed = self.buffers[key].query(fake.detach())
            v = adversarial_term(nets.discriminator(key), batches[path.target], replayed, cfg.adv_form)
            d_value = v if d_value is None else d_value + v
        if torch.isfinite(d_value):
            (-d_value).backward()
            self.d_opt.step()

        self._discriminators_trainable(False)
        self.g_opt.zero_grad(set_to_none=True)
        bd = composite_objective(self.chain, self.mode, nets, batches, cfg.weights, cfg.adv_form, cache=cache)
        finite = bool(torch.isfinite(bd.composite))
        if finite:
            bd.composite.backward()
            self.g_opt.step()
        self._discriminators_trainable(True)

        record = {
            "step": self.step,
            "epoch": self.step // self.steps_per_epoch,
            "lr": self.g_opt.param_groups[0]["lr"],
            "disc_objective": float(d_value.detach()),
            **bd.as_record(self.chain),
        }
        self.step += 1
        if self.step % self.steps_per_epoch == 0:
            self.g_sched.step()
            self.d_sched.step()
        self.nonfinite = 0 if finite else self.nonfinite + 1
        if self.nonfinite >= cfg.max_nonfinite:
            raise TrainingDiverged(
                f"composite loss non-finite for {self.nonfinite} consecutive steps (last record: {record})"
            )
        record["wall_time"] = time.perf_counter() - self._t0
        return record

    def run(self, max_steps: int | None = None, log_path: "str | Path | None" = None) -> Path | None:
        """Train until ``total_steps`` (or ``max_steps`` further steps); return the last checkpoint path."""
        end = self.total_steps if max_steps is None else min(self.total_steps, self.step + max_steps)
        if log_path is None and self.out_dir is not None:
            log_path = self.out_dir / LOG_NAME
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "a") if log_path is not None else None
        try:
            while self.step < end:
                record = self.train_step()
                if fh is not None:
                    fh.write(json.dumps(record) + "\n")
                if record["step"] % max(1, self.steps_per_epoch) == 0:
                    log.info("step %d/%d composite %.4f", record["step"], self.total_steps, record["composite"])
                interval = self.cfg.checkpoint_interval
                if self.out_dir is not None and interval and self.step % interval == 0 and self.step < end:
                    self.save(self.out_dir / f"checkpoint_{self.step:07d}.pt")
        finally:
            if fh is not None:
                fh.close()
        if self.out_dir is None:
            return None
        return self.save(self.out_dir / CHECKPOINT_NAME)

    # -- checkpoints ------------------------------------------------------------

    def state(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "mode": self.mode.value,
            "domain_names": list(self.chain.names),
            "config": self.cfg.to_dict(),
            "generator_spec": dataclasses.asdict(self.cfg.generator_spec()),
            "discriminator_spec": dataclasses.asdict(self.cfg.discriminator_spec()),
            "bindings": [
                {"key": b.key, "domain": b.domain, "paths": [list(p.steps) for p in b.paths]}
                for b in self.nets.bindings
            ],
            "generators": {k: g.state_dict() for k, g in self.nets.generators.items()},
            "discriminators": {k: d.state_dict() for k, d in self.nets.discriminators.items()},
            "g_opt": self.g_opt.state_dict(),
            "d_opt": self.d_opt.state_dict(),
            "g_sched": self.g_sched.state_dict(),
            "d_sched": self.d_sched.state_dict(),
            "buffers": {k: b.state_dict() for k, b in self.buffers.items()},
            "streams": {str(d): s.state_dict() for d, s in self.streams.items()},
            "step": self.step,
            "nonfinite": self.nonfinite,
        }

    def save(self, path: "str | Path") -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        torch.save(self.state(), tmp)
        os.replace(tmp, path)
        return path

    @classmethod
    def from_checkpoint(
        cls,
        path: "str | Path",
        dataset: Dataset,
        out_dir: "str | Path | None" = None,
        mode: "ExperimentMode | str | None" = None,
    ) -> "Trainer":
        state = load_checkpoint(path)
        if mode is not None and ExperimentMode.parse(mode).value != state["mode"]:
            raise CheckpointError(f"checkpoint was trained as {state['mode']!r}, refusing to resume as {mode!r}")
        cfg = TrainConfig.from_dict(state["config"])
        chain = build_chain(len(state["domain_names"]), state["domain_names"])
        trainer = cls(cfg, dataset, out_dir, chain=chain)
        for k, g in trainer.nets.generators.items():
            g.load_state_dict(state["generators"][k])
        for k, d in trainer.nets.discriminators.items():
            d.load_state_dict(state["discriminators"][k])
        trainer.g_opt.load_state_dict(state["g_opt"])
        trainer.d_opt.load_state_dict(state["d_opt"])
        trainer.g_sched.load_state_dict(state["g_sched"])
        trainer.d_sched.load_state_dict(state["d_sched"])
        for k, b in trainer.buffers.items():
            b.load_state_dict(state["buffers"][k])
        for d, s in trainer.streams.items():
            s.load_state_dict(state["streams"][str(d)])
        trainer.step = int(state["step"])
        trainer.nonfinite = int(state["nonfinite"])
        return trainer


def load_checkpoint(path: "str | Path") -> dict:
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types on garbage input
        raise CheckpointError(f"{path}: unreadable checkpoint ({type(exc).__name__}: {exc})") from None
    if not isinstance(state, dict) or state.get("format") != CHECKPOINT_FORMAT:
        found = state.get("format") if isinstance(state, dict) else type(state).__name__
        raise CheckpointError(f"{path}: format {found!r} is not {CHECKPOINT_FORMAT!r}")
    return state


@dataclass
class TrainedModel:
    """Networks restored from a checkpoint, ready for inference."""

    chain: DomainChain
    mode: ExperimentMode
    nets: NetworkSet
    config: TrainConfig
    state: dict = field(repr=False, default_factory=dict)

    @property
    def dtype(self) -> torch.dtype:
        return self.config.torch_dtype


def load_model(path: "str | Path") -> TrainedModel:
    state = load_checkpoint(path)
    cfg = TrainConfig.from_dict(state["config"])
    chain = build_chain(len(state["domain_names"]), state["domain_names"])
    mode = ExperimentMode.parse(state["mode"])
    nets = build_networks(chain, mode, cfg.generator_spec(), cfg.discriminator_spec(), seed=cfg.seed).to(
        cfg.torch_dtype
    )
    for k, g in nets.generators.items():
        g.load_state_dict(state["generators"][k])
    for k, d in nets.discriminators.items():
        d.load_state_dict(state["discriminators"][k])
    nets.eval()
    return TrainedModel(chain, mode, nets, cfg, state)


def train(
    cfg: TrainConfig, dataset: Dataset, out_dir: "str | Path", max_steps: int | None = None
) -> tuple[Path, Path]:
    """Train from scratch; returns (checkpoint path, log path)."""
    trainer = Trainer(cfg, dataset, out_dir)
    log_path = Path(out_dir) / LOG_NAME
    if log_path.exists():
        log_path.unlink()
    ckpt = trainer.run(max_steps=max_steps, log_path=log_path)
    return ckpt, log_path


def resume(
    checkpoint: "str | Path",
    dataset: Dataset,
    out_dir: "str | Path | None" = None,
    mode: "ExperimentMode | str | None" = None,
    max_steps: int | None = None,
) -> tuple[Path, Path]:
    out_dir = Path(out_dir) if out_dir is not None else Path(checkpoint).parent
    trainer = Trainer.from_checkpoint(checkpoint, dataset, out_dir, mode=mode)
    log_path = out_dir / LOG_NAME
    ckpt = trainer.run(max_steps=max_steps, log_path=log_path)
    return ckpt, log_path


def read_log(path: "str | Path") -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
