"""Run configuration: one JSON-serializable tree mirroring every hyperparameter."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field

from .losses import LossWeights


@dataclass
class ObjectNetConfig:
    phase_epochs: tuple = (1000, 1000, 1000)
    test_phase_epochs: tuple = (800, 800, 800)
    batch_size: int = 128
    latent_size: int = 256
    hidden: int = 1024
    var_weight: float = 5.0
    scl_weight_phase1: float = 2.0
    scl_weight_phase3: float = 0.02
    recon_weight_phase2: float = 1.0
    position_tether: float = 3.0
    scale_tether: float = 30.0
    radius_scale: float = 1.3
    phase3_lr_factor: float = 0.2
    latent_reg: float = 1e-4


@dataclass
class CompletionConfig:
    iterations: int = 600
    lr: float = 0.01
    lr_halving_period: int = 200
    refine_iterations: int = 100
    refine_lr: float = 0.001
    samples_per_iteration: int = 8000
    free_space_fraction: float = 0.3
    near_sigma: float = 0.005
    free_space_guard: float = 0.02
    free_space_weight: float = 1.0
    latent_reg: float = 1e-4


@dataclass
class TrainConfig:
    n_patches: int = 30
    latent_size: int = 128
    epochs: int = 1000
    lr_net: float = 5e-4
    lr_codes: float = 1e-3
    lr_halving_period: int = 200
    batch_size: int = 64
    samples_per_object: int = 3000
    steps_per_epoch: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    reg_ramp_epochs: int = 400
    seed: int = 0
    fixed_extrinsics: bool = False
    mixture_recon: bool = False
    baseline_mode: bool = False
    scale_sdf: bool = False
    surface_samples: int = 10_000
    fit_epochs: int = 1000
    checkpoint_every: int = 0
    objectnet: ObjectNetConfig = field(default_factory=ObjectNetConfig)
    completion: CompletionConfig = field(default_factory=CompletionConfig)

    def __post_init__(self):
        for name in ("n_patches", "latent_size", "epochs", "batch_size",
                     "samples_per_object", "steps_per_epoch", "lr_halving_period", "surface_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr_net <= 0 or self.lr_codes <= 0:
            raise ValueError("learning rates must be positive")

    # schedules -------------------------------------------------------------

    def lr_at(self, base, epoch, period=None):
        return base * 0.5 ** (epoch // (period or self.lr_halving_period))

    def reg_at(self, epoch):
        if self.reg_ramp_epochs <= 0:
            return self.weights.reg
        return self.weights.reg * min(1.0, epoch / self.reg_ramp_epochs)

    @property
    def baseline_latent_size(self):
        return self.n_patches * (self.latent_size + 7)

    # serialization ---------------------------------------------------------

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "objectnet" in d:
            on = dict(d["objectnet"])
            for k in ("phase_epochs", "test_phase_epochs"):
                if k in on:
                    on[k] = tuple(on[k])
            d["objectnet"] = ObjectNetConfig(**on)
        if "completion" in d:
            d["completion"] = CompletionConfig(**d["completion"])
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())
