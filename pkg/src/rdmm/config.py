"""Registration settings and their JSON representation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .dynamics import IntegratorConfig
from .exceptions import InvalidParameterError
from .kernels import MultiGaussianKernel
from .objectives import RegPenaltyConfig, SimilarityConfig

__all__ = ["MODES", "OptimizerSettings", "RegistrationConfig", "default_config"]

MODES = ("lddmm", "rdmm_fixed", "rdmm_joint")


def canonical_mode(mode: str) -> str:
    key = str(mode).lower().replace("-", "_")
    if key not in MODES:
        raise InvalidParameterError(f"unknown mode {mode!r}; expected one of {MODES}")
    return key


@dataclass(frozen=True)
class OptimizerSettings:
    """Gradient descent with backtracking line search.

    ``step_size`` is the initial trial step applied to the volume-normalized
    gradient; after an accepted step the next trial starts at ``grow`` times
    the accepted one. ``preweight_step_scale`` rescales the pre-weight part of
    the search direction relative to the momentum part; the objective is far
    less sensitive to the pre-weights than to the momentum, so an unscaled
    joint step barely moves them. ``max_iterations`` caps the accepted steps
    summed over all scales.
    """

    step_size: float = 1.0
    max_iterations: int = 1000
    grad_tol: float = 1e-10
    shrink: float = 0.5
    grow: float = 1.5
    min_step: float = 1e-8
    armijo: float = 1e-4
    preweight_step_scale: float = 1e3

    def __post_init__(self):
        if not 0 < self.shrink < 1:
            raise InvalidParameterError("shrink must lie in (0, 1)")
        if self.step_size <= 0 or self.min_step <= 0:
            raise InvalidParameterError("step sizes must be positive")
        if self.preweight_step_scale <= 0:
            raise InvalidParameterError("preweight_step_scale must be positive")
        if self.max_iterations < 1:
            raise InvalidParameterError("max_iterations must be >= 1")


@dataclass(frozen=True)
class RegistrationConfig:
    mode: str = "rdmm_joint"
    scales: tuple = ((0.25, 100), (0.5, 100), (1.0, 400))
    kernel: MultiGaussianKernel = field(
        default_factory=lambda: MultiGaussianKernel((0.02, 0.04, 0.06, 0.08), 0.05)
    )
    penalties: RegPenaltyConfig = field(default_factory=RegPenaltyConfig)
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    lambda_kin: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mode", canonical_mode(self.mode))
        scales = tuple((float(f), int(n)) for f, n in self.scales)
        if not scales:
            raise InvalidParameterError("at least one scale is required")
        factors = [f for f, _ in scales]
        if any(b <= a for a, b in zip(factors, factors[1:])) or not 0 < factors[-1] <= 1.0:
            raise InvalidParameterError(f"scales must ascend towards 1.0, got {factors}")
        if any(n < 1 for _, n in scales):
            raise InvalidParameterError("iteration counts must be >= 1")
        if len(self.penalties.w0_sq) != self.kernel.n_kernels:
            raise InvalidParameterError("w0_sq needs one entry per Gaussian")
        object.__setattr__(self, "scales", scales)

    @property
    def optimizes_preweights(self) -> bool:
        return self.mode == "rdmm_joint"

    def with_updates(self, **changes) -> "RegistrationConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "scales": [list(s) for s in self.scales],
            "kernel": self.kernel.to_dict(),
            "penalties": self.penalties.to_dict(),
            "similarity": self.similarity.to_dict(),
            "integrator": {"n_steps": self.integrator.n_steps, "scheme": self.integrator.scheme},
            "optimizer": dict(self.optimizer.__dict__),
            "lambda_kin": self.lambda_kin,
        }

    @classmethod
    def from_dict(cls, data: dict, base: "RegistrationConfig | None" = None) -> "RegistrationConfig":
        """Build a config from (possibly partial) JSON data layered over ``base``."""
        data = dict(data)
        mode = data.get("mode", base.mode if base else "rdmm_joint")
        base = base or default_config(mode)
        unknown = set(data) - set(base.to_dict())
        if unknown:
            raise InvalidParameterError(f"unknown config keys: {sorted(unknown)}")
        kernel = base.kernel
        if "kernel" in data:
            kernel = MultiGaussianKernel(**{**kernel.to_dict(), **data["kernel"]})
        penalties = base.penalties
        if "penalties" in data:
            penalties = RegPenaltyConfig(**{**penalties.to_dict(), **data["penalties"]})
        sim = base.similarity
        if "similarity" in data:
            sim = SimilarityConfig(**{**sim.to_dict(), **data["similarity"]})
        integ = base.integrator
        if "integrator" in data:
            integ = IntegratorConfig(**{"n_steps": integ.n_steps, **data["integrator"]})
        opt = base.optimizer
        if "optimizer" in data:
            opt = OptimizerSettings(**{**opt.__dict__, **data["optimizer"]})
        return cls(
            mode=mode,
            scales=data.get("scales", base.scales),
            kernel=kernel,
            penalties=penalties,
            similarity=sim,
            integrator=integ,
            optimizer=opt,
            lambda_kin=float(data.get("lambda_kin", base.lambda_kin)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RegistrationConfig":
        return cls.from_dict(json.loads(text))


def default_config(mode: str = "rdmm_joint") -> RegistrationConfig:
    """Settings of the synthetic-data experiments for each mode.

    * ``rdmm_joint``: Gaussians {0.02, 0.04, 0.06, 0.08}, initial squared
      weights {0.1, 0.3, 0.3, 0.3}, C_range 10, C_omt 0.05, K 10, smoother
      0.05, and 100/100/400 iterations at scales 0.25/0.5/1.0.
    * ``lddmm``: the same kernel with the weights frozen.
    * ``rdmm_fixed``: Gaussians {0.03, 0.06, 0.09, 0.3}, smoother 0.02 and 60
      iterations per scale; the pre-weights come from the caller.
    """
    mode = canonical_mode(mode)
    if mode == "rdmm_fixed":
        return RegistrationConfig(
            mode=mode,
            scales=((0.25, 60), (0.5, 60), (1.0, 60)),
            kernel=MultiGaussianKernel((0.03, 0.06, 0.09, 0.3), 0.02),
            penalties=RegPenaltyConfig(w0_sq=(0.2, 0.5, 0.3, 0.0)),
        )
    return RegistrationConfig(mode=mode)
