"""Condition-aware velocity fields over analytic and learned backends."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .gmm import GaussianMixture, analytic_velocity, as_batch

NOISE_PRED_T_MAX = 1.0 - 1e-6


class ConfigurationError(KeyError):
    """Unknown condition or inconsistent model registry."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DomainError(ValueError):
    """Conversion requested where the identity is singular."""


@dataclass(frozen=True)
class LearnedBinding:
    """A condition bound to one output slot of a shared velocity network."""

    net: object
    condition: str

    def __call__(self, t, points):
        return self.net.forward(points, t, self.condition)


class ConditionedModel:
    """Immutable registry mapping condition labels to velocity backends.

    Backends are either a :class:`GaussianMixture` (evaluated in closed
    form) or a learned network bound to a condition.
    """

    def __init__(self, registry: Mapping[str, object]):
        if not registry:
            raise ConfigurationError("model needs at least one condition")
        kinds = set()
        dims = set()
        for label, backend in registry.items():
            if not isinstance(label, str) or not label:
                raise ConfigurationError("condition labels must be nonempty strings")
            if isinstance(backend, GaussianMixture):
                kinds.add("analytic")
                dims.add(backend.dim)
            elif isinstance(backend, LearnedBinding):
                kinds.add("learned")
                dims.add(backend.net.dim)
            else:
                raise ConfigurationError(f"unsupported backend for condition {label!r}")
        if len(dims) != 1:
            raise ConfigurationError("all backends must share one dimension")
        if len(kinds) != 1:
            raise ConfigurationError("cannot mix analytic and learned backends")
        self._registry = dict(registry)
        self.backend_kind = kinds.pop()
        self.dim = dims.pop()

    @classmethod
    def analytic(cls, **mixtures: GaussianMixture) -> "ConditionedModel":
        return cls(mixtures)

    @classmethod
    def learned(cls, net) -> "ConditionedModel":
        return cls({c: LearnedBinding(net, c) for c in net.conditions})

    @property
    def conditions(self) -> tuple:
        return tuple(self._registry)

    def backend(self, condition: str):
        try:
            return self._registry[condition]
        except KeyError:
            raise ConfigurationError(f"condition {condition!r} is not registered") from None

    def velocity(self, condition: str, t: float, points) -> np.ndarray:
        backend = self.backend(condition)
        if not 0.0 <= t <= 1.0:
            raise ValueError("t must lie in [0, 1]")
        if isinstance(backend, GaussianMixture):
            return analytic_velocity(backend, t, points)
        return backend(t, as_batch(points, self.dim))

    def to_dict(self, weights_ref: str | None = None) -> dict:
        if self.backend_kind == "analytic":
            return {
                "backend_kind": "analytic",
                "conditions": {c: b.to_dict() for c, b in self._registry.items()},
            }
        if weights_ref is None:
            raise ConfigurationError("learned models serialize with a weights reference")
        return {"backend_kind": "learned", "conditions": list(self._registry), "weights": weights_ref}

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | Path = ".") -> "ConditionedModel":
        kind = data.get("backend_kind")
        if kind == "analytic":
            return cls({c: GaussianMixture.from_dict(g) for c, g in data["conditions"].items()})
        if kind == "learned":
            from .learn import VelocityNet

            net = VelocityNet.load(Path(base_dir) / data["weights"])
            if list(net.conditions) != list(data["conditions"]):
                raise ConfigurationError("weights file conditions do not match the container")
            return cls.learned(net)
        raise ConfigurationError(f"unknown backend kind {kind!r}")

    def to_json(self, weights_ref=None) -> str:
        return json.dumps(self.to_dict(weights_ref), indent=2)


class GuidedModel:
    """Wraps a model so every condition uses classifier-free guidance.

    ``V = V_uncond + scale * (V_cond - V_uncond)``.  Scales of exactly 0 and 1
    short-circuit to a single backend evaluation.
    """

    def __init__(self, model: ConditionedModel, unconditional: str, scale: float):
        if scale < 0:
            raise ValueError("guidance scale must be non-negative")
        model.backend(unconditional)
        self.model = model
        self.unconditional = unconditional
        self.scale = float(scale)
        self.dim = model.dim
        self.conditions = model.conditions

    def velocity(self, condition, t, points):
        return guided_velocity(self.model, condition, self.unconditional, self.scale, t, points)


def velocity(model, condition, t, points):
    return model.velocity(condition, t, points)


def velocity_delta(model, src, tar, t, z_src, z_tar):
    """``V(z_tar, t, tar) - V(z_src, t, src)``."""
    z_src = np.asarray(z_src, dtype=np.float64)
    z_tar = np.asarray(z_tar, dtype=np.float64)
    if z_src.shape != z_tar.shape:
        raise ValueError("source and target states must have equal shapes")
    return model.velocity(tar, t, z_tar) - model.velocity(src, t, z_src)


def guided_velocity(model, condition, unconditional, scale, t, points):
    v_cond = model.velocity(condition, t, points)
    if scale == 1.0:
        model.backend(unconditional)
        return v_cond
    v_unc = model.velocity(unconditional, t, points)
    if scale == 0.0:
        return v_unc
    return v_unc + scale * (v_cond - v_unc)


def _check_t(t):
    if t >= NOISE_PRED_T_MAX:
        raise DomainError(f"noise-prediction identity is singular at t={t} (need t < 1 - 1e-6)")


def velocity_to_noise_pred(v, z, t):
    """Noise prediction implied by a velocity: ``eps = z + (1 - t) v``."""
    _check_t(t)
    return np.asarray(z, dtype=np.float64) + (1.0 - t) * np.asarray(v, dtype=np.float64)


def noise_pred_to_velocity(eps, z, t):
    """Velocity implied by a noise prediction: ``(eps - z) / (1 - t)``."""
    _check_t(t)
    return (np.asarray(eps, dtype=np.float64) - np.asarray(z, dtype=np.float64)) / (1.0 - t)
