"""Parameter vectors and fit results shared by every analysis method."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import OutcomeKind

__all__ = ["ParamVector", "FitResult", "param_names"]


def param_names(kind: OutcomeKind, p: int, include_shift: bool = False) -> list[str]:
    """Canonical flat names for the monitored parameters of one outcome model."""
    names: list[str] = []
    if kind.has_intercept:
        names.append("beta0")
    names.append("beta_x")
    names += [f"beta_z{j + 1}" for j in range(p)]
    if kind is OutcomeKind.LINEAR:
        names.append("sigma2")
    if kind is OutcomeKind.WEIBULL:
        names.append("shape_r")
    names.append("gamma0")
    names += [f"gamma_z{j + 1}" for j in range(p)]
    names += ["sigma2_x_given_z", "sigma2_u"]
    if include_shift:
        names.append("nu")
    return names


@dataclass(frozen=True)
class ParamVector:
    """Point values for every parameter of the joint model.

    Outcome-specific extras: ``sigma2`` (linear), ``dh0`` baseline-hazard
    increments (cox), ``shape_r`` (weibull).  ``nu`` is the optional systematic
    shift of the second measurement; ``alpha`` holds imputation-model
    coefficients keyed by covariate index.
    """

    beta_x: float
    beta_z: np.ndarray
    gamma0: float
    gamma_z: np.ndarray
    sigma2_x_given_z: float
    sigma2_u: float
    beta0: float | None = None
    sigma2: float | None = None
    dh0: np.ndarray | None = None
    shape_r: float | None = None
    nu: float | None = None
    alpha: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "beta_z", np.asarray(self.beta_z, dtype=float))
        object.__setattr__(self, "gamma_z", np.asarray(self.gamma_z, dtype=float))
        for name in ("sigma2_x_given_z", "sigma2_u", "sigma2", "shape_r"):
            val = getattr(self, name)
            if val is not None and not val >= 0:
                raise ValueError(f"{name} must be nonnegative, got {val}")
        if self.dh0 is not None:
            dh0 = np.asarray(self.dh0, dtype=float)
            if (dh0 < 0).any():
                raise ValueError("baseline hazard increments must be nonnegative")
            object.__setattr__(self, "dh0", dh0)

    def flat(self) -> dict[str, float]:
        """Flatten into the canonical named-scalar map (dh0 excluded)."""
        out: dict[str, float] = {}
        if self.beta0 is not None:
            out["beta0"] = float(self.beta0)
        out["beta_x"] = float(self.beta_x)
        for j, b in enumerate(self.beta_z):
            out[f"beta_z{j + 1}"] = float(b)
        if self.sigma2 is not None:
            out["sigma2"] = float(self.sigma2)
        if self.shape_r is not None:
            out["shape_r"] = float(self.shape_r)
        out["gamma0"] = float(self.gamma0)
        for j, g in enumerate(self.gamma_z):
            out[f"gamma_z{j + 1}"] = float(g)
        out["sigma2_x_given_z"] = float(self.sigma2_x_given_z)
        out["sigma2_u"] = float(self.sigma2_u)
        if self.nu is not None:
            out["nu"] = float(self.nu)
        for key, coefs in self.alpha.items():
            for j, a in enumerate(np.atleast_1d(coefs)):
                out[f"alpha_z{key + 1}_{j}"] = float(a)
        return out


@dataclass(frozen=True)
class FitResult:
    """Point estimates, optional intervals and diagnostics from one method."""

    method: str
    estimates: ParamVector
    intervals: dict[str, tuple[float, float]] = field(default_factory=dict)
    level: float = 0.95
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, (lo, hi) in self.intervals.items():
            if not lo <= hi:
                raise ValueError(f"interval for {name} has lower > upper: ({lo}, {hi})")

    def flat_estimates(self) -> dict[str, float]:
        return self.estimates.flat()

    def to_dict(self) -> dict:
        """JSON-ready representation (floats kept at full precision)."""
        out = {
            "method": self.method,
            "estimates": self.flat_estimates(),
            "intervals": {k: [float(lo), float(hi)] for k, (lo, hi) in sorted(self.intervals.items())},
            "level": self.level,
            "diagnostics": _jsonify(self.diagnostics),
        }
        return out


def _jsonify(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonify(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj
