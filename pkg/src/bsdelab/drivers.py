"""Driver protocol and built-in analytic drivers.

A driver is the non-linear term f(t, x, y, z) of the backward equation.
Built-in analytic drivers carry a flat parameter vector so the sensitivity
machinery treats them exactly like trained networks.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Protocol, runtime_checkable

import numpy as np

__all__ = [
    "DriverGradients",
    "Driver",
    "AnalyticDriver",
    "TruncatedDriver",
    "zero_driver",
    "linear_z_driver",
    "entropic_driver",
    "quadratic_z_driver",
    "scaled_constant_driver",
]


@dataclass(frozen=True)
class DriverGradients:
    """Value and first derivatives of a driver at a batch of points.

    value: (m,); dy: (m,); dz: (m, d); dtheta: (m, P).
    """

    value: np.ndarray
    dy: np.ndarray
    dz: np.ndarray
    dtheta: np.ndarray


@runtime_checkable
class Driver(Protocol):
    params: np.ndarray

    def value(self, t, x, y, z) -> np.ndarray: ...

    def full_gradients(self, t, x, y, z) -> DriverGradients: ...

    def with_params(self, params: np.ndarray) -> "Driver": ...


def _normalize_inputs(t, x, y, z):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    m = x.shape[0]
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), (m,)).astype(np.float64, copy=False)
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 0:
        z = np.broadcast_to(z, (m, 1))
    elif z.ndim == 1:
        z = z[:, None] if z.shape[0] == m else np.broadcast_to(z, (m, z.shape[0]))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (m,)).astype(np.float64, copy=False)
    if not (
        np.all(np.isfinite(t))
        and np.all(np.isfinite(x))
        and np.all(np.isfinite(y))
        and np.all(np.isfinite(z))
    ):
        raise ValueError("driver inputs must be finite")
    return t, x, y, z


@dataclass(frozen=True)
class AnalyticDriver:
    """Closed-form driver with hand-coded derivatives.

    value_fn(params, t, x, y, z) -> (m,)
    grad_fn(params, t, x, y, z) -> (dy (m,), dz (m, d), dtheta (m, P))
    """

    value_fn: Callable
    grad_fn: Callable
    params: np.ndarray
    name: str = "analytic"

    def __post_init__(self):
        object.__setattr__(self, "params", np.asarray(self.params, dtype=np.float64).ravel())

    @property
    def n_params(self) -> int:
        return self.params.size

    def value(self, t, x, y, z) -> np.ndarray:
        t, x, y, z = _normalize_inputs(t, x, y, z)
        out = np.asarray(self.value_fn(self.params, t, x, y, z), dtype=np.float64)
        return np.broadcast_to(out, (x.shape[0],)).astype(np.float64, copy=False)

    def full_gradients(self, t, x, y, z) -> DriverGradients:
        t, x, y, z = _normalize_inputs(t, x, y, z)
        m, d = z.shape
        val = np.broadcast_to(
            np.asarray(self.value_fn(self.params, t, x, y, z), dtype=np.float64), (m,)
        )
        dy, dz, dtheta = self.grad_fn(self.params, t, x, y, z)
        dy = np.broadcast_to(np.asarray(dy, dtype=np.float64), (m,))
        dz = np.broadcast_to(np.asarray(dz, dtype=np.float64), (m, d))
        dtheta = np.broadcast_to(np.asarray(dtheta, dtype=np.float64), (m, self.n_params))
        return DriverGradients(value=val.copy(), dy=dy.copy(), dz=dz.copy(), dtheta=dtheta.copy())

    def with_params(self, params) -> "AnalyticDriver":
        return replace(self, params=np.asarray(params, dtype=np.float64).ravel())


def zero_driver() -> AnalyticDriver:
    """f = 0: the linear conditional expectation."""
    return AnalyticDriver(
        value_fn=lambda p, t, x, y, z: np.zeros(x.shape[0]),
        grad_fn=lambda p, t, x, y, z: (0.0, np.zeros_like(z), np.zeros((x.shape[0], 0))),
        params=np.zeros(0),
        name="zero",
    )


def linear_z_driver(b) -> AnalyticDriver:
    """f = <b, z>. Parameters are the components of b."""
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    return AnalyticDriver(
        value_fn=lambda p, t, x, y, z: z @ p,
        grad_fn=lambda p, t, x, y, z: (0.0, p, z),
        params=b,
        name="linear-z",
    )


def entropic_driver(theta: float) -> AnalyticDriver:
    """f = -(theta/2) ||z||^2, the entropic ambiguity driver."""
    return AnalyticDriver(
        value_fn=lambda p, t, x, y, z: -0.5 * p[0] * np.sum(z * z, axis=1),
        grad_fn=lambda p, t, x, y, z: (
            0.0,
            -p[0] * z,
            -0.5 * np.sum(z * z, axis=1)[:, None],
        ),
        params=np.array([theta]),
        name="entropic",
    )


def quadratic_z_driver(theta: float) -> AnalyticDriver:
    """f = +(theta/2) ||z||^2, the convex mirror of the entropic driver."""
    return AnalyticDriver(
        value_fn=lambda p, t, x, y, z: 0.5 * p[0] * np.sum(z * z, axis=1),
        grad_fn=lambda p, t, x, y, z: (
            0.0,
            p[0] * z,
            0.5 * np.sum(z * z, axis=1)[:, None],
        ),
        params=np.array([theta]),
        name="quadratic-z",
    )


def scaled_constant_driver(theta: float, c: float) -> AnalyticDriver:
    """f = theta * c with a single learnable parameter; used by linearity tests."""
    return AnalyticDriver(
        value_fn=lambda p, t, x, y, z: np.full(x.shape[0], p[0] * c),
        grad_fn=lambda p, t, x, y, z: (
            0.0,
            np.zeros_like(z),
            np.full((x.shape[0], 1), c),
        ),
        params=np.array([theta]),
        name="scaled-constant",
    )


@dataclass(frozen=True)
class TruncatedDriver:
    """Wraps a driver with its y argument clamped to [-k, k]."""

    base: Driver
    k_level: float

    def __post_init__(self):
        if self.k_level <= 0:
            raise ValueError("k_level must be positive")

    @property
    def params(self) -> np.ndarray:
        return self.base.params

    def value(self, t, x, y, z) -> np.ndarray:
        y_clamped = np.clip(y, -self.k_level, self.k_level)
        return self.base.value(t, x, y_clamped, z)

    def full_gradients(self, t, x, y, z) -> DriverGradients:
        y = np.asarray(y, dtype=np.float64)
        y_clamped = np.clip(y, -self.k_level, self.k_level)
        g = self.base.full_gradients(t, x, y_clamped, z)
        inside = (np.abs(np.broadcast_to(y, g.dy.shape)) <= self.k_level).astype(np.float64)
        return DriverGradients(value=g.value, dy=g.dy * inside, dz=g.dz, dtheta=g.dtheta)

    def with_params(self, params) -> "TruncatedDriver":
        return TruncatedDriver(base=self.base.with_params(params), k_level=self.k_level)
