"""Benchmark dynamical systems: box domains, parameters, symbolic and numeric
right-hand sides, and optional auxiliary input features (e.g. an energy
function appended to the certificate's input).

Each system carries two independent implementations of f(x): expression trees
(used for symbolic Lie derivatives in the falsifier) and a vectorized numpy
callable (used for training batches and equilibrium checks).  The registry
cross-checks them at load time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from lyapgen.expressions import (
    Expression,
    add,
    const,
    cos,
    div,
    evaluate_many,
    mul,
    neg,
    omc,
    sin,
    sq,
    sub,
    var,
)


class UnknownSystemError(KeyError):
    pass


@dataclass(frozen=True)
class DynamicalSystem:
    """Autonomous system dx/dt = f(x) on an axis-aligned box containing 0."""

    name: str
    dim: int
    domain: np.ndarray  # (dim, 2) closed interval bounds
    parameters: dict[str, float]
    rhs_exprs: tuple[Expression, ...]
    rhs_numeric: Callable[[np.ndarray], np.ndarray]
    aux_features: tuple[tuple[str, Expression], ...] = ()
    unary_ops: tuple[str, ...] = ("sin", "cos", "omc", "sq")

    @property
    def n_aux(self) -> int:
        return len(self.aux_features)

    def rhs(self, x: np.ndarray) -> np.ndarray:
        """f(x) for a batch (N, dim) or single point (dim,)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        with np.errstate(all="ignore"):
            out = self.rhs_numeric(np.atleast_2d(x))
        return out[0] if single else out

    def auxiliary(self, x: np.ndarray) -> np.ndarray:
        """Auxiliary feature values, shape (N, n_aux); empty when none exist."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if not self.aux_features:
            return np.zeros((x.shape[0], 0))
        return np.stack([evaluate_many(e, x) for _, e in self.aux_features], axis=1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform i.i.d. points in the domain box."""
        lo, hi = self.domain[:, 0], self.domain[:, 1]
        return rng.uniform(lo, hi, size=(n, self.dim))

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        lo, hi = self.domain[:, 0], self.domain[:, 1]
        return np.all((x >= lo) & (x <= hi), axis=1)


@dataclass(frozen=True)
class NetworkedSystem:
    """Subsystem/edge decomposition of a flat system for compositional
    certificates.  All subsystems share one state dimension; each undirected
    edge carries the feature expressions fed to the edge network."""

    flat: DynamicalSystem
    subsystem_indices: tuple[tuple[int, ...], ...]
    edges: tuple[tuple[int, int], ...]
    edge_features: tuple[tuple[Expression, ...], ...]
    node_unary_ops: tuple[str, ...] = ("sq",)
    edge_unary_ops: tuple[str, ...] = ("sq", "cos", "omc")

    def __post_init__(self):
        dims = {len(ix) for ix in self.subsystem_indices}
        if len(dims) != 1:
            raise ValueError("subsystems must share one state dimension")
        m = len(self.subsystem_indices)
        for i, j in self.edges:
            if not (0 <= i < m and 0 <= j < m and i != j):
                raise ValueError(f"edge ({i}, {j}) references invalid subsystems")
        if len(self.edge_features) != len(self.edges):
            raise ValueError("one feature tuple required per edge")

    @property
    def n_subsystems(self) -> int:
        return len(self.subsystem_indices)

    @property
    def subsystem_dim(self) -> int:
        return len(self.subsystem_indices[0])

    @property
    def feature_dim(self) -> int:
        return len(self.edge_features[0])

    def subsystem_states(self, x: np.ndarray, i: int) -> np.ndarray:
        return np.atleast_2d(np.asarray(x, dtype=float))[:, list(self.subsystem_indices[i])]

    def edge_feature_values(self, x: np.ndarray, e: int) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.stack([evaluate_many(f, x) for f in self.edge_features[e]], axis=1)


def _box(*bounds):
    return np.array(bounds, dtype=float)


def _path_following() -> DynamicalSystem:
    c, v = 2.0, 6.0
    x1, x2 = var(0), var(1)
    exprs = (
        mul(const(v), sin(x2)),
        sub(neg(x2), mul(const(c * v), mul(div(sin(x2), x2), x1))),
    )

    def rhs(x):
        # sinc handles the removable singularity of sin(x2)/x2 at x2 = 0
        return np.stack(
            [v * np.sin(x[:, 1]), -x[:, 1] - c * v * np.sinc(x[:, 1] / np.pi) * x[:, 0]],
            axis=1,
        )

    return DynamicalSystem(
        name="path_following",
        dim=2,
        domain=_box((-2.0, 2.0), (-np.pi, np.pi)),
        parameters={"c": c, "v": v},
        rhs_exprs=exprs,
        rhs_numeric=rhs,
    )


def _inverted_pendulum() -> DynamicalSystem:
    g, m, l, b = 9.81, 2.0, 5.0, 0.1
    x1, x2 = var(0), var(1)
    exprs = (
        x2,
        sub(neg(mul(const(g / l), sin(x1))), mul(const(b / m), x2)),
    )

    def rhs(x):
        return np.stack([x[:, 1], -(g / l) * np.sin(x[:, 0]) - (b / m) * x[:, 1]], axis=1)

    return DynamicalSystem(
        name="inverted_pendulum",
        dim=2,
        domain=_box((-np.pi, np.pi), (-6.0, 6.0)),
        parameters={"g": g, "m": m, "l": l, "b": b},
        rhs_exprs=exprs,
        rhs_numeric=rhs,
    )


def _van_der_pol() -> DynamicalSystem:
    mu = 1.0
    x1, x2 = var(0), var(1)
    exprs = (
        x2,
        sub(neg(x1), mul(const(mu), mul(sub(const(1.0), sq(x1)), x2))),
    )

    def rhs(x):
        return np.stack([x[:, 1], -x[:, 0] - mu * (1.0 - x[:, 0] ** 2) * x[:, 1]], axis=1)

    return DynamicalSystem(
        name="van_der_pol",
        dim=2,
        domain=_box((-1.0, 1.0), (-1.0, 1.0)),
        parameters={"mu": mu},
        rhs_exprs=exprs,
        rhs_numeric=rhs,
    )


def _trig3d() -> DynamicalSystem:
    x1, x2, x3 = var(0), var(1), var(2)

    def h(e):
        return mul(sin(e), cos(e))

    exprs = (
        x2,
        sub(sub(mul(const(-2.0), h(x1)), x2), mul(const(2.0), h(x3))),
        sub(x2, x3),
    )

    def rhs(x):
        h1 = np.sin(x[:, 0]) * np.cos(x[:, 0])
        h3 = np.sin(x[:, 2]) * np.cos(x[:, 2])
        return np.stack([x[:, 1], -2.0 * h1 - x[:, 1] - 2.0 * h3, x[:, 1] - x[:, 2]], axis=1)

    return DynamicalSystem(
        name="trig3d",
        dim=3,
        domain=_box((-1.5, 1.5), (-1.5, 1.5), (-1.5, 1.5)),
        parameters={},
        rhs_exprs=exprs,
        rhs_numeric=rhs,
    )


def _wheel_pendulum() -> DynamicalSystem:
    g = 9.81
    m1, m2 = 0.1 / g, 0.4 / g
    l1 = l2 = 1.0
    i1, i2 = 1.0 - 0.5 / g, 1.0
    d11 = m1 * l2**2 + m2 * l1**2 + i1 + i2
    d12 = d21 = i2
    d22 = i2
    det_d = d11 * d22 - d12 * d21
    mbar = m1 * l2 + m2 * l1
    k1 = d21 * mbar * g / det_d
    k2 = d11 / det_d

    x1, x2, x3, x4 = (var(i) for i in range(4))
    # E = 0.5 [x2 x4] D [x2 x4]^T + mbar*g*(cos(x1) - 1)
    quad = add(
        add(mul(const(0.5 * d11), sq(x2)), mul(const(d12), mul(x2, x4))),
        mul(const(0.5 * d22), sq(x4)),
    )
    energy = sub(quad, mul(const(mbar * g), omc(x1)))
    tau = div(
        add(sub(neg(x4), x3), mul(const(k1), sin(x1))),
        add(energy, const(k2)),
    )
    exprs = (
        x2,
        add(mul(const(d22 * mbar * g / det_d), x1), mul(const(-d12 / det_d), tau)),
        x4,
        add(mul(const(d21 * mbar * g / det_d), x1), mul(const(d11 / det_d), tau)),
    )

    def energy_num(x):
        quad = 0.5 * (d11 * x[:, 1] ** 2 + 2 * d12 * x[:, 1] * x[:, 3] + d22 * x[:, 3] ** 2)
        return quad + mbar * g * (np.cos(x[:, 0]) - 1.0)

    def rhs(x):
        e = energy_num(x)
        tau = (-x[:, 3] - x[:, 2] + k1 * np.sin(x[:, 0])) / (e + k2)
        return np.stack(
            [
                x[:, 1],
                (d22 / det_d) * mbar * g * x[:, 0] - (d12 / det_d) * tau,
                x[:, 3],
                (d21 / det_d) * mbar * g * x[:, 0] + (d11 / det_d) * tau,
            ],
            axis=1,
        )

    domain = _box((-np.pi / 2, np.pi / 2), (-2.0, 2.0), (-np.pi / 2, np.pi / 2), (-2.0, 2.0))

    # the torque divides by E + k2; verify the margin over the box up front
    rng = np.random.default_rng(0)
    probe = rng.uniform(domain[:, 0], domain[:, 1], size=(20000, 4))
    margin = float((energy_num(probe) + k2).min())
    if margin <= 0:
        raise ValueError(f"wheel_pendulum torque denominator not positive (margin {margin})")

    return DynamicalSystem(
        name="wheel_pendulum",
        dim=4,
        domain=domain,
        parameters={
            "m1": m1,
            "m2": m2,
            "l1": l1,
            "l2": l2,
            "I1": i1,
            "I2": i2,
            "mbar": mbar,
            "k1": k1,
            "k2": k2,
            "g": g,
            "denominator_margin": margin,
        },
        rhs_exprs=exprs,
        rhs_numeric=rhs,
        aux_features=(("E", energy),),
    )


def _nonlinear6d() -> DynamicalSystem:
    x1, x2, x3, x4, x5, x6 = (var(i) for i in range(6))
    exprs = (
        sub(add(neg(x1), mul(const(0.5), x2)), mul(const(0.1), sq(x5))),
        sub(mul(const(-0.5), x1), x2),
        sub(add(neg(x3), mul(const(0.5), x4)), mul(const(0.1), sq(x1))),
        sub(mul(const(-0.5), x3), x4),
        add(neg(x5), mul(const(0.5), x6)),
        add(sub(mul(const(-0.5), x5), x6), mul(const(0.1), sq(x2))),
    )

    def rhs(x):
        x1, x2, x3, x4, x5, x6 = (x[:, i] for i in range(6))
        return np.stack(
            [
                -x1 + 0.5 * x2 - 0.1 * x5**2,
                -0.5 * x1 - x2,
                -x3 + 0.5 * x4 - 0.1 * x1**2,
                -0.5 * x3 - x4,
                -x5 + 0.5 * x6,
                -0.5 * x5 - x6 + 0.1 * x2**2,
            ],
            axis=1,
        )

    return DynamicalSystem(
        name="nonlinear6d",
        dim=6,
        domain=_box(*(((-1.0, 1.0),) * 6)),
        parameters={},
        rhs_exprs=exprs,
        rhs_numeric=rhs,
        unary_ops=("sq",),
    )


def _power_3bus_flat() -> DynamicalSystem:
    # state order (d1, d2, d3, w1, w2, w3); center-of-inertia angles, so
    # d_i' = w_i - mean(w); w_i' = -2 w_i - sum_j sin(d_i - d_j)
    deltas = [var(i) for i in range(3)]
    omegas = [var(i + 3) for i in range(3)]
    exprs = []
    for i in range(3):
        mean_w = div(add(add(omegas[0], omegas[1]), omegas[2]), const(3.0))
        exprs.append(sub(omegas[i], mean_w))
    for i in range(3):
        coupling = None
        for j in range(3):
            if j == i:
                continue
            term = sin(sub(deltas[i], deltas[j]))
            coupling = term if coupling is None else add(coupling, term)
        exprs.append(sub(mul(const(-2.0), omegas[i]), coupling))

    def rhs(x):
        d, w = x[:, :3], x[:, 3:]
        wbar = w.mean(axis=1, keepdims=True)
        s = np.stack(
            [np.sin(d[:, [i]] - d).sum(axis=1) for i in range(3)],
            axis=1,
        )
        return np.concatenate([w - wbar, -2.0 * w - s], axis=1)

    return DynamicalSystem(
        name="power_3bus",
        dim=6,
        domain=_box(*(((-np.pi / 4, np.pi / 4),) * 3 + ((-2.0, 2.0),) * 3)),
        parameters={"m": 1.0, "d": 1.0, "p": 0.0, "B_offdiag": 1.0},
        rhs_exprs=tuple(exprs),
        rhs_numeric=rhs,
        unary_ops=("sq",),
    )


def _power_3bus_networked() -> NetworkedSystem:
    flat = _power_3bus_flat()
    edges = ((0, 1), (0, 2), (1, 2))
    features = tuple((sub(var(i), var(j)),) for i, j in edges)
    return NetworkedSystem(
        flat=flat,
        subsystem_indices=((0, 3), (1, 4), (2, 5)),
        edges=edges,
        edge_features=features,
    )


_REGISTRY: dict[str, Callable[[], DynamicalSystem]] = {
    "path_following": _path_following,
    "inverted_pendulum": _inverted_pendulum,
    "van_der_pol": _van_der_pol,
    "trig3d": _trig3d,
    "wheel_pendulum": _wheel_pendulum,
    "nonlinear6d": _nonlinear6d,
    "power_3bus": _power_3bus_flat,
}

_NETWORKED: dict[str, Callable[[], NetworkedSystem]] = {
    "power_3bus": _power_3bus_networked,
}

_cache: dict[str, DynamicalSystem] = {}


def system_names() -> tuple[str, ...]:
    return tuple(sorted(_REGISTRY))


def get_system(name: str) -> DynamicalSystem:
    """Fetch a registered system; the first access verifies f(0) = 0."""
    if name not in _REGISTRY:
        raise UnknownSystemError(
            f"unknown system {name!r}; available: {', '.join(system_names())}"
        )
    if name not in _cache:
        sys = _REGISTRY[name]()
        _verify_equilibrium(sys)
        _cache[name] = sys
    return _cache[name]


def get_networked_system(name: str) -> NetworkedSystem:
    if name not in _NETWORKED:
        raise UnknownSystemError(f"system {name!r} has no networked decomposition")
    return _NETWORKED[name]()


def _verify_equilibrium(sys: DynamicalSystem, tol: float = 1e-9) -> None:
    f0 = sys.rhs(np.zeros(sys.dim))
    worst = float(np.abs(f0).max())
    if worst > tol:
        raise ValueError(f"{sys.name}: origin is not an equilibrium (|f(0)| = {worst})")
    lo, hi = sys.domain[:, 0], sys.domain[:, 1]
    if not (np.all(lo < 0) and np.all(hi > 0)):
        raise ValueError(f"{sys.name}: domain must contain the origin strictly inside")


def eval_rhs(sys: DynamicalSystem, x) -> np.ndarray:
    """f(x); raises when the result is non-finite (e.g. torque singularity)."""
    x = np.asarray(x, dtype=float)
    out = sys.rhs(x)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{sys.name}: rhs non-finite at {x.tolist()}")
    return out


def eval_auxiliary(sys: DynamicalSystem, x) -> np.ndarray:
    """Auxiliary feature vector at a single point (empty when none registered)."""
    x = np.asarray(x, dtype=float)
    return sys.auxiliary(x)[0]
