"""Shared oracles and generators for the test suite."""

import numpy as np

from lyapgen.expressions import Binary, Const, Unary, Var, evaluate_many

UNARIES = ["sin", "cos", "omc", "sq", "neg"]
BINARIES = ["add", "sub", "mul", "div"]


def random_expression(rng, dim, depth):
    """Random tree of depth <= ``depth`` over x1..x<dim> and small constants."""
    if depth == 0 or rng.random() < 0.3:
        if rng.random() < 0.4:
            return Const(float(np.round(rng.uniform(-3, 3), 3)))
        return Var(int(rng.integers(dim)))
    if rng.random() < 0.5:
        return Unary(str(rng.choice(UNARIES)), random_expression(rng, dim, depth - 1))
    return Binary(
        str(rng.choice(BINARIES)),
        random_expression(rng, dim, depth - 1),
        random_expression(rng, dim, depth - 1),
    )


def eval_at(e, x):
    """Evaluate at one point without raising; returns nan when singular."""
    return float(evaluate_many(e, np.asarray(x, dtype=float)[None, :])[0])


def central_difference(e, x, i, h=None):
    """Fourth-order central finite difference of ``e`` along coordinate ``i``."""
    x = np.asarray(x, dtype=float)
    if h is None:
        h = 1e-3 * (1.0 + abs(x[i]))

    def at(step):
        p = x.copy()
        p[i] += step
        return eval_at(e, p)

    return (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12.0 * h)


def directional_difference(v, f_numeric, x, h=1e-6):
    """Finite difference of ``v`` along a vector field: oracle for Lie derivatives."""
    x = np.asarray(x, dtype=float)
    d = f_numeric(x[None, :])[0]
    return (eval_at(v, x + h * d) - eval_at(v, x - h * d)) / (2.0 * h)


def grid_oracle_verdict(v_expr, lfv_expr, domain, tol, n=400, origin_radius=1e-2):
    """Brute-force verdict on a 2-D box: maximize -V and LfV on an n-by-n grid.

    Independent of the falsifier's sampling/root-finding path; used to
    cross-check its valid/invalid decisions.
    """
    lo, hi = np.asarray(domain)[:, 0], np.asarray(domain)[:, 1]
    g1 = np.linspace(lo[0], hi[0], n)
    g2 = np.linspace(lo[1], hi[1], n)
    pts = np.stack(np.meshgrid(g1, g2, indexing="ij"), axis=-1).reshape(-1, 2)
    mask = np.linalg.norm(pts, axis=1) > origin_radius
    v = evaluate_many(v_expr, pts)[mask]
    lf = evaluate_many(lfv_expr, pts)[mask]
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(lf))):
        return "invalid", np.inf, np.inf
    max_neg_v = float((-v).max())
    max_lf = float(lf.max())
    ok = max_neg_v <= tol and max_lf <= tol and float(v.max()) > tol
    return ("valid" if ok else "invalid"), max_neg_v, max_lf
