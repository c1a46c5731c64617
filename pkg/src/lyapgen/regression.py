"""Genetic-programming symbolic regression over the shared expression trees.

`fit_front` evolves a population against (x, y) pairs and returns the best
expression found at each complexity level (a Pareto front), mirroring the
contract of hall-of-fame style regressors: tournament selection, subtree
crossover, point/subtree mutation, constant jitter, least-squares constant
refinement on elites, and strict elitism through a per-complexity archive.

`SymbolicFrontRegressor` wraps the same machinery in a scikit-learn estimator
so it composes with pipelines and grid search.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from lyapgen.expressions import (
    Binary,
    Const,
    Expression,
    Unary,
    Var,
    complexity,
    evaluate_many,
    iter_nodes,
    max_var_index,
    refine_constants,
    simplify,
)

ALL_UNARY = ("sin", "cos", "omc", "sq")
BINARY = ("add", "sub", "mul", "div")


class RegressionError(RuntimeError):
    pass


@dataclass(frozen=True)
class GpConfig:
    population_size: int = 2000
    generations: int = 40
    tournament_size: int = 5
    p_crossover: float = 0.7
    p_mutation: float = 0.25
    constant_jitter: float = 0.05
    unary_ops: tuple[str, ...] = ALL_UNARY
    max_complexity: int = 15
    parsimony: float = 1e-4
    seed: int = 0
    n_refine: int = 20

    def __post_init__(self):
        for name in ("p_crossover", "p_mutation"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.max_complexity < 1:
            raise ValueError("max_complexity must be >= 1")
        if self.population_size < 2 or self.tournament_size < 1:
            raise ValueError("population_size >= 2 and tournament_size >= 1 required")
        unknown = set(self.unary_ops) - set(ALL_UNARY)
        if unknown:
            raise ValueError(f"unsupported unary operators: {sorted(unknown)}")


@dataclass(frozen=True)
class FrontEntry:
    complexity: int
    expression: Expression
    mse: float


@dataclass(frozen=True)
class ParetoFront:
    """Best expression per complexity level; mse strictly improves along it."""

    entries: tuple[FrontEntry, ...]

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def best(self) -> FrontEntry:
        return min(self.entries, key=lambda e: (e.mse, e.complexity))

    def at_most(self, level: int) -> FrontEntry | None:
        ok = [e for e in self.entries if e.complexity <= level]
        return min(ok, key=lambda e: e.mse) if ok else None

    def to_dicts(self):
        from lyapgen.expressions import to_text

        return [
            {"complexity": e.complexity, "expression": to_text(e.expression), "mse": e.mse}
            for e in self.entries
        ]


class FrontArchive:
    """All-time best (mse, expression) at each exact complexity level."""

    def __init__(self, max_complexity: int):
        self.max_complexity = max_complexity
        self.best: dict[int, tuple[float, Expression]] = {}

    def update(self, expression: Expression, mse: float) -> None:
        if not np.isfinite(mse):
            return
        c = complexity(expression)
        if c > self.max_complexity:
            return
        held = self.best.get(c)
        if held is None or mse < held[0]:
            self.best[c] = (mse, expression)

    def elites(self) -> list[Expression]:
        return [e for _, e in (self.best[c] for c in sorted(self.best))]

    def front(self) -> ParetoFront:
        entries = []
        best_mse = np.inf
        for c in sorted(self.best):
            mse, expr = self.best[c]
            if mse < best_mse:
                entries.append(FrontEntry(c, expr, mse))
                best_mse = mse
        return ParetoFront(tuple(entries))


def _mse(e: Expression, x: np.ndarray, y: np.ndarray) -> float:
    with np.errstate(all="ignore"):
        pred = evaluate_many(e, x)
        err = pred - y
        out = float(np.mean(err * err)) if np.all(np.isfinite(err)) else np.inf
    return out if np.isfinite(out) else np.inf


def _random_leaf(rng, n_vars, const_scale):
    if rng.random() < 0.35:
        return Const(float(np.round(rng.normal(0.0, const_scale), 4)))
    return Var(int(rng.integers(n_vars)))


def _random_tree(rng, cfg, n_vars, depth, const_scale):
    if depth <= 0 or (depth < 3 and rng.random() < 0.35):
        return _random_leaf(rng, n_vars, const_scale)
    if rng.random() < 0.45:
        op = cfg.unary_ops[int(rng.integers(len(cfg.unary_ops)))]
        return Unary(op, _random_tree(rng, cfg, n_vars, depth - 1, const_scale))
    op = BINARY[int(rng.integers(len(BINARY)))]
    return Binary(
        op,
        _random_tree(rng, cfg, n_vars, depth - 1, const_scale),
        _random_tree(rng, cfg, n_vars, depth - 1, const_scale),
    )


def _paths(e, prefix=()):
    yield prefix, e
    if isinstance(e, Unary):
        yield from _paths(e.child, prefix + ("child",))
    elif isinstance(e, Binary):
        yield from _paths(e.left, prefix + ("left",))
        yield from _paths(e.right, prefix + ("right",))


def _graft(e, path, sub):
    if not path:
        return sub
    if isinstance(e, Unary):
        return Unary(e.op, _graft(e.child, path[1:], sub))
    if path[0] == "left":
        return Binary(e.op, _graft(e.left, path[1:], sub), e.right)
    return Binary(e.op, e.left, _graft(e.right, path[1:], sub))


def _random_path(rng, e):
    paths = [p for p, _ in _paths(e)]
    return paths[int(rng.integers(len(paths)))]


def _crossover(rng, a, b, max_complexity):
    for _ in range(4):
        pa = _random_path(rng, a)
        donors = [node for _, node in _paths(b)]
        donor = donors[int(rng.integers(len(donors)))]
        child = _graft(a, pa, donor)
        if complexity(child) <= max_complexity:
            return child
    return a


def _point_mutation(rng, e, cfg, n_vars, const_scale):
    path, node = list(_paths(e))[int(rng.integers(complexity(e)))]
    if isinstance(node, Const):
        repl = Const(float(node.value + rng.normal(0.0, 0.3 * (1 + abs(node.value)))))
    elif isinstance(node, Var):
        repl = _random_leaf(rng, n_vars, const_scale)
    elif isinstance(node, Unary) and node.op != "neg":
        repl = Unary(cfg.unary_ops[int(rng.integers(len(cfg.unary_ops)))], node.child)
    elif isinstance(node, Unary):
        repl = node
    else:
        repl = Binary(BINARY[int(rng.integers(len(BINARY)))], node.left, node.right)
    return _graft(e, path, repl)


def _subtree_mutation(rng, e, cfg, n_vars, const_scale):
    for _ in range(4):
        path = _random_path(rng, e)
        sub = _random_tree(rng, cfg, n_vars, 2, const_scale)
        child = _graft(e, path, sub)
        if complexity(child) <= cfg.max_complexity:
            return child
    return e


def _hoist_mutation(rng, e):
    nodes = [node for _, node in _paths(e)]
    return nodes[int(rng.integers(len(nodes)))]


def _scale_mutation(rng, e, cfg):
    # wrap a random node in c*(...): gives constant refinement a handle
    path, node = list(_paths(e))[int(rng.integers(complexity(e)))]
    child = _graft(e, path, Binary("mul", Const(float(rng.normal(1.0, 0.3))), node))
    return child if complexity(child) <= cfg.max_complexity else e


def _mutate(rng, e, cfg, n_vars, const_scale):
    kind = rng.random()
    if kind < 0.35:
        return _point_mutation(rng, e, cfg, n_vars, const_scale)
    if kind < 0.7:
        return _subtree_mutation(rng, e, cfg, n_vars, const_scale)
    if kind < 0.85:
        return _hoist_mutation(rng, e)
    return _scale_mutation(rng, e, cfg)


def _jitter_constants(rng, e, scale):
    if isinstance(e, Const):
        return Const(float(e.value * (1.0 + scale * rng.normal()) + scale * rng.normal() * 1e-2))
    if isinstance(e, Unary):
        return Unary(e.op, _jitter_constants(rng, e.child, scale))
    if isinstance(e, Binary):
        return Binary(
            e.op, _jitter_constants(rng, e.left, scale), _jitter_constants(rng, e.right, scale)
        )
    return e


def _tournament(rng, population, fitness, k):
    contenders = rng.integers(len(population), size=k)
    best = min(contenders, key=lambda i: fitness[i])
    return population[int(best)]


def _uses_allowed_ops(e, cfg, n_vars):
    for node in iter_nodes(e):
        if isinstance(node, Unary) and node.op != "neg" and node.op not in cfg.unary_ops:
            return False
        if isinstance(node, Var) and node.index >= n_vars:
            return False
    return True


def initial_population(rng, cfg: GpConfig, n_vars: int, y: np.ndarray) -> list[Expression]:
    """Ramped random trees plus simple seed terms (variables, squares, mean)."""
    const_scale = max(1.0, float(np.std(y)) if len(y) else 1.0)
    pop: list[Expression] = [Const(float(np.mean(y)))] if len(y) else [Const(0.0)]
    for i in range(n_vars):
        pop.append(Var(i))
        pop.append(Binary("mul", Const(1.0), Var(i)))
        if "sq" in cfg.unary_ops:
            pop.append(Unary("sq", Var(i)))
            pop.append(Binary("mul", Const(1.0), Unary("sq", Var(i))))
    while len(pop) < cfg.population_size:
        depth = 1 + int(rng.integers(4))
        tree = _random_tree(rng, cfg, n_vars, depth, const_scale)
        if complexity(tree) <= cfg.max_complexity:
            pop.append(tree)
    return pop[: cfg.population_size]


def evolve_generation(
    population: list[Expression],
    x: np.ndarray,
    y: np.ndarray,
    cfg: GpConfig,
    rng: np.random.Generator,
    archive: FrontArchive,
    mse_cache: dict | None = None,
) -> list[Expression]:
    """One generation: selection, variation, refinement, elitist reinjection."""
    population = list(population)
    cache = mse_cache if mse_cache is not None else {}
    const_scale = max(1.0, float(np.std(y)))
    scale = max(float(np.var(y)), 1e-12)
    n_vars = x.shape[1]

    def mse_of(e):
        if e not in cache:
            cache[e] = _mse(e, x, y)
        return cache[e]

    mses = np.array([mse_of(e) for e in population])
    fitness = mses + cfg.parsimony * scale * np.array([complexity(e) for e in population])
    for e, m in zip(population, mses):
        archive.update(e, m)

    # constant refinement: current front members, the fittest distinct
    # individuals, and a random lottery so right-structure/wrong-constant
    # candidates get a chance to snap their constants before dying out
    for e in archive.elites():
        better = refine_constants(e, (x, y), max_nfev=40)
        if better is not e:
            archive.update(better, mse_of(better))
    order = np.argsort(fitness, kind="stable")
    chosen: list[int] = []
    seen = set()
    for i in order:
        if len(chosen) >= cfg.n_refine:
            break
        e = population[int(i)]
        if e in seen:
            continue
        seen.add(e)
        chosen.append(int(i))
    lottery = rng.integers(len(population), size=cfg.n_refine)
    for i in lottery:
        if population[int(i)] not in seen:
            seen.add(population[int(i)])
            chosen.append(int(i))
    for i in chosen:
        e = population[i]
        better = refine_constants(e, (x, y), max_nfev=40)
        if better is not e:
            m = mse_of(better)
            archive.update(better, m)
            if m < mses[i]:
                population[i] = better
                mses[i] = m
                fitness[i] = m + cfg.parsimony * scale * complexity(better)

    elites = archive.elites()
    offspring: list[Expression] = list(elites[: cfg.population_size])
    while len(offspring) < cfg.population_size:
        parent = _tournament(rng, population, fitness, cfg.tournament_size)
        child = parent
        roll = rng.random()
        if roll < cfg.p_crossover:
            donor = _tournament(rng, population, fitness, cfg.tournament_size)
            child = _crossover(rng, parent, donor, cfg.max_complexity)
        elif roll < cfg.p_crossover + cfg.p_mutation:
            child = _mutate(rng, child, cfg, n_vars, const_scale)
        if rng.random() < 0.3:
            child = _jitter_constants(rng, child, cfg.constant_jitter)
        if complexity(child) > cfg.max_complexity:
            child = parent
        offspring.append(child)
    return offspring


def fit_front(x, y, cfg: GpConfig) -> ParetoFront:
    """Evolve a population against (x, y) and return the Pareto front.

    Deterministic for a fixed ``cfg.seed``.  Candidates that evaluate
    non-finite anywhere on the data never enter the front.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    if len(y) == 0 or x.shape[0] != len(y):
        raise ValueError("fit requires matching, non-empty x and y")
    rng = np.random.default_rng(cfg.seed)
    archive = FrontArchive(cfg.max_complexity)
    cache: dict = {}
    population = initial_population(rng, cfg, x.shape[1], y)
    for _ in range(cfg.generations):
        population = evolve_generation(population, x, y, cfg, rng, archive, cache)
    for e in population:
        archive.update(e, cache.get(e, _mse(e, x, y)))
    # normalize entries: simplified trees, exact mse of the simplified form
    final = FrontArchive(cfg.max_complexity)
    for _, (m, e) in archive.best.items():
        s = simplify(e)
        final.update(s, _mse(s, x, y))
    front = final.front()
    if len(front) == 0:
        raise RegressionError(
            "empty Pareto front: every candidate evaluated non-finite on the data"
        )
    for entry in front:
        if not _uses_allowed_ops(entry.expression, cfg, x.shape[1]):
            raise RegressionError("front entry uses operators outside the configured set")
    return front


class SymbolicFrontRegressor(BaseEstimator, RegressorMixin):
    """Scikit-learn estimator facade over :func:`fit_front`.

    After ``fit``, ``front_`` holds the Pareto front and ``predict`` uses its
    most accurate entry.
    """

    def __init__(
        self,
        population_size=2000,
        generations=40,
        tournament_size=5,
        p_crossover=0.7,
        p_mutation=0.25,
        constant_jitter=0.05,
        unary_ops=ALL_UNARY,
        max_complexity=15,
        parsimony=1e-4,
        random_state=0,
    ):
        self.population_size = population_size
        self.generations = generations
        self.tournament_size = tournament_size
        self.p_crossover = p_crossover
        self.p_mutation = p_mutation
        self.constant_jitter = constant_jitter
        self.unary_ops = unary_ops
        self.max_complexity = max_complexity
        self.parsimony = parsimony
        self.random_state = random_state

    def _config(self) -> GpConfig:
        return GpConfig(
            population_size=self.population_size,
            generations=self.generations,
            tournament_size=self.tournament_size,
            p_crossover=self.p_crossover,
            p_mutation=self.p_mutation,
            constant_jitter=self.constant_jitter,
            unary_ops=tuple(self.unary_ops),
            max_complexity=self.max_complexity,
            parsimony=self.parsimony,
            seed=0 if self.random_state is None else int(self.random_state),
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self.front_ = fit_front(X, y, self._config())
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "front_")
        X = check_array(X)
        return evaluate_many(self.front_.best().expression, X)
