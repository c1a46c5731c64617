"""Analytical Lyapunov function discovery.

Trains an input-convex neural certificate on a dynamical system, distills it
into closed-form candidates with genetic-programming symbolic regression, and
falsifies each candidate by root finding plus dense sampling, feeding
counterexamples back into training until a candidate survives.
"""

from lyapgen.expressions import (
    Expression,
    Const,
    Var,
    Unary,
    Binary,
    complexity,
    differentiate,
    evaluate,
    evaluate_many,
    lie_derivative,
    parse,
    refine_constants,
    simplify,
    to_text,
)

__all__ = [
    "Expression",
    "Const",
    "Var",
    "Unary",
    "Binary",
    "complexity",
    "differentiate",
    "evaluate",
    "evaluate_many",
    "lie_derivative",
    "parse",
    "refine_constants",
    "simplify",
    "to_text",
]

__version__ = "0.1.0"
