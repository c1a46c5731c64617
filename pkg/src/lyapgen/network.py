"""Input-convex neural Lyapunov certificate and its training loop.

The certificate is V(x) = sigma(g(F(x)) - g(F(0))) + eps*||x||^2 with F the
identity on the (state + auxiliary feature) vector, g an input-convex network
and sigma a smoothed ReLU.  The construction pins V(0) = 0 and
V >= eps*||x||^2, so training only has to push the Lie derivative negative.

Everything runs in float64: the acceptance gates (finite-difference gradient
checks at 1e-4 relative, bitwise replay determinism, 1e-9 convexity margins)
are not reliable in single precision.
"""

from __future__ import annotations

import json

import numpy as np
import torch
import torch.nn as nn

from lyapgen.dynamics import DynamicalSystem
from lyapgen.expressions import Binary, Const, Expression, Unary, Var

CHECKPOINT_SCHEMA = 1

DEFAULT_HIDDEN = (128, 128)
DEFAULT_SMOOTHING = 0.1
DEFAULT_MARGIN = 1e-3
DEFAULT_LR = 1e-3


class NonFiniteBatchError(RuntimeError):
    """Loss or gradient became non-finite; ``index`` is the offending point."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


def _as_batch(x) -> torch.Tensor:
    if torch.is_tensor(x):
        return torch.atleast_2d(x.to(torch.float64))
    return torch.as_tensor(np.atleast_2d(np.asarray(x, dtype=float)), dtype=torch.float64)


def expression_to_torch(e: Expression, x: torch.Tensor) -> torch.Tensor:
    """Evaluate an expression tree on a (N, d) tensor, keeping the graph."""
    if isinstance(e, Const):
        return torch.full((x.shape[0],), e.value, dtype=x.dtype)
    if isinstance(e, Var):
        return x[:, e.index]
    if isinstance(e, Unary):
        u = expression_to_torch(e.child, x)
        if e.op == "sin":
            return torch.sin(u)
        if e.op == "cos":
            return torch.cos(u)
        if e.op == "omc":
            return 1.0 - torch.cos(u)
        if e.op == "sq":
            return u * u
        return -u
    left = expression_to_torch(e.left, x)
    right = expression_to_torch(e.right, x)
    if e.op == "add":
        return left + right
    if e.op == "sub":
        return left - right
    if e.op == "mul":
        return left * right
    return left / right


def smoothed_relu(x: torch.Tensor, d: float) -> torch.Tensor:
    """0 for x<=0, x^2/(2d) on (0,d), x-d/2 beyond; C^1 everywhere."""
    return torch.clamp(x, 0.0, d) ** 2 / (2.0 * d) + torch.relu(x - d)


class SmoothedRelu(nn.Module):
    def __init__(self, d: float = DEFAULT_SMOOTHING):
        super().__init__()
        if d <= 0:
            raise ValueError("smoothing width must be positive")
        self.d = d

    def forward(self, x):
        return smoothed_relu(x, self.d)


class Icnn(nn.Module):
    """Input-convex scalar network: nonnegative hidden-to-hidden weights,
    unconstrained input passthroughs, convex nondecreasing activation."""

    def __init__(self, n_in: int, hidden=DEFAULT_HIDDEN, d: float = DEFAULT_SMOOTHING):
        super().__init__()
        self.n_in = n_in
        self.hidden = tuple(hidden)
        self.act = SmoothedRelu(d)
        widths = list(hidden) + [1]
        self.wx = nn.ModuleList(nn.Linear(n_in, w) for w in widths)
        self.wz = nn.ModuleList(
            nn.Linear(widths[i], widths[i + 1], bias=False) for i in range(len(widths) - 1)
        )
        self.double()
        # start convex: hidden-to-hidden weights nonnegative from step 0
        with torch.no_grad():
            for layer in self.wz:
                layer.weight.abs_()

    def forward(self, x):
        z = self.act(self.wx[0](x))
        for wx, wz in zip(self.wx[1:-1], self.wz[:-1]):
            z = self.act(wx(x) + wz(z))
        return self.wx[-1](x) + self.wz[-1](z)

    @torch.no_grad()
    def project(self):
        """Clamp hidden-to-hidden weights at zero (convexity constraint)."""
        for layer in self.wz:
            layer.weight.clamp_(min=0.0)

    def convexity_violation(self) -> float:
        worst = 0.0
        for layer in self.wz:
            worst = min(worst, layer.weight.detach().min().item())
        return -worst


class LyapunovNet(nn.Module):
    """Shifted, margin-padded convex certificate over state + auxiliary input."""

    def __init__(
        self,
        n_state: int,
        aux_features: tuple[tuple[str, Expression], ...] = (),
        hidden=DEFAULT_HIDDEN,
        d: float = DEFAULT_SMOOTHING,
        eps: float = DEFAULT_MARGIN,
    ):
        super().__init__()
        self.n_state = n_state
        self.aux_features = tuple(aux_features)
        self.d = d
        self.eps = eps
        self.g = Icnn(n_state + len(self.aux_features), hidden, d)
        self.sigma = SmoothedRelu(d)

    @property
    def n_in(self) -> int:
        return self.n_state + len(self.aux_features)

    def augment(self, x: torch.Tensor) -> torch.Tensor:
        if not self.aux_features:
            return x
        feats = [expression_to_torch(e, x) for _, e in self.aux_features]
        return torch.cat([x] + [f.unsqueeze(1) for f in feats], dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.atleast_2d(x)
        origin = self.augment(torch.zeros(1, self.n_state, dtype=x.dtype))
        shifted = self.g(self.augment(x)) - self.g(origin)
        # the margin uses raw state coordinates only, so V(0) = 0 stays exact
        return self.sigma(shifted).squeeze(-1) + self.eps * (x * x).sum(dim=1)

    def project(self):
        self.g.project()


def build_lyapunov_net(
    system: DynamicalSystem,
    hidden=DEFAULT_HIDDEN,
    d: float = DEFAULT_SMOOTHING,
    eps: float = DEFAULT_MARGIN,
    seed: int = 0,
) -> LyapunovNet:
    """Seeded constructor; identical seeds give identical parameters."""
    torch.manual_seed(seed)
    return LyapunovNet(system.dim, system.aux_features, hidden=hidden, d=d, eps=eps)


def forward(net: LyapunovNet, x) -> np.ndarray:
    """Certificate values at points (numpy in, numpy out)."""
    x = torch.as_tensor(np.atleast_2d(np.asarray(x, dtype=float)), dtype=torch.float64)
    with torch.no_grad():
        return net(x).numpy()


def grad_state(net: LyapunovNet, x, create_graph: bool = False):
    """Exact gradient of V with respect to the raw state, chain rule through
    auxiliary features included.  Tensor in, tensor out."""
    tensor_in = torch.is_tensor(x)
    x = _as_batch(x).detach().requires_grad_(True)
    v = net(x)
    (grad,) = torch.autograd.grad(v.sum(), x, create_graph=create_graph)
    if tensor_in:
        return grad
    return grad.detach().numpy()


def lie_values(net: LyapunovNet, system: DynamicalSystem, batch: torch.Tensor) -> torch.Tensor:
    """Per-point Lie derivative of the certificate along the system field."""
    f = torch.as_tensor(system.rhs(batch.detach().numpy()), dtype=torch.float64)
    x = batch.detach().requires_grad_(True)
    v = net(x)
    (grad,) = torch.autograd.grad(v.sum(), x, create_graph=True)
    return (grad * f).sum(dim=1)


def lyapunov_risk(net: LyapunovNet, system: DynamicalSystem, batch) -> torch.Tensor:
    """Mean hinge on the Lie derivative: (1/N) sum max(0, L_f V(x_i))."""
    batch = _as_batch(batch)
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    return torch.relu(lie_values(net, system, batch)).mean()


class Trainer:
    """Adam on the Lyapunov risk with convexity projection after each step."""

    def __init__(self, net: LyapunovNet, lr: float = DEFAULT_LR):
        self.net = net
        self.lr = lr
        self.optimizer = torch.optim.Adam(net.parameters(), lr=lr)
        self.step_count = 0

    def step(self, system: DynamicalSystem, batch) -> float:
        batch = _as_batch(batch)
        lie = lie_values(self.net, system, batch)
        finite = torch.isfinite(lie)
        if not bool(finite.all()):
            index = int((~finite).nonzero()[0, 0])
            raise NonFiniteBatchError(
                f"non-finite Lie derivative at batch index {index}", index=index
            )
        risk = torch.relu(lie).mean()
        self.optimizer.zero_grad()
        risk.backward()
        for name, p in self.net.named_parameters():
            if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                self.optimizer.zero_grad()
                raise NonFiniteBatchError(f"non-finite gradient in {name}")
        self.optimizer.step()
        self.net.project()
        self.step_count += 1
        return risk.item()


def sample_dataset(net: LyapunovNet, system: DynamicalSystem, n_points: int, seed: int):
    """Uniform domain samples paired with certificate outputs.

    These pairs feed the symbolic regressor only; they are never used as
    training data for the network itself.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    x = system.sample(n_points, rng)
    return x, forward(net, x)


def save_checkpoint(net: LyapunovNet, path) -> None:
    tensors = [
        {"name": name, "shape": list(p.shape), "data": p.detach().reshape(-1).tolist()}
        for name, p in net.state_dict().items()
    ]
    doc = {
        "schema_version": CHECKPOINT_SCHEMA,
        "kind": "lyapunov_net",
        "n_state": net.n_state,
        "hidden": list(net.g.hidden),
        "smoothing": net.d,
        "margin": net.eps,
        "aux_names": [name for name, _ in net.aux_features],
        "tensors": tensors,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path, system: DynamicalSystem | None = None) -> LyapunovNet:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != CHECKPOINT_SCHEMA or doc.get("kind") != "lyapunov_net":
        raise ValueError("not a recognized certificate checkpoint")
    aux = ()
    if doc["aux_names"]:
        if system is None:
            raise ValueError("checkpoint uses auxiliary features; a system is required")
        aux = system.aux_features
        if [name for name, _ in aux] != doc["aux_names"]:
            raise ValueError("auxiliary features do not match the checkpoint")
    net = LyapunovNet(
        doc["n_state"],
        aux,
        hidden=tuple(doc["hidden"]),
        d=doc["smoothing"],
        eps=doc["margin"],
    )
    state = {
        t["name"]: torch.tensor(t["data"], dtype=torch.float64).reshape(t["shape"])
        for t in doc["tensors"]
    }
    net.load_state_dict(state)
    return net
