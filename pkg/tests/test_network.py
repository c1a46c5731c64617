import numpy as np
import pytest
import torch

from lyapgen.dynamics import get_system
from lyapgen.network import (
    Icnn,
    NonFiniteBatchError,
    Trainer,
    build_lyapunov_net,
    expression_to_torch,
    forward,
    grad_state,
    load_checkpoint,
    lyapunov_risk,
    sample_dataset,
    save_checkpoint,
    smoothed_relu,
)
from lyapgen.expressions import parse


def t(values):
    return torch.as_tensor(values, dtype=torch.float64)


class TestSmoothedRelu:
    def test_branches(self):
        d = 0.1
        assert float(smoothed_relu(t(-1.0), d)) == 0.0
        assert float(smoothed_relu(t(0.05), d)) == pytest.approx(0.05**2 / 0.2)
        assert float(smoothed_relu(t(0.3), d)) == pytest.approx(0.3 - 0.05)

    def test_continuity_at_knots(self):
        d = 0.1
        h = 1e-12
        gap = abs(float(smoothed_relu(t(d - h), d)) - float(smoothed_relu(t(d + h), d)))
        assert gap <= 3 * h
        assert float(smoothed_relu(t(d), d)) == pytest.approx(d / 2, abs=1e-15)
        assert float(smoothed_relu(t(0.0), d)) == 0.0

    def test_derivative_limits(self):
        d = 0.1

        def deriv(x0):
            x = t(x0).requires_grad_(True)
            smoothed_relu(x, d).backward()
            return float(x.grad)

        assert deriv(d - 1e-9) == pytest.approx(1.0, abs=1e-7)
        assert deriv(d + 1e-9) == pytest.approx(1.0, abs=1e-7)
        assert deriv(-1e-9) == 0.0
        assert deriv(1e-9) == pytest.approx(0.0, abs=1e-7)


class TestLyapunovNet:
    def test_zero_at_origin_exactly(self):
        for name in ("van_der_pol", "wheel_pendulum"):
            sys = get_system(name)
            net = build_lyapunov_net(sys, hidden=(16, 16), seed=3)
            assert float(forward(net, np.zeros(sys.dim))[0]) == 0.0

    def test_margin_lower_bound(self):
        sys = get_system("trig3d")
        net = build_lyapunov_net(sys, hidden=(16, 16), seed=1)
        x = sys.sample(500, np.random.default_rng(0))
        v = forward(net, x)
        assert np.all(v - net.eps * (x**2).sum(axis=1) >= -1e-12)

    def test_epsilon_only_gradient(self):
        sys = get_system("van_der_pol")
        net = build_lyapunov_net(sys, hidden=(8, 8), seed=0)
        with torch.no_grad():
            for p in net.parameters():
                p.zero_()
        x = np.array([[0.3, -0.7], [1.0, 0.5]])
        np.testing.assert_allclose(grad_state(net, x), 2 * net.eps * x, atol=1e-15)

    def test_gradient_matches_finite_differences(self):
        for name, seed in (("van_der_pol", 2), ("wheel_pendulum", 4)):
            sys = get_system(name)
            net = build_lyapunov_net(sys, hidden=(12, 12), seed=seed)
            rng = np.random.default_rng(seed)
            pts = sys.sample(10, rng)
            g = grad_state(net, pts)
            for k, x in enumerate(pts):
                for i in range(sys.dim):
                    h = 1e-6 * (1 + abs(x[i]))
                    xp, xm = x.copy(), x.copy()
                    xp[i] += h
                    xm[i] -= h
                    fd = (forward(net, xp)[0] - forward(net, xm)[0]) / (2 * h)
                    assert abs(g[k, i] - fd) <= 1e-5 * max(1.0, abs(g[k, i]))

    def test_midpoint_convexity(self):
        sys = get_system("van_der_pol")
        net = build_lyapunov_net(sys, hidden=(32, 32), seed=7)
        rng = np.random.default_rng(7)
        a = t(rng.uniform(-2, 2, size=(10_000, 2)))
        b = t(rng.uniform(-2, 2, size=(10_000, 2)))
        with torch.no_grad():
            lhs = net.g((a + b) / 2)
            rhs = (net.g(a) + net.g(b)) / 2
        assert float((lhs - rhs).max()) <= 1e-9


class TestRisk:
    def test_matches_hinge_of_lie_values(self):
        sys = get_system("van_der_pol")
        net = build_lyapunov_net(sys, hidden=(8, 8), seed=5)
        x = sys.sample(64, np.random.default_rng(5))
        lie = (grad_state(net, x) * sys.rhs(x)).sum(axis=1)
        want = np.maximum(0.0, lie).mean()
        assert lyapunov_risk(net, sys, x).item() == pytest.approx(want, rel=1e-12)

    def test_zero_when_descending_everywhere(self):
        sys = get_system("van_der_pol")
        net = build_lyapunov_net(sys, hidden=(8, 8), seed=0)
        with torch.no_grad():
            for p in net.parameters():
                p.zero_()
        # V = eps*(x1^2+x2^2) so LfV = -2*eps*(1-x1^2)*x2^2 <= 0 on the box
        x = sys.sample(256, np.random.default_rng(1))
        assert lyapunov_risk(net, sys, x).item() == 0.0

    def test_order_invariance(self):
        sys = get_system("trig3d")
        net = build_lyapunov_net(sys, hidden=(8, 8), seed=9)
        x = sys.sample(128, np.random.default_rng(2))
        a = lyapunov_risk(net, sys, x).item()
        b = lyapunov_risk(net, sys, x[::-1].copy()).item()
        assert a == pytest.approx(b, rel=1e-12)


class TestTrainer:
    def test_deterministic_replay(self):
        sys = get_system("van_der_pol")
        batches = [sys.sample(64, np.random.default_rng(k)) for k in range(5)]
        states = []
        for _ in range(2):
            net = build_lyapunov_net(sys, hidden=(16, 16), seed=11)
            trainer = Trainer(net, lr=1e-3)
            for b in batches:
                trainer.step(sys, b)
            states.append({k: v.clone() for k, v in net.state_dict().items()})
        for k in states[0]:
            assert torch.equal(states[0][k], states[1][k])

    def test_zero_risk_step_keeps_parameters(self):
        sys = get_system("van_der_pol")
        net = build_lyapunov_net(sys, hidden=(8, 8), seed=0)
        with torch.no_grad():
            for p in net.parameters():
                p.zero_()
        before = {k: v.clone() for k, v in net.state_dict().items()}
        Trainer(net).step(sys, sys.sample(64, np.random.default_rng(3)))
        for k, v in net.state_dict().items():
            assert torch.equal(before[k], v)

    def test_projection_keeps_convex_weights(self):
        sys = get_system("path_following")
        net = build_lyapunov_net(sys, hidden=(16, 16), seed=2)
        trainer = Trainer(net, lr=5e-2)
        for k in range(10):
            trainer.step(sys, sys.sample(128, np.random.default_rng(k)))
        assert net.g.convexity_violation() == 0.0

    def test_nonfinite_batch_rejected_with_index(self):
        sys = get_system("van_der_pol")
        net = build_lyapunov_net(sys, hidden=(8, 8), seed=1)
        batch = np.array([[0.1, 0.2], [np.inf, 0.0]])
        with pytest.raises(NonFiniteBatchError) as err:
            Trainer(net).step(sys, batch)
        assert err.value.index == 1

    def test_parameter_gradient_matches_finite_differences(self):
        # nested quantity: the loss contains grad_x V, so this exercises
        # second-order differentiation through the whole certificate
        sys = get_system("van_der_pol")
        for seed in (0, 1):
            net = build_lyapunov_net(sys, hidden=(8,), seed=seed)
            batch = sys.sample(48, np.random.default_rng(seed + 10))
            risk = lyapunov_risk(net, sys, batch)
            params = list(net.parameters())
            grads = torch.autograd.grad(risk, params)
            for p, g in zip(params, grads):
                flat = p.detach().reshape(-1)
                gflat = g.reshape(-1)
                for k in range(flat.numel()):
                    h = 1e-5 * (1.0 + abs(float(flat[k])))
                    with torch.no_grad():
                        flat[k] += h
                    rp = lyapunov_risk(net, sys, batch).item()
                    with torch.no_grad():
                        flat[k] -= 2 * h
                    rm = lyapunov_risk(net, sys, batch).item()
                    with torch.no_grad():
                        flat[k] += h
                    fd = (rp - rm) / (2 * h)
                    ad = float(gflat[k])
                    assert abs(ad - fd) <= 1e-4 * max(abs(ad), abs(fd)) + 1e-8


class TestSampling:
    def test_dataset_contract(self):
        sys = get_system("van_der_pol")
        net = build_lyapunov_net(sys, hidden=(8, 8), seed=0)
        x, y = sample_dataset(net, sys, 1000, seed=42)
        assert x.shape == (1000, 2) and y.shape == (1000,)
        assert np.all(sys.contains(x))
        np.testing.assert_array_equal(y, forward(net, x))
        x2, y2 = sample_dataset(net, sys, 1000, seed=42)
        np.testing.assert_array_equal(x, x2)
        np.testing.assert_array_equal(y, y2)

    def test_rejects_empty(self):
        sys = get_system("van_der_pol")
        net = build_lyapunov_net(sys, hidden=(8, 8), seed=0)
        with pytest.raises(ValueError):
            sample_dataset(net, sys, 0, seed=1)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        sys = get_system("wheel_pendulum")
        net = build_lyapunov_net(sys, hidden=(8, 8), seed=6)
        path = tmp_path / "net.json"
        save_checkpoint(net, path)
        loaded = load_checkpoint(path, sys)
        x = sys.sample(20, np.random.default_rng(0))
        np.testing.assert_array_equal(forward(net, x), forward(loaded, x))

    def test_aux_requires_system(self, tmp_path):
        sys = get_system("wheel_pendulum")
        net = build_lyapunov_net(sys, hidden=(8, 8), seed=6)
        path = tmp_path / "net.json"
        save_checkpoint(net, path)
        with pytest.raises(ValueError, match="auxiliary"):
            load_checkpoint(path)


def test_expression_to_torch_matches_numpy():
    e = parse("sin(x1)*omc(x2) + x1^2/(x2 + 3) - 0.7")
    x = np.random.default_rng(0).uniform(-1, 1, size=(50, 2))
    from lyapgen.expressions import evaluate_many

    got = expression_to_torch(e, t(x)).numpy()
    np.testing.assert_allclose(got, evaluate_many(e, x), rtol=1e-14)
