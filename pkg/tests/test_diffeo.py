import warnings

import numpy as np
import pytest
import torch

import oracles
from tagtrack.diffeo import SSConfig, integrate_svf, invert_svf
from tagtrack.grid import compose_fields, count_nonpositive, jacobian_determinant, sample_field

D = torch.float64


def _svf(size=64, max_abs=3.0, sigma=6.0, seed=0):
    return torch.from_numpy(oracles.smooth_field((size, size), max_abs, sigma, seed))


def _rotation_svf(size=64, omega=0.1):
    ys, xs = torch.meshgrid(torch.arange(size, dtype=D), torch.arange(size, dtype=D), indexing="ij")
    c = (size - 1) / 2
    return torch.stack([-omega * (ys - c), omega * (xs - c)])


def test_zero_velocity():
    assert torch.equal(integrate_svf(torch.zeros(2, 16, 16, dtype=D)), torch.zeros(2, 16, 16, dtype=D))


def test_constant_velocity_is_translation():
    v = torch.zeros(2, 32, 32, dtype=D)
    v[0] = 3.0
    phi = integrate_svf(v)
    assert torch.allclose(phi[0], torch.full((32, 32), 3.0, dtype=D), atol=1e-5)
    assert torch.allclose(phi[1], torch.zeros(32, 32, dtype=D), atol=1e-5)


def test_matches_euler_flow_on_rotation():
    v = _rotation_svf()
    phi = integrate_svf(v)
    c = 31.5
    pts = np.array([[x, y] for y in range(16, 48, 4) for x in range(16, 48, 4)], dtype=np.float64)
    vel = lambda p: 0.1 * np.stack([-(p[:, 1] - c), p[:, 0] - c], axis=1)
    want = oracles.euler_flow(vel, pts)
    got = pts + sample_field(phi, torch.from_numpy(pts)).numpy()
    assert np.abs(got - want).max() < 0.01


def test_inverse_of_constant():
    v = torch.zeros(2, 32, 32, dtype=D)
    v[0] = 3.0
    assert torch.allclose(invert_svf(v)[0], torch.full((32, 32), -3.0, dtype=D), atol=1e-5)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_inverse_consistency(seed):
    v = _svf(seed=seed)
    residual = compose_fields(integrate_svf(v), invert_svf(v))
    assert residual[:, 8:-8, 8:-8].norm(dim=0).mean().item() < 0.05


@pytest.mark.parametrize("seed", [3, 4, 5, 6])
def test_output_is_diffeomorphic(seed):
    phi = integrate_svf(_svf(seed=seed, sigma=4.0))
    assert count_nonpositive(jacobian_determinant(phi)) == 0


def test_scaling_consistency():
    v = _svf(seed=7)
    diff = (integrate_svf(v, 7) - integrate_svf(v, 9))[:, 8:-8, 8:-8]
    assert diff.norm(dim=0).mean().item() < 0.01


def test_batched_matches_single():
    v = torch.stack([_svf(32, seed=s) for s in range(3)])
    out = integrate_svf(v)
    for k in range(3):
        assert torch.allclose(out[k], integrate_svf(v[k]))


@pytest.mark.parametrize("steps", [0, 13])
def test_step_range(steps):
    with pytest.raises(ValueError):
        SSConfig(steps=steps)
    with pytest.raises(ValueError):
        integrate_svf(torch.zeros(2, 8, 8), steps)


def test_non_finite_rejected():
    v = torch.zeros(2, 8, 8)
    v[0, 2, 2] = float("nan")
    with pytest.raises(ValueError):
        integrate_svf(v)


def test_large_step_warns():
    v = torch.full((2, 16, 16), 100.0)
    with pytest.warns(RuntimeWarning):
        integrate_svf(v, 7)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        integrate_svf(torch.full((2, 16, 16), 10.0), 7)


def test_gradient_matches_finite_differences():
    v = _svf(16, 2.0, 2.0, 8)
    w = torch.from_numpy(np.random.default_rng(0).random((2, 16, 16)))
    assert oracles.fd_check(lambda x: (integrate_svf(x) * w).sum(), v, probes=50) < 1e-3
