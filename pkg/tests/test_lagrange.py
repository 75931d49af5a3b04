import numpy as np
import pytest
import torch

import oracles
from tagtrack.grid import compose_fields
from tagtrack.lagrange import compose_sequence, track_points

D = torch.float64


def _fields(n, size=32, max_abs=1.5, seed=0):
    return torch.stack([torch.from_numpy(oracles.smooth_field((size, size), max_abs, 4.0, seed + k)) for k in range(n)])


def test_zero_fields():
    assert torch.equal(compose_sequence(torch.zeros(4, 2, 8, 8, dtype=D)), torch.zeros(4, 2, 8, 8, dtype=D))


def test_translation_accumulates():
    inf = torch.zeros(5, 2, 16, 16, dtype=D)
    inf[:, 0] = 1.0
    lag = compose_sequence(inf)
    for n in range(5):
        assert torch.allclose(lag[n, 0, 4:-4, 4:-4], torch.full((8, 8), n + 1.0, dtype=D), atol=1e-6)
        assert torch.allclose(lag[n, 1], torch.zeros(16, 16, dtype=D), atol=1e-6)


def test_matches_sequential_point_tracking():
    inf = _fields(5, 48, 1.5, 10)
    lag = compose_sequence(inf)
    rng = np.random.default_rng(0)
    pts = rng.uniform(14, 34, size=(20, 2))
    for n in range(5):
        want = []
        for x, y in pts:
            for k in range(n + 1):
                f = inf[k].numpy()
                x, y = x + oracles.bilinear(f[0], x, y), y + oracles.bilinear(f[1], x, y)
            want.append((x, y))
        got = track_points(lag[n], torch.from_numpy(pts)).numpy()
        assert np.abs(got - np.array(want)).max() < 0.05


def test_first_field_is_copied_exactly():
    inf = _fields(3)
    assert torch.equal(compose_sequence(inf)[0], inf[0])


def test_prefix_property():
    inf = _fields(6)
    full = compose_sequence(inf)
    for k in range(1, 6):
        assert torch.equal(compose_sequence(inf[:k]), full[:k])


def test_two_fields_equal_compose_fields():
    inf = _fields(2)
    assert torch.equal(compose_sequence(inf)[1], compose_fields(inf[1], inf[0]))


def test_accepts_list_and_batch_dims():
    inf = _fields(3)
    assert torch.equal(compose_sequence(list(inf)), compose_sequence(inf))
    batched = compose_sequence(inf[:, None].expand(3, 2, 2, 32, 32))
    assert torch.equal(batched[:, 1], compose_sequence(inf))


def test_empty_and_mismatch():
    with pytest.raises(ValueError):
        compose_sequence([])
    with pytest.raises(ValueError):
        compose_sequence([torch.zeros(2, 8, 8), torch.zeros(2, 8, 9)])


def test_gradient_flow():
    inf = _fields(3, 12, 1.0, 20)
    w = torch.from_numpy(np.random.default_rng(1).random((3, 2, 12, 12)))
    assert oracles.fd_check(lambda f: (compose_sequence(f) * w).sum(), inf, probes=60) < 1e-3


def test_late_field_depends_on_every_interframe_field():
    inf = _fields(4, 12, 1.0, 30).requires_grad_(True)
    compose_sequence(inf)[-1].sum().backward()
    for k in range(4):
        assert inf.grad[k].abs().sum() > 0


class TestTrackPoints:
    def test_zero_field(self):
        pts = torch.tensor([[1.5, 2.0], [7.0, 0.25]], dtype=D)
        assert torch.equal(track_points(torch.zeros(2, 8, 8, dtype=D), pts), pts)

    def test_constant_shift(self):
        lag = torch.zeros(2, 8, 8, dtype=D)
        lag[0], lag[1] = 2.0, -1.0
        pts = torch.tensor([[1.5, 2.0], [7.0, 0.25]], dtype=D)
        assert torch.allclose(track_points(lag, pts), pts + torch.tensor([2.0, -1.0], dtype=D))

    def test_sampling_oracle(self):
        lag = _fields(1, 16, 2.0, 40)[0]
        pts = np.random.default_rng(3).uniform(0, 15, (30, 2))
        got = track_points(lag, torch.from_numpy(pts)).numpy()
        f = lag.numpy()
        want = [(x + oracles.bilinear(f[0], x, y), y + oracles.bilinear(f[1], x, y)) for x, y in pts]
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_output_not_clamped(self):
        lag = torch.zeros(2, 8, 8, dtype=D)
        lag[0] = 5.0
        out = track_points(lag, torch.tensor([[6.0, 3.0]], dtype=D))
        assert out[0, 0].item() == 11.0

    def test_non_finite(self):
        with pytest.raises(ValueError, match="invalid point"):
            track_points(torch.zeros(2, 8, 8), torch.tensor([[float("nan"), 1.0]]))
