import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pathvit.analysis import (
    LOG_FLOOR,
    cosine_profile,
    dft2,
    fourier_profile,
    path_ablation_eval,
    radial_amplitude,
    scale_profile,
    token_grid,
)
from pathvit.data import EmptyDatasetError
from pathvit.ensemble import PathMask, decompose_paths, ensemble_combine
from pathvit.tensor import DimensionError
from pathvit.vit import cascade_forward, classify, patch_embed

from conftest import random_images, random_weights

vec = arrays(np.float64, 6, elements=st.floats(-10, 10, allow_nan=False))


def loop_dft2(g):
    n, m = g.shape
    out = np.zeros((n, m), dtype=complex)
    for u in range(n):
        for v in range(m):
            s = 0j
            for h in range(n):
                for w in range(m):
                    s += g[h, w] * complex(math.cos(-2 * math.pi * (u * h / n + v * w / m)), math.sin(-2 * math.pi * (u * h / n + v * w / m)))
            out[u, v] = s
    return out


# angles


def test_cosine_examples():
    x_hat = np.array([[1.0, 0.0]])
    prof = cosine_profile([np.array([[2.0, 0.0]]), np.array([[-3.0, 0.0]]), np.array([[0.0, 5.0]])], x_hat)
    assert prof.values[0] == 0.0
    assert prof.values[1] == pytest.approx(math.pi, abs=1e-12)
    assert prof.values[2] == pytest.approx(math.pi / 2, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(vec, vec, st.floats(0.1, 100))
def test_cosine_scale_invariant(a, b, c):
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    p1 = cosine_profile([a[None]], b[None]).values[0]
    p2 = cosine_profile([c * a[None]], b[None]).values[0]
    assert abs(p1 - p2) <= 1e-7
    assert 0.0 <= p1 <= math.pi


def test_cosine_zero_norm_undefined():
    prof = cosine_profile([np.zeros((2, 3)), np.ones((2, 3))], np.ones((2, 3)))
    assert prof.defined == [False, True]
    assert prof.rows()[0]["angle"] == ""


def test_cosine_on_model_paths(tiny_config):
    w = random_weights(tiny_config)
    ps = decompose_paths(patch_embed(random_images(tiny_config, 3), tiny_config, w), tiny_config, w)
    prof = cosine_profile(ps, ensemble_combine(ps), tiny_config)
    assert len(prof.values) == 5 and all(prof.defined)
    assert prof.metadata["samples"] == 3


# l1 scale


def test_scale_example():
    assert scale_profile([np.array([[1.0, -2.0, 3.0]])]).values == [6.0]
    assert scale_profile([np.zeros((1, 4))]).values == [0.0]


@settings(max_examples=50, deadline=None)
@given(vec, st.floats(-50, 50))
def test_scale_homogeneous(a, c):
    base = scale_profile([a[None]]).values[0]
    assert scale_profile([c * a[None]]).values[0] == pytest.approx(abs(c) * base, rel=1e-12, abs=1e-12)


# spectrum


def test_dft_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        g = rng.standard_normal((8, 8))
        ref = loop_dft2(g)
        got = dft2(g)
        assert np.abs(got - ref).max() / np.abs(ref).max() <= 1e-10


def test_dft_matches_library_fft(rng):
    g = rng.standard_normal((6, 6, 3))
    assert np.abs(dft2(g) - np.fft.fft2(g, axes=(0, 1))).max() <= 1e-10


@pytest.mark.parametrize("k", [1, 2, 3])
def test_planted_frequency_peaks_at_its_radius(k):
    n = 8
    x = np.arange(n)
    grid = 1.0 + np.cos(2 * np.pi * k * x / n)[None, :].repeat(n, axis=0)
    prof = fourier_profile(grid.reshape(n * n, 1))
    rel = np.array(prof.relative_log_amplitude)
    assert prof.radii == list(range(5))
    assert int(np.argmax(rel[1:])) + 1 == k
    # both +/-k bins have amplitude n*n/2, the bin-0 term n*n; the ring mean dilutes the peak
    ring = radial_amplitude(grid[..., None])
    assert ring[0] == pytest.approx(n * n, rel=1e-12)


def test_constant_map_reports_floor():
    rel = fourier_profile(np.full((16, 4), 3.0)).relative_log_amplitude
    assert rel[0] == 0.0
    assert all(v == LOG_FLOOR for v in rel[1:])


def test_bin_zero_is_exactly_zero(rng):
    assert fourier_profile(rng.standard_normal((17, 4)), has_class_token=True).relative_log_amplitude[0] == 0.0


def test_non_square_token_count():
    with pytest.raises(DimensionError):
        token_grid(np.ones((15, 4)), has_class_token=False)


# ablation


def _batches(config, n=2):
    rng = np.random.default_rng(5)
    for b in range(n):
        yield random_images(config, 4, seed=b), rng.integers(0, 2, 4)


def test_full_mask_matches_cascade_accuracy(tiny_config):
    w = random_weights(tiny_config)
    rows = path_ablation_eval(tiny_config, w, _batches(tiny_config), [PathMask.full(5), PathMask.last(5, 2)])
    correct = 0
    for images, labels in _batches(tiny_config):
        x_n, _ = cascade_forward(patch_embed(images, tiny_config, w), tiny_config, w)
        correct += int((np.argmax(classify(x_n, tiny_config, w).data, -1) == labels).sum())
    assert rows[0].correct == correct and rows[0].total == 8
    assert rows[1].to_dict()["paths"] == "p3,p4"


def test_zero_path_does_not_change_accuracy(tiny_config):
    w = random_weights(tiny_config)
    for name, t in w.items():
        if name.startswith("blocks.2."):
            t.data[:] = 0.0
    with_p2 = PathMask.full(5)
    without_p2 = PathMask.from_indices(5, [0, 1, 3, 4])
    a, b = path_ablation_eval(tiny_config, w, _batches(tiny_config), [with_p2, without_p2])
    assert a.accuracy == b.accuracy


def test_ablation_empty_input(tiny_config):
    with pytest.raises(EmptyDatasetError):
        path_ablation_eval(tiny_config, random_weights(tiny_config), [], [PathMask.full(5)])
