import numpy as np
import pytest

from pathvit.config import ModelConfig
from pathvit.gradcheck import finite_difference_gradient, relative_error
from pathvit.tensor import Tensor
from pathvit.vit import init_weights


def numeric_grads(fn, *arrays, h=1e-5):
    """Finite-difference gradient of scalar ``fn(*tensors)`` for every entry of every input."""
    tensors = [Tensor(np.array(a, dtype=np.float64)) for a in arrays]
    out = []
    for k, t in enumerate(tensors):
        idx = [(k, i) for i in range(t.data.size)]
        out.append(finite_difference_gradient(lambda: fn(*tensors), tensors, h, idx).reshape(t.shape))
    return out


def analytic_grads(fn, *arrays):
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    fn(*tensors).backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def assert_grads_match(fn, *arrays, tol=1e-6):
    for a, n in zip(analytic_grads(fn, *arrays), numeric_grads(fn, *arrays)):
        assert relative_error(a, n).max() <= tol


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(depth=4, embed_dim=16, num_heads=2, patch_size=8, image_size=32)


@pytest.fixture
def hier_config():
    return ModelConfig(depth=6, embed_dim=16, num_heads=2, patch_size=4, image_size=32, token_mode="average_pool", stages=((2, True), (2, True), (2, False)))


def random_weights(config, seed=0, precision="double"):
    return init_weights(config, seed=seed, precision=precision, std=0.3, random_affine=True)


def random_images(config, batch=2, seed=0, dtype=np.float64):
    r = np.random.default_rng(seed)
    return r.standard_normal((batch, config.image_size, config.image_size, config.in_channels)).astype(dtype)


def kd_objective(config, weights, images, labels, dcfg, ce_weight=1.0):
    """CE + KD with teachers and head pinned at their current values.

    Returns ``loss_fn`` whose ordinary derivative equals the stop-gradient
    gradient at the current point, so finite differences can check it.
    """
    from pathvit.distill import total_kd_loss
    from pathvit.ensemble import decompose_paths, ensemble_combine
    from pathvit.tensor import cross_entropy, no_grad
    from pathvit.vit import classify, patch_embed

    with no_grad():
        base = decompose_paths(patch_embed(images, config, weights), config, weights)
    teachers = {t: Tensor(base.paths[base.index_of(t)].data.copy()) for _, t in dcfg.pairs(config.depth)}
    head = weights.copy()

    def loss_fn():
        ps = decompose_paths(patch_embed(images, config, weights), config, weights)
        logits = classify(ensemble_combine(ps), config, weights)
        kd = total_kd_loss(ps, config, weights, dcfg, teachers=teachers, head=head)
        return cross_entropy(logits, labels) * ce_weight + kd

    return loss_fn


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.summary_lines():
            terminalreporter.write_line(line)
