"""Finite-difference validation of the hand-written adjoints.

The acceptance suite runs every target at its full point count; these run
reduced counts for speed and additionally cover the feature-map gradients
directly.
"""
import numpy as np
import pytest

from l2vit.analysis import GRAD_TOLERANCES, grad_check
from l2vit.attention import feature_map, feature_map_grad


@pytest.mark.parametrize("target", ["linear", "attn", "lcm", "cpe"])
def test_primitive_targets(target):
    err = grad_check(target, seed=0, points=3, directions=2)
    assert err <= GRAD_TOLERANCES[target], f"{target}: {err:.3e}"


@pytest.mark.parametrize("target", ["lwa", "lga"])
def test_block_targets(target):
    err = grad_check(target, seed=1, points=2, directions=2)
    assert err <= GRAD_TOLERANCES[target], f"{target}: {err:.3e}"


def test_block_alias_covers_both():
    err = grad_check("block", seed=2, points=1, directions=1)
    assert err <= GRAD_TOLERANCES["block"]


def test_unknown_target_rejected():
    with pytest.raises(ValueError):
        grad_check("softmax")


@pytest.mark.parametrize("groups", [1, 2, 4])
def test_conv_vjp_all_group_branches(groups):
    # the model exercises dense and depth-wise convolutions only; check the
    # general grouped branch of the adjoint directly
    from l2vit import adjoints
    from l2vit.numerics import ConvSpec

    rng = np.random.default_rng(groups)
    spec = ConvSpec(4, 8, 3, 3, stride=2, padding=1, groups=groups)
    x = rng.standard_normal((4, 7, 7))
    w = rng.standard_normal(spec.weight_shape)
    b = rng.standard_normal(8)
    y, ctx = adjoints.conv2d_fwd(x, w, b, spec, keep=True)
    gy = rng.standard_normal(y.shape)
    analytic_grads = adjoints.conv2d_vjp(ctx, gy)

    def loss(xi, wi, bi):
        return float((gy * adjoints.conv2d_fwd(xi, wi, bi, spec, False)[0]).sum())

    h = 1e-6
    args = [x, w, b]
    for slot, grad in enumerate(analytic_grads):
        u = rng.standard_normal(args[slot].shape)
        u /= np.sqrt((u * u).sum())
        plus = [a + h * u if i == slot else a for i, a in enumerate(args)]
        minus = [a - h * u if i == slot else a for i, a in enumerate(args)]
        numeric = (loss(*plus) - loss(*minus)) / (2 * h)
        analytic = float((grad * u).sum())
        assert abs(analytic - numeric) / max(abs(numeric), 1e-8) < 1e-8


@pytest.mark.parametrize("kind", ["relu", "leaky_relu", "none", "l1_norm"])
def test_feature_map_grads_against_central_differences(kind):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, 5))
    x[np.abs(x) < 1e-3] = 0.5  # stay clear of the rectifier kinks
    w = rng.standard_normal((6, 5))
    analytic = float((feature_map_grad(x, kind, w) * np.ones_like(x)).sum())
    # directional derivative along the all-ones direction
    h = 1e-6
    num = ((w * feature_map(x + h, kind)).sum()
           - (w * feature_map(x - h, kind)).sum()) / (2 * h)
    assert abs(analytic - num) / max(abs(num), 1e-8) < 1e-7
