import numpy as np
import pytest

from optreelab.errors import NoDescentError, ReconstructionError
from optreelab.funcimg import render_image
from optreelab.lbfgs import fit_constants_lbfgs, lbfgs, mse_objective
from optreelab.tree import ConstVec, Ots, build_tree, tree_to_ots
from optreelab.vocab import OperatorVocab

V = OperatorVocab(1)


def rosenbrock(x):
    f = (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2
    g = np.array([-2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2), 200 * (x[1] - x[0] ** 2)])
    return f, g


def test_lbfgs_rosenbrock():
    res = lbfgs(rosenbrock, np.array([-1.2, 1.0]), max_iter=500)
    assert np.allclose(res.x, [1, 1], atol=1e-6)


def test_lbfgs_quadratic_is_exact():
    a = np.diag([1.0, 10.0, 100.0])
    res = lbfgs(lambda x: (0.5 * x @ a @ x, a @ x), np.ones(3))
    assert res.converged and np.max(np.abs(res.x)) < 1e-8


def test_linear_constant_from_zero(grid):
    tree = build_tree(("mul", "C", "x1"), V)
    img = render_image(tree, ConstVec.visible([1.7]), grid, noise_sigma=0.0)
    fit = fit_constants_lbfgs(tree_to_ots(tree), img, grid, V, init=ConstVec.visible([0.0]), restarts=1)
    assert fit.consts.values[0] == pytest.approx(1.7, abs=1e-6)


def test_start_at_truth(grid):
    tree = build_tree(("add", ("sin", ("mul", "C", "x1")), "C"), V)
    c = ConstVec.visible([0.8, -1.1])
    clean = render_image(tree, c, grid, noise_sigma=0.0)
    fit = fit_constants_lbfgs(tree_to_ots(tree), clean, grid, V, init=c, restarts=1)
    assert fit.iterations == 0 and fit.mse < 1e-20
    noisy = render_image(tree, c, grid, noise_sigma=1e-3, seed=4)
    f0, _ = mse_objective(tree, noisy, grid)(c.values)
    # standardized residuals: noise variance divided by the channel variance
    expect = np.mean((1e-3 / noisy.channel_std) ** 2)
    assert f0 == pytest.approx(expect, rel=0.1)
    fit = fit_constants_lbfgs(tree_to_ots(tree), noisy, grid, V, init=c, restarts=1)
    assert fit.mse <= f0 and np.max(np.abs(fit.consts.values - c.values)) < 1e-3


def test_no_constants(grid):
    tree = build_tree(("sin", "x1"), V)
    fit = fit_constants_lbfgs(tree_to_ots(tree), render_image(tree, ConstVec.empty(), grid, 0.0), grid, V)
    assert fit.consts.true_len == 0 and fit.mse < 1e-20


def test_no_descent_at_start():
    with pytest.raises(NoDescentError):
        lbfgs(lambda x: (np.nan, x), np.ones(2))

    # every trial step leaves the domain, so the first line search cannot succeed
    def cliff(x):
        if np.any(x != 0):
            return np.inf, np.full_like(x, np.nan)
        return 0.0, np.ones_like(x)

    with pytest.raises(NoDescentError):
        lbfgs(cliff, np.zeros(2))


def test_malformed_skeleton(grid):
    tree = build_tree(("mul", "C", "x1"), V)
    img = render_image(tree, ConstVec.visible([1.0]), grid, 0.0)
    with pytest.raises(ReconstructionError):
        fit_constants_lbfgs(Ots.from_sequence([V.BOS, V.id("add"), V.EOS], V, 24), img, grid, V)
