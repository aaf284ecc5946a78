import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from optreelab.errors import ConfigError, LengthError, MaskedConstError, ReconstructionError
from optreelab.tree import (
    ConstVec, GenConfig, Ots, build_tree, eval_tree, grad_consts, ots_to_tree, sample_constants,
    sample_tree, tree_to_ots,
)
from optreelab.vocab import OperatorVocab

from oracles import eval_points

V = OperatorVocab(1)
V2 = OperatorVocab(2)


def ids(*names, vocab=V):
    return [vocab.id(n) for n in names]


# -- vocabulary ---------------------------------------------------------------


def test_vocab_layout():
    assert (V.PAD, V.BOS, V.EOS, V.MASK) == (1, 2, 3, 4)
    assert V.size == 19
    assert sorted(V.id(t.name) for t in V.tokens) == list(range(1, 20))
    assert [t.name for t in V.tokens].count("C") == 1
    for t in V.tokens:
        assert t.arity == {"binary-op": 2, "unary-op": 1}.get(t.kind, 0)


def test_vocab_json_roundtrip():
    w = OperatorVocab(3, unary_ops=("sin", "exp"))
    assert OperatorVocab.from_json(w.to_json()) == w


# -- sampling -------------------------------------------------------------------


def test_single_node_tree_is_a_variable():
    t = sample_tree(GenConfig(node_range=(1, 1), p_const_leaf=0.0), seed=4)
    assert t.n_nodes == 1 and t.root.name == "x1"


def test_sampling_is_deterministic():
    cfg = GenConfig()
    assert sample_tree(cfg, 99).root == sample_tree(cfg, 99).root


def test_node_counts_stay_in_range():
    cfg = GenConfig(node_range=(5, 15))
    counts = {sample_tree(cfg, s).n_nodes for s in range(10_000)}
    assert min(counts) >= 5 and max(counts) <= 15
    # every size in the range shows up
    assert counts == set(range(5, 16))


def test_bad_config_rejected():
    with pytest.raises(ConfigError):
        sample_tree(GenConfig(node_range=(5, 30)))
    with pytest.raises(ConfigError):
        sample_tree(GenConfig(p_const_leaf=1.5))


def test_const_slots_in_preorder():
    t = build_tree(("add", ("mul", "C", "x1"), ("sub", "C", "C")), V)
    slots = [n.slot for n in t.preorder() if n.name == "C"]
    assert slots == [0, 1, 2]


def test_sampled_constants_in_range():
    t = build_tree(("add", ("mul", "C", "x1"), "C"), V)
    for s in range(50):
        c = sample_constants(t, s)
        assert c.true_len == 2 and np.all(np.abs(c.values) <= 2.0)


def test_masked_constants_carry_zero():
    c = ConstVec.visible([1.5, -0.25]).masked()
    assert not c.mask.any() and np.all(c.values == 0.0)


# -- serialization ---------------------------------------------------------------


def test_ots_examples():
    o = tree_to_ots(build_tree(("add", "x1", "C"), V))
    assert o.unpadded == tuple(ids("BOS", "add", "x1", "C", "EOS"))
    assert o.ids[5:] == (V.PAD,) * 19 and len(o) == 24
    o = tree_to_ots(build_tree(("sin", "x1"), V))
    assert o.unpadded == tuple(ids("BOS", "sin", "x1", "EOS"))


def test_ots_length_is_nodes_plus_two():
    cfg = GenConfig()
    for s in range(1000):
        t = sample_tree(cfg, s)
        o = tree_to_ots(t)
        assert o.true_len == t.n_nodes + 2
        assert all(1 <= i <= V.size for i in o.ids)
        assert o.ids[o.true_len - 1] == V.EOS and set(o.ids[o.true_len :]) <= {V.PAD}


def test_ots_refuses_overlong_tree():
    t = sample_tree(GenConfig(node_range=(15, 15)), 0)
    with pytest.raises(LengthError):
        tree_to_ots(t, max_len=16)


def test_reconstruct_example():
    o = Ots.from_sequence(ids("BOS", "add", "x1", "C", "EOS"), V, 24)
    t = ots_to_tree(o, ConstVec.visible([1.5]), V)
    assert t == build_tree(("add", "x1", "C"), V)
    assert eval_tree(t, ConstVec.visible([1.5]), np.array([[2.0]]))[0] == 3.5


@pytest.mark.parametrize(
    "seq, reason",
    [
        (["BOS", "add", "x1", "EOS"], "dangling-children"),
        (["BOS", "x1", "x1", "EOS"], "trailing-tokens"),
        (["BOS", "sin", "x1"], "missing-EOS"),
        (["BOS", "MASK", "EOS"], "unknown-token"),
        (["x1", "EOS"], "unknown-token"),
        (["BOS", "x1", "EOS", "x1"], "trailing-tokens"),
    ],
)
def test_reconstruction_failures(seq, reason):
    with pytest.raises(ReconstructionError) as err:
        ots_to_tree(ids(*seq), None, V)
    assert err.value.reason == reason


def test_const_underflow():
    with pytest.raises(ReconstructionError) as err:
        ots_to_tree(ids("BOS", "add", "C", "C", "EOS"), ConstVec.visible([1.0]), V)
    assert err.value.reason == "const-underflow"


def test_out_of_range_id():
    with pytest.raises(ReconstructionError) as err:
        ots_to_tree([V.BOS, 77, V.EOS], None, V)
    assert err.value.reason == "unknown-token"


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 3))
def test_roundtrip_property(seed, dims):
    cfg = GenConfig(var_count=dims)
    t = sample_tree(cfg, seed)
    c = sample_constants(t, seed)
    o = tree_to_ots(t)
    back = ots_to_tree(o, c, cfg.vocab)
    assert back == t
    assert tree_to_ots(back) == o


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(1, 19), min_size=0, max_size=24))
def test_reconstruction_total_on_garbage(seq):
    # any sequence either rebuilds or fails with a typed reason, never anything else
    try:
        t = ots_to_tree(seq, None, V)
    except ReconstructionError as err:
        assert err.reason in ReconstructionError.REASONS
    else:
        assert list(tree_to_ots(t, max(24, len(seq))).unpadded) == seq[: t.n_nodes + 2]


# -- evaluation ---------------------------------------------------------------------


def test_eval_examples():
    t = build_tree(("add", "x1", "C"), V)
    assert eval_tree(t, ConstVec.visible([1.0]), np.array([[2.0]]))[0] == 3.0
    t = build_tree(("div", "x1", "x1"), V)
    assert math.isnan(eval_tree(t, ConstVec.empty(), np.array([[0.0]]))[0])
    t = build_tree(("log", "x1"), V)
    assert np.isnan(eval_tree(t, ConstVec.empty(), np.array([[-1.0], [0.0]]))).all()


def test_eval_masked_constants_refused():
    t = build_tree(("add", "x1", "C"), V)
    with pytest.raises(MaskedConstError):
        eval_tree(t, ConstVec.visible([1.0]).masked(), np.zeros((1, 1)))


def _oracle_sweep(dims, kernels):
    cfg = GenConfig(var_count=dims)
    rng = np.random.default_rng(dims)
    for s in range(40):
        t = sample_tree(cfg, 1000 + s)
        c = sample_constants(t, s)
        pts = rng.uniform(-3, 3, size=(1000, dims))
        got = eval_tree(t, c, pts)
        ref = np.array(eval_points(t, c.values, pts, kernels))
        assert np.array_equal(np.isnan(got), np.isnan(ref)), t
        ok = ~np.isnan(ref)
        yield t, got[ok], ref[ok]


@pytest.mark.parametrize("dims", [1, 2])
def test_eval_matches_recursive_oracle(dims):
    # independent tree walk and domain handling over the same elementary kernels
    worst = max(float(np.max(np.abs(g - r), initial=0.0)) for _, g, r in _oracle_sweep(dims, "numpy"))
    assert worst < 1e-12


@pytest.mark.parametrize("dims", [1, 2])
def test_eval_matches_libm_oracle(dims):
    # libm rounds differently in the last place; deep compositions such as
    # exp(...) of large arguments amplify that, so compare relatively
    for t, g, r in _oracle_sweep(dims, "math"):
        rel = np.abs(g - r) / np.maximum(1.0, np.abs(r))
        assert np.max(rel, initial=0.0) < 1e-9, t


# -- constant gradients ---------------------------------------------------------------


def test_grad_examples():
    t = build_tree(("mul", "C", "x1"), V)
    g = grad_consts(t, ConstVec.visible([0.7]), np.array([[2.0]]))
    assert g.jacobian[0, 0] == 2.0
    t = build_tree(("sin", "C"), V)
    g = grad_consts(t, ConstVec.visible([0.3]), np.zeros((4, 1)))
    assert np.allclose(g.jacobian[:, 0], math.cos(0.3), rtol=0, atol=1e-15)


def _central(t, values, k, pts, h):
    up, dn = values.copy(), values.copy()
    up[k] += h
    dn[k] -= h
    return (eval_tree(t, ConstVec.visible(up), pts) - eval_tree(t, ConstVec.visible(dn), pts)) / (2 * h)


def test_grad_matches_finite_differences():
    cfg = GenConfig(max_consts=4)
    rng = np.random.default_rng(0)
    h = 1e-6
    checked = 0
    for s in range(200):
        t = sample_tree(cfg, s)
        if t.n_const == 0:
            continue
        c = sample_constants(t, s)
        pts = rng.uniform(-2, 2, size=(20, 1))
        g = grad_consts(t, c, pts)
        for k in range(t.n_const):
            fd = _central(t, c.values, k, pts, h)
            fd2 = _central(t, c.values, k, pts, h / 2)
            a = g.jacobian[:, k]
            ok = g.valid & np.isfinite(fd)
            # keep rows where the difference quotient itself has converged:
            # near poles or fast oscillation it is meaningless at this step size
            ok &= np.abs(fd - fd2) <= 1e-7 * np.maximum(1.0, np.abs(fd))
            if not ok.any():
                continue
            rel = np.abs(a[ok] - fd[ok]) / np.maximum(np.maximum(np.abs(a[ok]), np.abs(fd[ok])), 1e-3)
            assert rel.max() < 1e-5, (t, c, k)
            checked += int(ok.sum())
    assert checked > 1000
