import numpy as np
import pytest

from optreelab.errors import MissingKeyError, ShapeError, TokenizeError
from optreelab.formula import tree_to_formula
from optreelab.teacher import (
    TOKEN_ID, CachedTeacher, ConstantTeacher, HashTeacher, ImportedTeacher, TeacherHidden, formula_detokenize,
    formula_tokenize, teacher_export, teacher_extract_hash, teacher_import,
)
from optreelab.tree import GenConfig, build_tree, sample_constants, sample_tree
from optreelab.vocab import OperatorVocab


def emitted(n, seed=0):
    cfg = GenConfig(var_count=2)
    out = []
    for s in range(seed, seed + n):
        t = sample_tree(cfg, s)
        out.append(tree_to_formula(t, sample_constants(t, s)))
    return out


def test_tokenize_example():
    assert formula_tokenize("sin(x1)") == [TOKEN_ID[s] for s in ("sin", "(", "x1", ")")]
    with pytest.raises(TokenizeError):
        formula_tokenize("")
    with pytest.raises(TokenizeError):
        formula_tokenize("x1 % 2")


def test_tokenize_roundtrip_on_emitted_strings():
    for s in emitted(1000):
        assert formula_detokenize(formula_tokenize(s)) == s


def test_hash_teacher_is_frozen_and_shaped():
    s = "(sin(x1) * 1.25)"
    a, b = teacher_extract_hash(s, 32, 7), teacher_extract_hash(s, 32, 7)
    assert np.array_equal(a.values, b.values) and a.values.dtype == np.float32
    assert a.values.shape == (len(formula_tokenize(s)), 32)
    assert not np.array_equal(a.values, teacher_extract_hash(s, 32, 8).values)


def test_one_operator_changes_output():
    v = OperatorVocab(1)
    swaps = [("sin", "cos"), ("exp", "log"), ("add", "mul"), ("sub", "div"), ("tanh", "sqrt")]
    teacher = HashTeacher(64, 0)
    rng = np.random.default_rng(0)
    n = 0
    for i in range(100):
        a_op, b_op = swaps[i % len(swaps)]
        inner = ("mul", "C", "x1")
        if a_op in ("add", "mul", "sub", "div"):
            ta, tb = build_tree((a_op, inner, "x1"), v), build_tree((b_op, inner, "x1"), v)
        else:
            ta, tb = build_tree((a_op, inner), v), build_tree((b_op, inner), v)
        c = sample_constants(ta, int(rng.integers(1 << 30)))
        ma = teacher(tree_to_formula(ta, c)).values.mean(0)
        mb = teacher(tree_to_formula(tb, c)).values.mean(0)
        cos = float(ma @ mb / np.linalg.norm(ma) / np.linalg.norm(mb))
        assert cos < 1 - 1e-6
        n += 1
    assert n == 100


def test_constant_teacher_ignores_input():
    t = ConstantTeacher(16)
    assert np.array_equal(t("x1").values, t("(x1 + 2)").values)


def test_cached_teacher_matches_inner():
    inner = HashTeacher(16, 3)
    c = CachedTeacher(inner)
    for s in emitted(20):
        assert np.array_equal(c(s).values, inner(s).values)
        assert c(s) is c(s)


def test_teacher_hidden_validation():
    with pytest.raises(ShapeError):
        TeacherHidden(np.zeros((0, 4)), "x")
    with pytest.raises(ValueError):
        TeacherHidden(np.full((2, 2), np.nan), "x")


def test_export_import_roundtrip(tmp_path):
    teacher = HashTeacher(24, 5)
    corpus = emitted(60)
    n = teacher_export(teacher, corpus + corpus[:5], tmp_path)
    assert n == len(set(corpus))
    imported = ImportedTeacher(tmp_path)
    assert imported.width == 24 and imported.teacher_id == teacher.teacher_id
    for s in corpus:
        assert np.array_equal(imported(s).values, teacher(s).values)
    assert np.array_equal(teacher_import(tmp_path, corpus[3]).values, teacher_extract_hash(corpus[3], 24, 5).values)
    with pytest.raises(MissingKeyError):
        imported("(x1 + 99)")
    with pytest.raises(ShapeError):
        ImportedTeacher(tmp_path, width=32)
