import math
import random

import numpy as np
import pytest

from kinn.errors import InputError
from kinn.metrics import (
    ConfusionCounts,
    Task,
    confusion,
    evaluate,
    macro_prf,
    mcc,
    mcc_binary_counts,
    mcc_from_matrix,
    per_class_prf,
)


def test_perfect_binary():
    c = confusion([0, 1, 0, 1], [0, 1, 0, 1], Task.BINARY)
    assert list(c.fp) == [0, 0] and list(c.fn) == [0, 0]
    r = evaluate([0, 1, 0, 1], [0, 1, 0, 1], Task.BINARY)
    assert (r.precision_macro, r.recall_macro, r.f1_macro, r.mcc) == (1.0, 1.0, 1.0, 1.0)


def test_all_zero_predictions():
    c = confusion([0, 1, 0, 1], [0, 0, 0, 0], Task.BINARY)
    assert c.tp[1] == 0
    assert mcc([0, 1, 0, 1], [0, 0, 0, 0], Task.BINARY) == 0.0


def test_counts_match_loop():
    rng = random.Random(3)
    t = [rng.randrange(3) for _ in range(20)]
    p = [rng.randrange(3) for _ in range(20)]
    c = confusion(t, p, Task.MULTICLASS, 3)
    for k in range(3):
        assert c.tp[k] == sum(1 for a, b in zip(t, p) if a == k and b == k)
        assert c.fp[k] == sum(1 for a, b in zip(t, p) if a != k and b == k)
        assert c.fn[k] == sum(1 for a, b in zip(t, p) if a == k and b != k)
        assert c.tn[k] == sum(1 for a, b in zip(t, p) if a != k and b != k)


def test_absent_class_scores_zero():
    r = evaluate([0, 1], [0, 1], Task.MULTICLASS, 3)
    assert r.f1_macro == pytest.approx(2 / 3)


def test_worked_macro_f1():
    c = ConfusionCounts(np.array([3, 4]), np.array([1, 2]), np.array([2, 1]), np.array([0, 0]), 2, Task.BINARY)
    _, _, f = per_class_prf(c)
    assert f[0] == pytest.approx(2 / 3, abs=1e-4) and f[1] == pytest.approx(8 / 11, abs=1e-4)
    assert macro_prf(c)[2] == pytest.approx(0.6970, abs=1e-4)


def test_worked_mcc():
    assert mcc_binary_counts(3, 1, 2, 4) == pytest.approx(10 / math.sqrt(600), abs=1e-12)
    assert mcc_binary_counts(3, 1, 2, 4) == pytest.approx(0.4082, abs=1e-4)


def test_binary_mcc_equals_rk():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        tp, fp, fn, tn = rng.integers(0, 50, size=4)
        matrix = np.array([[tn, fp], [fn, tp]])
        assert abs(mcc_binary_counts(tp, fp, fn, tn) - mcc_from_matrix(matrix)) < 1e-12


def test_constant_predictor_multiclass():
    assert mcc([0, 1, 2, 2], [1, 1, 1, 1], Task.MULTICLASS, 3) == 0.0


def test_multilabel():
    t = np.array([[1, 0, 1], [0, 1, 1], [1, 1, 0]])
    p = np.array([[1, 0, 0], [0, 1, 1], [1, 0, 0]])
    r = evaluate(t, p, Task.MULTILABEL)
    per_label = [mcc_binary_counts(*(((t[:, j] == a) & (p[:, j] == b)).sum() for a, b in ((1, 1), (0, 1), (1, 0), (0, 0))))
                 for j in range(3)]
    assert r.mcc == pytest.approx(np.mean(per_label))
    assert r.precision_macro == pytest.approx((1 + 1 + 1) / 3)
    assert r.recall_macro == pytest.approx((1 + 0.5 + 0.5) / 3)


def test_shape_errors():
    with pytest.raises(InputError):
        evaluate([0, 1], [0], Task.BINARY)
    with pytest.raises(InputError):
        evaluate([0, 2], [0, 1], Task.BINARY)
    with pytest.raises(InputError):
        evaluate([[1, 0]], [[1, 0, 1]], Task.MULTILABEL)
    with pytest.raises(InputError):
        evaluate([[1, 2]], [[1, 0]], Task.MULTILABEL)


def test_against_sklearn():
    skm = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(1)
    for k in (2, 3, 6):
        for _ in range(50):
            t = rng.integers(0, k, 40)
            p = rng.integers(0, k, 40)
            task = Task.BINARY if k == 2 else Task.MULTICLASS
            r = evaluate(t, p, task, k)
            labels = list(range(k))
            assert r.f1_macro == pytest.approx(skm.f1_score(t, p, average="macro", labels=labels, zero_division=0))
            assert r.precision_macro == pytest.approx(
                skm.precision_score(t, p, average="macro", labels=labels, zero_division=0))
            assert r.mcc == pytest.approx(skm.matthews_corrcoef(t, p), abs=1e-12)
