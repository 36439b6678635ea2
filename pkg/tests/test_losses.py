import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ordicon import losses as L
from ordicon.numerics import finite_diff_grad, make_rng, rel_error

from oracles import scol_reference, supcon_reference


def unit(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def random_batch(rng, n_range=(2, 16), d_range=(2, 64), labels=25):
    n = int(rng.integers(*n_range, endpoint=True))
    d = int(rng.integers(*d_range, endpoint=True))
    # draw from a few labels so positives are common
    pool = rng.choice(labels, size=max(1, n // 2), replace=False)
    return unit(rng, n, d), rng.choice(pool, size=n)


def test_ordinal_distance_examples():
    assert L.ordinal_distance(0, 24) == pytest.approx(48 / 25)
    assert L.ordinal_distance(7, 7) == 0.0
    assert L.ordinal_distance(3, 10) == L.ordinal_distance(10, 3)
    with pytest.raises(ValueError):
        L.ordinal_distance(-1, 3)
    with pytest.raises(ValueError):
        L.ordinal_distance(0, 25)


def test_ordinal_distance_monotone_exhaustive():
    y = np.arange(25)
    d = L.ordinal_distance(y[:, None], y[None, :])
    a, b, c = np.meshgrid(y, y, y, indexing="ij")
    between = (a <= b) & (b <= c)
    assert np.all(d[a[between], b[between]] <= d[a[between], c[between]])


def test_two_different_labels_gives_zero():
    z = unit(make_rng(0), 2, 3)
    out = L.scol_loss(z, np.array([1, 5]))
    assert out.value == 0.0
    assert out.skipped == 2
    assert out.warning == "all anchors skipped"
    assert not out.grad.any()


def test_batch_too_small():
    with pytest.raises(ValueError, match="batch too small"):
        L.scol_loss(np.ones((1, 3)), np.array([0]))


def test_scol_matches_reference_fixed_example():
    rng = make_rng(2024)
    z = unit(rng, 4, 3)
    y = np.array([0, 0, 12, 24])
    out = L.scol_loss(z, y)
    ref = scol_reference(z.tolist(), y.tolist())
    assert abs(out.value - ref) < 1e-10
    num_ref = finite_diff_grad(lambda t: scol_reference(t.tolist(), y.tolist()), z)
    assert rel_error(out.grad, num_ref) < 1e-6
    num = finite_diff_grad(lambda t: L.scol_loss(t, y).value, z)
    assert rel_error(out.grad, num) < 1e-6


def test_supcon_identical_pair_is_zero():
    z = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert L.supcon_loss(z, np.array([3, 3])).value == pytest.approx(0.0, abs=1e-15)


def test_supcon_orthonormal_triplet():
    # each anchor: -1/2 * 2 * log(e^0 / (e^0 + e^0)) = ln 2, summed over 3 anchors
    out = L.supcon_loss(np.eye(3), np.array([4, 4, 4]), L.ContrastiveConfig(tau=1.0))
    assert out.value == pytest.approx(3 * math.log(2), abs=1e-12)
    per_anchor = L.supcon_loss(np.eye(3), np.array([4, 4, 4]),
                               L.ContrastiveConfig(tau=1.0, reduction="mean")).value
    assert per_anchor == pytest.approx(math.log(2), abs=1e-12)


def test_supcon_and_scol_equivalence_500():
    rng = make_rng(7)
    cfg = L.ContrastiveConfig(margin_mode="none", denominator_mode="all_non_anchor")
    for _ in range(500):
        z, y = random_batch(rng)
        a, b = L.scol_loss(z, y, cfg), L.supcon_loss(z, y)
        assert abs(a.value - b.value) <= 1e-12
        assert np.max(np.abs(a.grad - b.grad)) <= 1e-12


def test_scol_reference_500():
    rng = make_rng(8)
    for _ in range(500):
        z, y = random_batch(rng, n_range=(2, 10), d_range=(2, 8))
        assert abs(L.scol_loss(z, y).value - scol_reference(z.tolist(), y.tolist())) <= 1e-10


def test_all_non_anchor_reference():
    rng = make_rng(9)
    for _ in range(50):
        z, y = random_batch(rng, n_range=(2, 8), d_range=(2, 6))
        cfg = L.ContrastiveConfig(denominator_mode="all_non_anchor")
        ref = scol_reference(z.tolist(), y.tolist(), denominator="all_non_anchor")
        assert abs(L.scol_loss(z, y, cfg).value - ref) <= 1e-10


def test_supcon_reference():
    rng = make_rng(10)
    for _ in range(50):
        z, y = random_batch(rng, n_range=(2, 8), d_range=(2, 6))
        assert abs(L.supcon_loss(z, y, L.ContrastiveConfig(tau=0.5)).value
                   - supcon_reference(z.tolist(), y.tolist(), 0.5)) <= 1e-10


def test_margin_increase_strictly_increases_loss():
    rng = make_rng(11)
    checked = 0
    while checked < 100:
        z, y = random_batch(rng, n_range=(3, 12), d_range=(2, 16))
        margins, _ = L.margin_matrix(y, L.SCOL)
        base = L._contrastive(z, y, L.SCOL, margins)
        if base.anchors == 0:
            continue
        anchors = [a for a in range(len(y)) if (y == y[a]).sum() > 1 and (y != y[a]).any()]
        a = int(rng.choice(anchors))
        n = int(rng.choice(np.flatnonzero(y != y[a])))
        bumped = margins.copy()
        bumped[a, n] += 0.1
        assert L._contrastive(z, y, L.SCOL, bumped).value > base.value
        checked += 1


@pytest.mark.parametrize("kind", ["scol", "supcon", "adacon", "scol_normalized"])
def test_contrastive_gradcheck_200(kind):
    rng = make_rng(12)
    table = L.ecdf(rng.integers(0, 25, size=300))
    for _ in range(200):
        z, y = random_batch(rng)
        if kind == "scol":
            f = lambda t: L.scol_loss(t, y)
        elif kind == "supcon":
            f = lambda t: L.supcon_loss(t, y)
        elif kind == "adacon":
            f = lambda t: L.adacon_loss(t, y, table)
        else:
            z = z * rng.uniform(0.5, 2.0, size=(len(y), 1))
            f = lambda t: L.scol_loss(t, y, L.ContrastiveConfig(normalize=True))
        num = finite_diff_grad(lambda t: f(t).value, z)
        assert rel_error(f(z).grad, num) < 1e-6


def test_gradcheck_float32():
    rng = make_rng(13)
    for _ in range(20):
        z, y = random_batch(rng, n_range=(4, 16), d_range=(4, 32))
        g32 = L.scol_loss(z.astype(np.float32), y).grad
        assert g32.dtype == np.float32
        num = finite_diff_grad(lambda t: L.scol_loss(t, y).value, z)
        assert rel_error(g32, num) < 1e-4


def test_normalize_rejects_zero_row():
    z = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ValueError, match="degenerate embedding"):
        L.scol_loss(z, np.array([0, 0, 1]), L.ContrastiveConfig(normalize=True))


def test_label_permutation_invariance():
    rng = make_rng(14)
    z, y = random_batch(rng, n_range=(8, 8))
    perm = rng.permutation(len(y))
    a, b = L.scol_loss(z, y), L.scol_loss(z[perm], y[perm])
    assert a.value == pytest.approx(b.value, abs=1e-12)
    assert np.allclose(a.grad[perm], b.grad, atol=1e-12)


def test_ecdf_examples():
    t = L.ecdf([0, 0, 1, 3])
    assert t == {0: 0.5, 1: 0.75, 3: 1.0}
    assert max(L.ecdf([5, 5, 5]).values()) == 1.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 24), min_size=1, max_size=200))
def test_ecdf_bounds_and_order(labels):
    t = L.ecdf(labels)
    keys = sorted(t)
    vals = [t[k] for k in keys]
    assert all(1 / len(labels) <= v <= 1.0 for v in vals)
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert vals[-1] == 1.0


def test_adacon_equal_labels_have_zero_margin():
    t = L.ecdf(range(25))
    m, _ = L.margin_matrix(np.array([3, 3, 7]), L.ADACON, t)
    assert m[0, 1] == 0.0 and np.all(np.diag(m) == 0)


def test_adacon_margin_approaches_ordinal_for_uniform_labels():
    labels = make_rng(15).integers(0, 25, size=100_000)
    t = L.ecdf(labels)
    y = np.arange(25)
    m, _ = L.margin_matrix(y, L.ADACON, t)
    d = L.ordinal_distance(y[:, None], y[None, :])
    assert np.max(np.abs(m - d)) < 0.05


def test_adacon_missing_label_warns_and_uses_nearest():
    table = {0: 0.2, 5: 0.6, 10: 1.0}
    vals, missing = L.ecdf_lookup(table, [0, 4, 9, 24])
    assert missing and vals.tolist() == [0.2, 0.6, 1.0, 1.0]
    z = unit(make_rng(0), 3, 4)
    with pytest.warns(RuntimeWarning, match="label missing"):
        out = L.adacon_loss(z, np.array([4, 4, 5]), table)
    assert out.warning == "label missing from ecdf table"
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        L.adacon_loss(z, np.array([0, 0, 5]), table)


def test_rmse_examples():
    out = L.rmse_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
    assert out.value == 0.0 and not out.grad.any()
    out = L.rmse_loss(np.array([3.0, 0.0]), np.array([0.0, 4.0]))
    assert out.value == pytest.approx(math.sqrt(12.5))
    with pytest.raises(ValueError, match="length mismatch"):
        L.rmse_loss(np.zeros(3), np.zeros(2))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_rmse_gradcheck(m, seed):
    rng = make_rng(seed)
    p, t = rng.normal(size=m), rng.normal(size=m)
    num = finite_diff_grad(lambda x: L.rmse_loss(x, t).value, p)
    assert rel_error(L.rmse_loss(p, t).grad, num) < 1e-6


def test_rmse_scale_equivariance():
    rng = make_rng(16)
    p, t = rng.normal(size=10), rng.normal(size=10)
    assert L.rmse_loss(3 * p, 3 * t).value == pytest.approx(3 * L.rmse_loss(p, t).value)


def test_config_validation():
    with pytest.raises(ValueError):
        L.ContrastiveConfig(tau=0)
    with pytest.raises(ValueError):
        L.ContrastiveConfig(margin_mode="huber")
    with pytest.raises(ValueError):
        L.contrastive_loss("rmse", np.eye(2), np.array([0, 0]))
