import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from harmodt import autodiff as ad
from harmodt.autodiff import LayoutBuilder
from harmodt.exceptions import ConfigurationError, DataError
from harmodt.harmony import (FlipSchedule, TaskGradients, active_count, agreement_score, arg_btm_k,
                             arg_top_k, averaged_harmony, collect_gradients, cosine_alpha,
                             decode_runs, encode_runs, erk_counts, erk_init, erk_raw_density,
                             fisher_importance, flip_mask, harmony_score, importance_score,
                             load_mask, magnitude_importance, mask_from_text, mask_to_text,
                             mask_update, masked_gradient, random_mask, removed_count, save_mask,
                             update_all_masks, vote_unseen_mask)

seeds = st.integers(0, 2**32 - 1)


def task_grads(grads, masked, losses, masked_losses):
    return [TaskGradients(float(l), g, float(ml), mg)
            for g, mg, l, ml in zip(grads, masked, losses, masked_losses)]


def quad_model(n=8, seed=0):
    """An 8-parameter model with loss 0.5*|A theta - b|^2 + 0.1."""
    rng = np.random.default_rng(seed)
    A, b = rng.normal(size=(5, n)), rng.normal(size=5)

    def loss_grad(values):
        r = A @ values - b
        return 0.5 * r @ r + 0.1, A.T @ r

    return loss_grad, rng.normal(size=n)


# ---------------------------------------------------------------- budget


def test_budget_rounding():
    assert removed_count(10, 0.25) == 3  # 2.5 rounds half up
    assert removed_count(10, 0.0) == 0
    assert active_count(100, 0.2) == 80
    with pytest.raises(ConfigurationError):
        removed_count(10, 1.0)


# ---------------------------------------------------------------- masked gradients


def test_masked_gradient_identity_and_zero_masks():
    loss_grad, theta = quad_model()
    _, plain = loss_grad(theta)
    assert np.array_equal(masked_gradient(loss_grad, theta, np.ones(8))[1], plain)
    assert np.array_equal(masked_gradient(loss_grad, theta, np.zeros(8))[1], np.zeros(8))


@settings(max_examples=20, deadline=None)
@given(seed=seeds)
def test_masked_gradient_matches_finite_differences(seed):
    loss_grad, theta = quad_model(seed=seed % 1000)
    mask = np.random.default_rng(seed).random(8) < 0.5
    _, g = masked_gradient(loss_grad, theta, mask)
    assert np.all(g[~mask] == 0.0)
    fd = ad.finite_difference(lambda th: loss_grad(th * mask)[0], theta)
    assert np.allclose(g[mask], fd[mask], rtol=1e-6, atol=1e-8)


def test_collect_gradients_reports_both_views():
    loss_grad, theta = quad_model()
    mask = np.arange(8) % 2 == 0
    (g,) = collect_gradients(lambda i, v: loss_grad(v), theta, [mask])
    assert np.array_equal(g.grad, loss_grad(theta)[1])
    assert g.masked_loss == loss_grad(theta * mask)[0]


# ---------------------------------------------------------------- scores


def test_agreement_hand_case():
    assert agreement_score([[1.0, -1.0], [1.0, 1.0]], 0).tolist() == [1.0, 0.0]


def test_single_task_self_agreement_is_non_negative():
    g = np.random.default_rng(0).normal(size=10)
    assert np.all(agreement_score([g], 0) >= 0)


def test_agreement_empty_list_is_configuration_error():
    with pytest.raises(ConfigurationError):
        agreement_score([], 0)


@settings(max_examples=50, deadline=None)
@given(seed=seeds)
def test_agreement_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(3, 8))
    for i in range(3):
        assert agreement_score(g, i).tolist() == oracles.agreement(g.tolist(), i)


def test_importance_examples():
    assert magnitude_importance([-2.0, 3.0], [1, 0]).tolist() == [2.0, 0.0]
    vec, clamped = fisher_importance(2.0, [4.0, 0.0], [1, 1])
    assert vec.tolist() == [4.0, 0.0] and not clamped
    vec, clamped = fisher_importance(0.0, [1e-9, 0.0], [1, 1])
    assert clamped and vec[0] == pytest.approx(0.01)
    with pytest.raises(ConfigurationError):
        importance_score("entropy")


def test_fisher_matches_finite_differences_of_log_loss():
    loss_grad, theta = quad_model(seed=3)
    mask = np.array([1, 1, 0, 1, 0, 1, 1, 1], dtype=bool)
    loss, g = masked_gradient(loss_grad, theta, mask)
    vec, _ = fisher_importance(loss, g, mask)
    fd = ad.finite_difference(lambda th: math.log(loss_grad(th * mask)[0]), theta) * mask
    assert np.abs(vec - fd**2).max() / np.abs(fd**2).max() < 1e-4


def test_harmony_examples():
    theta = np.array([0.7, -0.3])
    agree = agreement_score([[1.0, -1.0], [1.0, 1.0]], 0)
    imp = magnitude_importance(theta, [1, 0])
    rep = harmony_score(agree, imp, [1, 0], lam=10.0)
    assert rep.harmony[0] == 1.0 + 10.0 * 0.7 and rep.harmony[1] == math.inf
    rep0 = harmony_score(agree, imp, [1, 1], lam=0.0)
    assert np.array_equal(rep0.harmony, agree)


@settings(max_examples=50, deadline=None)
@given(seed=seeds, lam=st.sampled_from([0.0, 1.0, 10.0]))
def test_harmony_is_infinite_exactly_off_mask(seed, lam):
    rng = np.random.default_rng(seed)
    a, i = rng.normal(size=12), rng.random(12)
    m = rng.random(12) < 0.5
    h = harmony_score(a, i, m, lam).harmony
    assert np.array_equal(np.isinf(h), ~m)
    assert h.tolist() == oracles.harmony(a.tolist(), i.tolist(), m.tolist(), lam)


# ---------------------------------------------------------------- selection


def test_selection_examples():
    assert arg_btm_k([3, 1, 2], 1).indicator.astype(int).tolist() == [0, 1, 0]
    assert arg_btm_k([math.inf, 1, 2], 2).indicator.astype(int).tolist() == [0, 1, 1]
    assert arg_top_k([5, 5, 1], 1).indicator.astype(int).tolist() == [1, 0, 0]


def test_selection_shortfall():
    sel = arg_btm_k([math.inf, 1.0, math.inf], 3)
    assert sel.indices.tolist() == [1] and sel.shortfall == 2


@settings(max_examples=100, deadline=None)
@given(scores=st.lists(st.one_of(st.integers(-3, 3).map(float), st.just(math.inf)), max_size=20),
       k=st.integers(0, 25))
def test_selection_matches_sorted_oracle(scores, k):
    finite = [j for j, s in enumerate(scores) if math.isfinite(s)]
    low = sorted(finite, key=lambda j: (scores[j], j))[:k]
    high = sorted(finite, key=lambda j: (-scores[j], j))[:k]
    assert arg_btm_k(scores, k).indices.tolist() == sorted(low)
    assert arg_top_k(scores, k).indices.tolist() == sorted(high)
    assert arg_btm_k(scores, k).shortfall == k - len(low)


# ---------------------------------------------------------------- mask update


def hand_instance():
    grads = np.array([[0.5, -1.0, 0.2, 0.0, 1.5, -0.3],
                      [0.4, 0.8, -0.6, 0.9, 0.1, 0.2]])
    masks = np.array([[1, 1, 1, 0, 1, 0], [1, 0, 1, 1, 1, 1]], dtype=bool)
    masked = grads * masks
    return grads, masks, masked, np.array([1.0, 2.0]), np.array([0.5, 1.5])


def test_alpha_zero_is_a_no_op():
    grads, masks, masked, l, ml = hand_instance()
    tg = task_grads(grads, masked, l, ml)
    new, rec = mask_update(0, masks, np.ones(6), tg, 0)
    assert np.array_equal(new, masks[0]) and rec.n_removed == rec.n_added == 0


def test_six_coordinate_hand_case_matches_oracle():
    grads, masks, masked, l, ml = hand_instance()
    tg = task_grads(grads, masked, l, ml)
    for i in range(2):
        new, rec = mask_update(i, masks, np.ones(6), tg, 2, lam=10.0)
        expect = oracles.task_mask_update(i, masks.tolist(), l.tolist(), ml.tolist(), grads.tolist(),
                                          masked.tolist(), 2, 10.0)
        assert new.tolist() == expect
        assert new.sum() == masks[i].sum()


@settings(max_examples=150, deadline=None)
@given(seed=seeds, alpha=st.integers(0, 70), lam=st.sampled_from([0.0, 10.0]))
def test_mask_update_matches_brute_force(seed, alpha, lam):
    rng = np.random.default_rng(seed)
    grads, masks, masked, l, ml = oracles.random_instance(rng)
    tg = task_grads(grads, masked, l, ml)
    new_masks, records = update_all_masks(list(masks), None, tg, alpha, lam)
    for i, (new, rec) in enumerate(zip(new_masks, records)):
        expect = oracles.task_mask_update(i, masks.tolist(), l.tolist(), ml.tolist(), grads.tolist(),
                                          masked.tolist(), alpha, lam)
        assert new.tolist() == expect
        # conservation, pairing and no re-mask
        assert new.sum() == masks[i].sum()
        assert rec.n_removed == rec.n_added
        assert np.all(masks[i][rec.removed]) and not np.any(masks[i][rec.added])
        assert set(rec.removed.tolist()).isdisjoint(rec.added.tolist())


def test_flip_caps_at_revivable_count():
    mask = np.array([1, 1, 1, 0], dtype=bool)
    new, rec = flip_mask(mask, np.arange(4.0), np.ones(4), 3)
    assert new.tolist() == [False, True, True, True]
    assert rec.shortfall == 2


# ---------------------------------------------------------------- schedule


@pytest.mark.parametrize("lo,hi", [(0, 100), (5, 50)])
@pytest.mark.parametrize("E", [4, 1000, 40, 1_000_000])
def test_schedule_endpoints(lo, hi, E):
    assert cosine_alpha(0, lo, hi, E) == lo
    assert cosine_alpha(E // 4, lo, hi, E) == math.ceil((lo + hi) / 2)
    assert cosine_alpha(E // 2, lo, hi, E) == hi
    assert cosine_alpha(E, lo, hi, E) == lo


def test_schedule_examples_and_updates():
    sched = FlipSchedule(0, 100, 1000, 250)
    assert [sched(t) for t in (0, 250, 500)] == [0, 50, 100]
    assert sched.update_steps() == [250, 500, 750, 1000]
    assert FlipSchedule(0, 0, 10, 10).update_steps() == [10]
    with pytest.raises(ConfigurationError):
        FlipSchedule(0, 10, 100, 10).check_budget(5)
    with pytest.raises(ConfigurationError):
        FlipSchedule(5, 1)


@settings(max_examples=100, deadline=None)
@given(t=st.integers(0, 10_000), lo=st.integers(0, 50), extra=st.integers(0, 50))
def test_schedule_within_bounds(t, lo, extra):
    a = cosine_alpha(t, lo, lo + extra, 10_000)
    assert lo <= a <= lo + extra


# ---------------------------------------------------------------- ERK


def erk_layout(shapes, dense=()):
    b = LayoutBuilder()
    for k, (fi, fo) in enumerate(shapes):
        b.linear(f"w{k}", fi, fo)
    for k, n in enumerate(dense):
        b.bias(f"b{k}", n)
    return b.build()


def test_erk_raw_density_example():
    assert erk_raw_density(erk_layout([(4, 8)])[0]) == 0.375


def test_erk_zero_sparsity_is_dense():
    alloc = erk_init(erk_layout([(4, 8), (8, 2)], [8]), 0.0, 0)
    assert alloc.mask.all()


def test_erk_two_layer_case_matches_bisection():
    layout = erk_layout([(4, 8), (8, 2)])
    counts, _ = erk_counts(layout, 0.2)
    assert counts.tolist() == oracles.erk_counts([(32, 0.375), (16, 0.625)], 0.2)
    assert counts.sum() == 38


def test_erk_impossible_budget():
    with pytest.raises(ConfigurationError):
        erk_counts(erk_layout([(2, 2)], [50]), 0.5)


@settings(max_examples=150, deadline=None)
@given(seed=seeds, S=st.floats(0.0, 0.6))
def test_erk_matches_bisection_oracle(seed, S):
    rng = np.random.default_rng(seed)
    shapes = [tuple(int(x) for x in rng.integers(1, 9, size=2)) for _ in range(rng.integers(1, 4))]
    dense = [int(x) for x in rng.integers(1, 4, size=rng.integers(0, 3))]
    layout = erk_layout(shapes, dense)
    segs = [(fi * fo, (fi + fo) / (fi * fo)) for fi, fo in shapes] + [(n, None) for n in dense]
    try:
        counts, _ = erk_counts(layout, S)
    except ConfigurationError:
        assert sum(n for n in dense) > active_count(sum(s for s, _ in segs), S)
        return
    assert counts.tolist() == oracles.erk_counts(segs, S)
    alloc = erk_init(layout, S, seed)
    assert alloc.mask.sum() == active_count(len(alloc.mask), S)
    for seg, c in zip(layout, counts):
        assert alloc.mask[seg.slice].sum() == c


def test_erk_is_seeded():
    layout = erk_layout([(6, 6), (6, 3)], [6])
    assert np.array_equal(erk_init(layout, 0.3, 1).mask, erk_init(layout, 0.3, 1).mask)
    assert not np.array_equal(erk_init(layout, 0.3, 1).mask, erk_init(layout, 0.3, 2).mask)


def test_random_mask_budget():
    assert random_mask(101, 0.2, 0).sum() == 81


# ---------------------------------------------------------------- diagnostics


def test_averaged_harmony_examples():
    g = np.random.default_rng(0).normal(size=7)
    assert averaged_harmony([g, g, g]) == (1.0, False)
    assert averaged_harmony([g, -g]) == (0.0, True)


@settings(max_examples=50, deadline=None)
@given(seed=seeds)
def test_averaged_harmony_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(3, 16))
    g[rng.random((3, 16)) < 0.2] = 0.0
    value, flag = averaged_harmony(g)
    ref, ref_flag = oracles.averaged_harmony(g.tolist())
    assert flag == ref_flag and value == pytest.approx(ref, abs=1e-15)
    assert -1.0 <= value <= 1.0


def test_vote_examples():
    masks = np.zeros((50, 2), dtype=bool)
    masks[:30, 0] = True
    masks[:25, 1] = True
    assert vote_unseen_mask(masks, 25).tolist() == [True, False]
    assert not vote_unseen_mask(masks, 50).any()


# ---------------------------------------------------------------- mask files


@settings(max_examples=100, deadline=None)
@given(bits=st.lists(st.booleans(), max_size=200))
def test_run_length_round_trip(bits):
    m = np.array(bits, dtype=bool)
    first, runs = encode_runs(m)
    assert decode_runs(first, runs, m.size).tolist() == bits


def test_mask_file_round_trip(tmp_path):
    m = random_mask(1000, 0.2, 3)
    path = save_mask(tmp_path / "t3.mask", m, owner=3, sparsity=0.2)
    back, header = load_mask(path)
    assert np.array_equal(back, m)
    assert header["owner"] == 3 and header["popcount"] == 800 and header["length"] == 1000


def test_mask_file_validation():
    text = mask_to_text(np.array([1, 1, 0], dtype=bool), 0, 0.3)
    header, runs = text.split("\n")[:2]
    with pytest.raises(DataError):
        mask_from_text(header + "\n2,2\n")
    with pytest.raises(DataError):
        mask_from_text(header.replace('"popcount": 2', '"popcount": 3') + "\n" + runs + "\n")
    with pytest.raises(DataError):
        mask_from_text("garbage\n")
