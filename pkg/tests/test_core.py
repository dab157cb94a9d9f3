import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from saas.core import (
    TAU_EDITING,
    TAU_VISUAL_CONDITIONAL,
    InstructionMask,
    PlanEntry,
    SaasConfig,
    SaasPlan,
    aggregate_image_map,
    aggregate_instruction_map,
    apply_plan,
    average_vital_cross_attention,
    build_plan,
    compute_scaling_factor,
    extract_mask,
    fixed_scale_baseline,
    gaussian_kernel,
    gaussian_smooth,
    histogram,
    minmax_normalize,
    otsu_index,
    otsu_threshold,
    renormalize_attention,
)
from saas.layout import build_attention_policy, build_layout, reshape_to_spatial, slice_cross_attention

from oracles import naive_alpha, naive_gaussian, otsu_bruteforce, random_stochastic

grids = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
               elements=st.floats(0, 10, allow_nan=False, allow_infinity=False))


# -- config ----------------------------------------------------------------


def test_config_defaults():
    c = SaasConfig()
    assert c.tau == TAU_EDITING == 0.4
    assert TAU_VISUAL_CONDITIONAL == 0.2
    assert c.xi == 1.0 and c.window == (0, 20) and c.alpha_cap == 20.0
    assert c.vital(8) == (4, 5, 6, 7)


@pytest.mark.parametrize(
    "kwargs",
    [{"tau": 1.5}, {"tau": -0.1}, {"alpha_cap": 0}, {"kernel_size": 2}, {"vital_layers": ()},
     {"outside_mask_mode": "drop"}, {"threshold_mode": "auto"}],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        SaasConfig(**kwargs)


def test_xi_table():
    c = SaasConfig(xi=(1.0, 0.5, 0.25))
    assert [c.xi_at(s) for s in range(5)] == [1.0, 0.5, 0.25, 0.25, 0.25]


# -- averaging -------------------------------------------------------------


def test_average_single_layer_head(rng):
    lay = build_layout(3, 2, 3, [(0, 3)])
    a = random_stochastic(rng, build_attention_policy(lay), heads=1)
    maps = average_vital_cross_attention({0: a}, lay, [0])
    cross = slice_cross_attention(a[0], lay)
    for j in range(lay.num_conditions):
        np.testing.assert_array_equal(maps[j], reshape_to_spatial(cross, j))


def test_average_two_heads(rng):
    lay = build_layout(3, 2, 3, [(0, 3)])
    a = random_stochastic(rng, build_attention_policy(lay), heads=2)
    maps = average_vital_cross_attention({5: a}, lay, [5])
    x = reshape_to_spatial(slice_cross_attention(a[0], lay), 4)
    y = reshape_to_spatial(slice_cross_attention(a[1], lay), 4)
    np.testing.assert_allclose(maps[4], (x + y) / 2, atol=1e-15)


def test_average_matches_naive_accumulation(rng):
    lay = build_layout(3, 2, 4, [(0, 2), (2, 4)])
    allow = build_attention_policy(lay)
    trace = {l: random_stochastic(rng, allow, heads=3) for l in range(6)}
    vital = [3, 4, 5]
    maps = average_vital_cross_attention(trace, lay, vital)
    g = lay.grid_side
    for j in range(lay.num_conditions):
        acc = np.zeros((g, g))
        count = 0
        for l in vital:
            for h in range(3):
                for i, q in enumerate(lay.noise_span):
                    acc[i // g, i % g] += trace[l][h, q, j]
                count += 1
        np.testing.assert_allclose(maps[j], acc / count, atol=1e-15)


def test_average_missing_layer(rng):
    lay = build_layout(2, None, 1, [(0, 1)])
    with pytest.raises(KeyError):
        average_vital_cross_attention({0: np.zeros((1, 5, 5))}, lay, [0, 1])


# -- gaussian ----------------------------------------------------------------


@pytest.mark.parametrize("size,sigma", [(3, 1.0), (5, 0.7), (7, 2.5), (1, 1.0)])
def test_kernel_sums_to_one(size, sigma):
    assert abs(gaussian_kernel(size, sigma).sum() - 1.0) <= 1e-12


def test_constant_fixpoint():
    out = gaussian_smooth(np.full((6, 6), 0.37), 3, 1.0)
    assert np.max(np.abs(out - 0.37)) <= 1e-12


def test_kernel_size_one_is_identity(rng):
    m = rng.random((4, 4))
    np.testing.assert_array_equal(gaussian_smooth(m, 1, 1.0), m)


def test_delta_response():
    delta = np.zeros((3, 3))
    delta[1, 1] = 1.0
    out = gaussian_smooth(delta, 3, 1.0)
    assert abs(out[1, 1] - 1 / (1 + 4 * math.exp(-0.5) + 4 * math.exp(-1))) <= 1e-12
    assert np.max(np.abs(out - naive_gaussian(delta, 3, 1.0))) <= 1e-12


@pytest.mark.parametrize("shape,size,sigma", [((8, 8), 3, 1.0), ((5, 7), 5, 1.3), ((2, 2), 3, 1.0), ((2, 3), 5, 0.8)])
def test_smooth_matches_naive(rng, shape, size, sigma):
    m = rng.random(shape)
    assert np.max(np.abs(gaussian_smooth(m, size, sigma) - naive_gaussian(m, size, sigma))) <= 1e-12


def test_smooth_stacks(rng):
    stack = rng.random((3, 5, 5))
    out = gaussian_smooth(stack, 3, 1.0)
    for i in range(3):
        np.testing.assert_array_equal(out[i], gaussian_smooth(stack[i], 3, 1.0))


@given(grids)
def test_smooth_stays_in_range(m):
    assume(min(m.shape) >= 2)
    out = gaussian_smooth(m, 3, 1.0)
    assert out.max() <= m.max() and out.min() >= m.min()


# -- aggregation -------------------------------------------------------------


def test_aggregate(rng):
    maps = rng.random((6, 4, 4))
    np.testing.assert_array_equal(aggregate_instruction_map(maps, range(2, 3)), maps[2])
    np.testing.assert_allclose(aggregate_instruction_map(maps, range(2, 4)), maps[2] + maps[3])
    acc = np.zeros((4, 4))
    for j in (3, 4, 5):
        acc = acc + maps[j]
    np.testing.assert_allclose(aggregate_instruction_map(maps, range(3, 6)), acc, atol=1e-15)
    np.testing.assert_array_equal(aggregate_image_map(maps, range(0, 1)), maps[0])
    img = np.zeros((4, 4))
    for j in range(4):
        img = img + maps[j]
    np.testing.assert_allclose(aggregate_image_map(maps, range(0, 4)), img, atol=1e-15)


def test_aggregate_empty():
    with pytest.raises(ValueError):
        aggregate_image_map(np.zeros((2, 2, 2)), range(0, 0))
    with pytest.raises(ValueError):
        aggregate_instruction_map(np.zeros((2, 2, 2)), range(1, 1))


# -- normalization and masks ---------------------------------------------------


def test_minmax():
    out, deg = minmax_normalize(np.array([0.1, 0.5, 0.3]))
    assert not deg and out.min() == 0.0 and out.max() == 1.0
    out, deg = minmax_normalize(np.array([[0.1, 0.2], [0.3, 0.5]]))
    np.testing.assert_allclose(out, [[0, 0.25], [0.5, 1.0]], atol=1e-15)
    out, deg = minmax_normalize(np.full((3, 3), 0.7))
    assert deg and np.all(out == 0)


def test_extract_mask():
    normed, _ = minmax_normalize(np.array([[0.1, 0.2], [0.3, 0.5]]))
    np.testing.assert_array_equal(extract_mask(normed, 0.4), [[False, False], [True, True]])
    np.testing.assert_array_equal(extract_mask(normed, 0.0), np.ones((2, 2), dtype=bool))


@given(grids, st.floats(0, 1), st.floats(0, 1))
def test_mask_monotone(m, t1, t2):
    lo, hi = sorted((t1, t2))
    normed, _ = minmax_normalize(m)
    a, b = extract_mask(normed, lo), extract_mask(normed, hi)
    assert not np.any(b & ~a)


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 100), st.floats(-50, 50), st.floats(0, 1))
def test_mask_scale_invariant(seed, c, d, tau):
    m = np.random.default_rng(seed).integers(0, 16, size=(5, 5)).astype(float)
    a = extract_mask(minmax_normalize(m)[0], tau)
    b = extract_mask(minmax_normalize(c * m + d)[0], tau)
    # affine maps of small integers keep the order; ties at tau are measure-zero but guard them
    normed = minmax_normalize(m)[0]
    assume(np.min(np.abs(normed - tau)) > 1e-9)
    np.testing.assert_array_equal(a, b)


# -- otsu ----------------------------------------------------------------------


def test_otsu_bimodal():
    m = np.array([0.1] * 8 + [0.9] * 8).reshape(4, 4)
    tau, deg = otsu_threshold(m)
    assert not deg
    assert 0.1 < tau <= 0.9


def test_otsu_degenerate():
    assert otsu_threshold(np.full((3, 3), 0.5)) == (0.0, True)


def test_otsu_map_matches_bruteforce(rng):
    for _ in range(10):
        normed, _ = minmax_normalize(rng.random((8, 8)) ** 2)
        tau, _ = otsu_threshold(normed, 256)
        hist = [0] * 256
        for v in normed.ravel():
            hist[min(int(v * 256), 255)] += 1
        assert tau == otsu_bruteforce(hist) / 256


@given(st.lists(st.integers(0, 50), min_size=2, max_size=40))
@settings(max_examples=100, deadline=None)
def test_otsu_histogram_matches_bruteforce(hist):
    assert otsu_index(hist) == otsu_bruteforce(hist)


def test_histogram_bins_align_with_threshold(rng):
    v = rng.random(1000)
    hist = histogram(v, 256)
    for j in (1, 64, 200, 255):
        assert hist[j:].sum() == np.sum(v >= j / 256)


# -- scaling factor ------------------------------------------------------------


def test_alpha_equal_maps(rng):
    m = rng.random((4, 4))
    mask = m > 0.3
    alpha, skipped = compute_scaling_factor(m, m.copy(), mask)
    assert alpha == 1.0 and not skipped


def test_alpha_hand_case():
    image = np.array([[0.6, 0.4], [9.0, 9.0]])
    instr = np.array([[0.2, 0.3], [0.0, 0.0]])
    mask = np.array([[True, True], [False, False]])
    assert compute_scaling_factor(image, instr, mask) == (2.0, False)


def test_alpha_guards():
    z = np.zeros((2, 2))
    assert compute_scaling_factor(np.ones((2, 2)), z, np.ones((2, 2), bool)) == (1.0, True)
    assert compute_scaling_factor(np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2), bool)) == (1.0, True)
    alpha, skipped = compute_scaling_factor(np.full((2, 2), 100.0), np.ones((2, 2)), np.ones((2, 2), bool), 20.0)
    assert alpha == 20.0 and not skipped


def test_alpha_random_vs_naive(rng):
    for _ in range(50):
        image, instr = rng.random((5, 5)), rng.random((5, 5)) + 0.01
        mask = rng.random((5, 5)) > 0.5
        mask[0, 0] = True
        alpha, _ = compute_scaling_factor(image, instr, mask, math.inf)
        assert abs(alpha - naive_alpha(image, instr, mask)) <= 1e-12


@given(st.integers(0, 2**32 - 1))
def test_in_mask_balance(seed):
    r = np.random.default_rng(seed)
    image, instr = r.random((4, 4)), r.random((4, 4)) + 1e-3
    mask = r.random((4, 4)) > 0.4
    assume(mask.any())
    alpha, _ = compute_scaling_factor(image, instr, mask, math.inf)
    assert abs(np.sum(alpha * instr[mask]) - np.sum(image[mask])) <= 1e-9


# -- plan / apply / renormalize ------------------------------------------------


def _entry(span, grid, alpha, skipped=False):
    return PlanEntry(span, InstructionMask(grid, 0, 0), alpha, 0.4, skipped=skipped)


def test_identity_plan(rng):
    lay = build_layout(3, 2, 4, [(0, 2), (2, 4)])
    allow = build_attention_policy(lay)
    a = random_stochastic(rng, allow, heads=2)
    ones = np.ones((3, 3), bool)
    plan = SaasPlan(0, tuple(_entry(s, ones, 1.0) for s in lay.sub_instructions))
    out = renormalize_attention(apply_plan(a, lay, plan, 1.0, "keep"), allow)
    assert np.max(np.abs(out - a)) <= 1e-12
    np.testing.assert_array_equal(out.argmax(axis=-1), a.argmax(axis=-1))


def test_apply_hand_case():
    # one noise query; keys: 1 image token, 1 instruction token, 1 more text token, the noise token
    lay = build_layout(1, 1, 2, [(0, 1)])
    a = np.zeros((4, 4))
    a[0, 0] = 1.0
    a[1, :2] = 0.5
    a[2, :3] = 1 / 3
    a[3] = [0.5, 0.1, 0.15, 0.25]
    plan = SaasPlan(0, (_entry(range(1, 2), np.ones((1, 1), bool), 2.0),))
    scaled = apply_plan(a, lay, plan, 1.0, "keep")
    np.testing.assert_allclose(scaled[3], [0.5, 0.2, 0.15, 0.25], atol=1e-15)
    out = renormalize_attention(scaled, build_attention_policy(lay))
    np.testing.assert_allclose(out[3], np.array([0.5, 0.2, 0.15, 0.25]) / 1.1, atol=1e-15)
    np.testing.assert_array_equal(out[:3], a[:3])


def test_apply_zero_mode_outside_mask(rng):
    lay = build_layout(2, 1, 2, [(0, 2)])
    allow = build_attention_policy(lay)
    a = random_stochastic(rng, allow)
    mask = np.array([[True, False], [False, True]])
    plan = SaasPlan(0, (_entry(lay.sub_instructions[0], mask, 3.0),))
    out = apply_plan(a, lay, plan, 1.0, "zero")
    span = lay.sub_instructions[0]
    for i, q in enumerate(lay.noise_span):
        expected = a[q, span.start:span.stop] * (3.0 if mask.ravel()[i] else 0.0)
        np.testing.assert_allclose(out[q, span.start:span.stop], expected, atol=1e-15)
    keep = apply_plan(a, lay, plan, 1.0, "keep")
    np.testing.assert_array_equal(keep[lay.noise_span.start + 1, span.start:span.stop], a[lay.noise_span.start + 1, span.start:span.stop])


def test_apply_skipped_entry_untouched(rng):
    lay = build_layout(2, 1, 2, [(0, 2)])
    a = random_stochastic(rng, build_attention_policy(lay))
    plan = SaasPlan(0, (_entry(lay.sub_instructions[0], np.zeros((2, 2), bool), 1.0, skipped=True),))
    np.testing.assert_array_equal(apply_plan(a, lay, plan), a)


def test_apply_mismatch(rng):
    lay = build_layout(2, 1, 2, [(0, 1), (1, 2)])
    plan = SaasPlan(0, (_entry(range(1, 2), np.ones((2, 2), bool), 1.0),))
    with pytest.raises(ValueError):
        apply_plan(np.zeros((7, 7)), lay, plan)


def test_renormalize():
    out = renormalize_attention(np.array([[0.2, 0.4, 0.6]]))
    np.testing.assert_allclose(out, [[1 / 6, 1 / 3, 1 / 2]], atol=1e-15)
    a = np.array([[0.25, 0.75], [0.5, 0.5]])
    assert np.max(np.abs(renormalize_attention(a) - a)) <= 1e-12
    with pytest.raises(ValueError):
        renormalize_attention(np.array([[0.0, 0.0], [0.5, 0.5]]))
    with pytest.raises(ValueError):
        renormalize_attention(np.array([[0.5, 0.5], [0.5, 0.5]]), np.array([[True, False], [True, True]]))


@given(st.integers(0, 2**32 - 1), st.sampled_from(["zero", "keep"]), st.floats(0.05, 30))
@settings(max_examples=100, deadline=None)
def test_apply_then_renormalize_is_stochastic(seed, mode, alpha):
    r = np.random.default_rng(seed)
    lay = build_layout(3, 2, 5, [(0, 2), (2, 5)])
    allow = build_attention_policy(lay)
    a = random_stochastic(r, allow, heads=2)
    plan = SaasPlan(0, tuple(_entry(s, r.random((3, 3)) > 0.5, alpha) for s in lay.sub_instructions))
    out = renormalize_attention(apply_plan(a, lay, plan, 1.0, mode), allow)
    assert np.max(np.abs(out.sum(axis=-1) - 1)) <= 1e-9
    assert np.all(out[:, ~allow] == 0)


def test_fixed_scale(rng):
    lay = build_layout(1, 1, 2, [(0, 1)])
    allow = build_attention_policy(lay)
    a = random_stochastic(rng, allow)
    assert np.max(np.abs(fixed_scale_baseline(a, lay, lay.sub_instructions, 1.0, allow) - a)) <= 1e-12
    a[3] = [0.5, 0.1, 0.15, 0.25]
    out = fixed_scale_baseline(a, lay, lay.sub_instructions, 2.0, allow)
    np.testing.assert_allclose(out[3], np.array([0.5, 0.2, 0.15, 0.25]) / 1.1, atol=1e-15)
    with pytest.raises(ValueError):
        fixed_scale_baseline(a, lay, lay.sub_instructions, 0.0)


# -- build_plan ----------------------------------------------------------------


def test_plan_without_instructions(rng):
    lay = build_layout(2, 1, 2, [])
    plan = build_plan({}, lay, SaasConfig(), 3, num_layers=4)
    assert plan.k == 0 and plan.source_step == 3


def _oracle_plan(trace, lay, vital, tau, cap=math.inf):
    """Compose the per-op oracles: naive mean, naive gaussian, naive sums, compare, naive ratio."""
    g = lay.grid_side
    count = 0
    maps = np.zeros((lay.num_conditions, g, g))
    for l in vital:
        for h in range(trace[l].shape[0]):
            count += 1
            for j in range(lay.num_conditions):
                for i, q in enumerate(lay.noise_span):
                    maps[j, i // g, i % g] += trace[l][h, q, j]
    maps /= count
    smoothed = [naive_gaussian(m, 3, 1.0) for m in maps]
    image = sum(smoothed[j] for j in lay.image_span)
    out = []
    for span in lay.sub_instructions:
        instr = sum(smoothed[j] for j in span)
        normed = (instr - instr.min()) / (instr.max() - instr.min())
        mask = normed >= tau
        out.append((mask, min(naive_alpha(image, instr, mask), cap)))
    return out


def test_plan_matches_composed_oracles(rng):
    lay = build_layout(4, 2, 5, [(0, 2), (2, 5)])
    allow = build_attention_policy(lay)
    trace = {l: random_stochastic(rng, allow, heads=2) for l in range(4)}
    cfg = SaasConfig(tau=0.4, vital_layers=(2, 3), alpha_cap=math.inf)
    plan = build_plan(trace, lay, cfg, 0)
    for entry, (mask, alpha) in zip(plan.entries, _oracle_plan(trace, lay, (2, 3), 0.4)):
        np.testing.assert_array_equal(entry.mask.grid, mask)
        assert abs(entry.alpha - alpha) <= 1e-9


def test_plan_recompute_identical(rng):
    lay = build_layout(4, 2, 5, [(0, 2), (2, 5)])
    allow = build_attention_policy(lay)
    trace = {l: random_stochastic(rng, allow, heads=2) for l in range(4)}
    a = build_plan(trace, lay, SaasConfig(), 7, num_layers=4)
    b = build_plan(trace, lay, SaasConfig(), 7, num_layers=4)
    for x, y in zip(a.entries, b.entries):
        assert x.mask.grid.tobytes() == y.mask.grid.tobytes()
        assert x.alpha == y.alpha and x.tau == y.tau


def test_plan_otsu_mode(rng):
    lay = build_layout(4, 2, 5, [(0, 2), (2, 5)])
    allow = build_attention_policy(lay)
    trace = {l: random_stochastic(rng, allow, heads=2) for l in range(4)}
    plan = build_plan(trace, lay, SaasConfig(threshold_mode="otsu"), 0, num_layers=4)
    for e in plan.entries:
        assert 0 < e.tau <= 1


def test_plan_without_image_skips(rng):
    lay = build_layout(3, None, 4, [(0, 4)])
    allow = build_attention_policy(lay)
    trace = {l: random_stochastic(rng, allow, heads=1) for l in range(2)}
    plan = build_plan(trace, lay, SaasConfig(vital_layers=(1,)), 0)
    assert plan.entries[0].skipped and plan.entries[0].alpha == 1.0


def test_otsu_accepts_large_int64_counts():
    hist = np.zeros(256, dtype=np.int64)
    hist[[3, 250]] = [10**6, 3 * 10**6]
    hist[100] = 5
    assert otsu_index(hist) == otsu_bruteforce(hist)
