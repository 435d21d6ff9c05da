"""Bumps, smoothing kernels, Sobolev envelopes, Haar references."""

import math

import numpy as np
import pytest
from scipy.integrate import quad

from horolab import observables as ob
from horolab import quotient as qt
from horolab import sampling as sp
from horolab import sl2
from horolab.presets import bump_preset, cover_bumps, point_preset


def edge_mass_oracle(kern: ob.SmoothingKernel) -> float:
    """1-D edge integral by adaptive quadrature, panel by panel.

    Independent of the kernel's own quadrature_check; the kernel mass
    is this to the n-th power by separability.
    """
    d, g = kern.delta, kern.gamma_len
    total = 0.0
    for a, b in [(-d, 0.0), (0.0, d), (d, g - d), (g - d, g), (g, g + d)]:
        val, _ = quad(lambda u: float(kern.edge(np.array([u]))[0]), a, b,
                      limit=200)
        total += val
    return total


class TestBumpEvaluation:
    def test_peak_is_amplitude(self, modular):
        b = ob.BumpFunction(modular, [[-0.1, 1.4, 0.9]], [[0.2, 0.3, 0.4]],
                            amplitude=2.5)
        assert b.evaluate_coords(b.center[None])[0] == 2.5

    def test_zero_outside_support_exactly(self, modular, test_bump):
        c, w = test_bump.center[0], test_bump.widths[0]
        outside = np.array([
            [[c[0] + 1.001 * w[0], c[1], c[2]]],
            [[c[0], c[1] + 1.2 * w[1], c[2]]],
            [[0.45, 3.9, 0.1]],
        ])
        assert np.all(test_bump.evaluate_coords(outside) == 0.0)

    def test_theta_wraps_modulo_pi(self, modular):
        b = ob.BumpFunction(modular, [[0.0, 1.5, 0.05]], [[0.3, 0.3, 0.3]])
        near = b.evaluate_coords(np.array([[[0.0, 1.5, 0.05 + math.pi]]]))[0]
        assert abs(near - b.amplitude) <= 1e-12

    def test_invalid_widths_rejected(self, modular):
        with pytest.raises(ValueError):
            ob.BumpFunction(modular, [[0.0, 1.5, 1.0]], [[0.2, -0.1, 0.2]])
        with pytest.raises(ValueError):
            ob.BumpFunction(modular, [[0.0, 1.5, 1.0]], [[0.2, 0.2, 1.6]])

    def test_gamma_invariance_through_reduce(self, rng, modular, test_bump):
        gammas = qt.enumerate_gamma(modular)
        for _ in range(40):
            p = qt.reduce_point(
                qt.QuotientPoint(modular, sl2.random_element(rng, scale=0.9)))
            v0 = test_bump.value(p)
            g = gammas[rng.integers(0, len(gammas)), 0]
            moved = qt.QuotientPoint(
                modular, sl2.GroupElement((g @ p.rep.mats[0])[None]))
            assert abs(test_bump.value(moved) - v0) <= 1e-9

    def test_support_stays_inside_fundamental_domain(self, modular, hilbert):
        """Corner audit: every preset bump support clears the domain walls.

        A support box that crossed a wall would make the bump
        discontinuous as a function on the quotient.
        """
        bumps = [bump_preset(modular), bump_preset(hilbert)] + \
            [(b) for b in cover_bumps(modular)]
        for b in bumps:
            for i in range(b.k):
                cx, cy = b.center[i, 0], b.center[i, 1]
                wx, wy = b.widths[i, 0], b.widths[i, 1]
                assert abs(cx) + wx < 0.5
                assert cy - wy > 1.0

    def test_observable_sum_linearity(self, modular, test_bump, rng):
        f = ob.ObservableSum([(2.0, test_bump), (-1.0, test_bump)])
        pts = np.stack([
            rng.uniform(-0.4, 0.4, size=(20, 1)),
            rng.uniform(1.05, 2.0, size=(20, 1)),
            rng.uniform(0.0, math.pi, size=(20, 1)),
        ], axis=2)
        assert np.allclose(f.evaluate_coords(pts),
                           test_bump.evaluate_coords(pts), atol=1e-15)

    def test_translated_observable_matches_direct(self, modular, test_bump):
        g = sl2.unipotent_u(0.37)
        tr = ob.TranslatedObservable(test_bump, g)
        p = point_preset("generic1")
        direct = test_bump.value(qt.translate(p, g))
        assert abs(tr.value(p) - direct) <= 1e-15


class TestSmoothingKernel:
    def test_mass_is_exact_power(self):
        k = ob.SmoothingKernel(0.05, 0.7, 3)
        assert k.mass() == 0.7 ** 3

    def test_axis_integral_oracle(self):
        for d, g in ((0.01, 0.5), (0.05, 1.0), (0.02, 0.3)):
            k = ob.SmoothingKernel(d, g, 1)
            assert abs(edge_mass_oracle(k) - g) <= 1e-8

    def test_exact_plateau_and_support(self):
        k = ob.SmoothingKernel(0.1, 1.0, 2)
        inner = np.array([[0.1, 0.5], [0.5, 0.9], [0.3, 0.3]])
        assert np.all(k.kernel_value(inner) == 1.0)
        outer = np.array([[-0.11, 0.5], [0.5, 1.11], [-0.2, 1.2]])
        assert np.all(k.kernel_value(outer) == 0.0)

    def test_quadrature_mass_matches(self):
        rng = np.random.default_rng(411)
        for _ in range(8):
            n = int(rng.integers(1, 4))
            g = float(rng.uniform(0.2, 1.5))
            d = float(rng.uniform(0.005, 0.4)) * g / 2.0
            k = ob.SmoothingKernel(d, g, n)
            chk = k.quadrature_check()
            assert chk["mass_defect"] <= 1e-6 * max(1.0, k.mass())
            assert chk["l1_within_bound"]

    def test_l1_box_deviation_at_pinned_triple(self):
        chk = ob.SmoothingKernel(0.01, 0.5, 2).quadrature_check()
        assert chk["l1_box_deviation"] <= 2 * 2 * 0.01 * (0.5 + 2 * 0.01)
        assert chk["l1_box_deviation"] > 0.0

    def test_degenerate_parameters_rejected(self):
        with pytest.raises(ValueError):
            ob.SmoothingKernel(0.3, 0.5, 1)   # delta >= gamma/2
        with pytest.raises(ValueError):
            ob.SmoothingKernel(0.1, 0.5, 0)


class TestSobolev:
    def test_order_zero_is_amplitude(self, modular):
        b = ob.BumpFunction(modular, [[-0.15, 1.45, 1.9]], [[0.2, 0.35, 0.5]],
                            amplitude=3.75)
        rec = ob.sobolev_norm(b, 0)
        assert rec.value == 3.75
        assert rec.words == 0

    def test_zero_function_all_orders(self, modular, test_bump):
        zero = ob.ObservableSum([(0.0, test_bump)])
        for l in range(3):
            assert ob.sobolev_norm(zero, l).value == 0.0

    def test_monotone_in_order(self, test_bump):
        vals = [ob.sobolev_norm(test_bump, l).value for l in range(4)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_order_cap_enforced(self, modular):
        b = ob.BumpFunction(modular, [[0.0, 1.5, 1.0]], [[0.2, 0.2, 0.3]],
                            order_cap=2)
        with pytest.raises(ValueError):
            ob.sobolev_norm(b, 3)

    def test_width_halving_scales_first_order(self, modular):
        b = ob.BumpFunction(modular, [[-0.15, 1.45, 1.9]], [[0.12, 0.15, 0.3]])
        half = ob.BumpFunction(modular, b.center, b.widths / 2.0)
        ratio = ob.sobolev_norm(half, 1).value / ob.sobolev_norm(b, 1).value
        assert ratio >= 1.8

    def test_dilation_covariance_both_directions(self, modular, test_bump):
        s_base = ob.sobolev_norm(test_bump, 1).value
        half = ob.BumpFunction(modular, test_bump.center, test_bump.widths / 2.0)
        r_half = ob.sobolev_norm(half, 1).value / s_base
        assert 2.0 / 1.25 <= r_half <= 2.0 * 1.25
        narrow = ob.BumpFunction(modular, [[-0.15, 1.45, 1.9]],
                                 [[0.12, 0.15, 0.3]])
        doubled = ob.BumpFunction(modular, narrow.center, narrow.widths * 2.0)
        r_dbl = ob.sobolev_norm(doubled, 1).value / ob.sobolev_norm(narrow, 1).value
        assert 0.5 / 1.25 <= r_dbl <= 0.5 * 1.25

    def test_deterministic(self, test_bump):
        a = ob.sobolev_norm(test_bump, 2)
        b = ob.sobolev_norm(test_bump, 2)
        assert a.value == b.value and a.points == b.points


class TestHaarIntegralK1:
    def test_constant_is_one(self, modular):
        assert ob.haar_integral_k1(ob.ConstantObservable(modular, 1.0)) == 1.0

    def test_positive_bump_strictly_positive(self, test_bump):
        assert ob.haar_integral_k1(test_bump) > 0.0

    def test_translate_invariance(self, test_bump):
        base = ob.haar_integral_k1(test_bump)
        moved = ob.haar_integral_k1(
            ob.TranslatedObservable(test_bump, sl2.unipotent_u(0.3)))
        assert abs(moved - base) <= 2e-4

    def test_refinement_stability(self, test_bump):
        coarse = ob.haar_integral_k1(test_bump)
        fine = ob.haar_integral_k1(test_bump, nx=128, nv=128, ntheta=64)
        assert abs(fine - coarse) <= 1e-5

    def test_base_mass_near_pi_thirds(self):
        assert abs(ob.haar_mass_k1() - math.pi / 3.0) <= 1e-6


class TestHaarReference:
    def test_constant_exactly_one(self, modular):
        r = sp.haar_reference(ob.ConstantObservable(modular, 1.0),
                              point_preset("generic1"), 500.0)
        assert r.value == 1.0
        assert not r.flagged_divergent

    def test_constant_level_recovered(self, modular):
        r = sp.haar_reference(ob.ConstantObservable(modular, 3.25),
                              point_preset("generic1"), 200.0)
        assert abs(r.value - 3.25) <= 1e-12

    def test_identity_coset_flagged(self, modular):
        r = sp.haar_reference(ob.ConstantObservable(modular, 1.0),
                              qt.identity_coset(modular), 500.0)
        assert r.flagged_divergent

    def test_doubling_within_recorded_estimate(self, test_bump):
        p = point_preset("generic1")
        r = sp.haar_reference(test_bump, p, 2.0e4)
        r2 = sp.haar_reference(test_bump, p, 4.0e4)
        assert abs(r2.value - r.value) <= r.error_estimate

    def test_agrees_with_quadrature_k1(self, test_bump):
        """Long-arc average against the fundamental-domain quadrature."""
        p = point_preset("generic1")
        ref = sp.haar_reference(test_bump, p, 1.0e6)
        quad_val = ob.haar_integral_k1(test_bump, nx=160, nv=160, ntheta=80)
        assert abs(ref.value - quad_val) <= 5e-3
        assert not ref.flagged_divergent

    def test_k2_surrogate_self_consistency(self, hilbert):
        f = bump_preset(hilbert)
        avg, err = ob.haar_reference_k2(f, hilbert, t_span=4000.0,
                                        samples=80000)
        avg2, err2 = ob.haar_reference_k2(f, hilbert, t_span=8000.0,
                                          samples=160000)
        assert avg >= 0.0
        assert abs(avg2 - avg) <= max(err, err2) * 3.0
