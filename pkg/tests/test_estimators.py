import math

import numpy as np
import pytest

from jumpdiff import estimators as E
from jumpdiff import rng
from jumpdiff.gig import GigHeights
from jumpdiff.problems import SampleDraw, make_problem
from jumpdiff.spectra import xi_tail

BM = make_problem("bm-uniform-1d")
GIG = make_problem("se-gig-1d")
FLAT = make_problem("custom")
H = [0.5 * 2.0**-l for l in range(8)]


def det_schedule(problem, L, **kw):
    return E.build_schedule(E.deterministic_pilot(H), L, spectrum=problem.spectrum, heights=problem.heights, **kw)


def same_level_schedule(problem, M):
    # two levels with identical discretization, cutoff and bias
    spec = det_schedule(problem, 0).levels[0]
    lv = tuple(E.LevelSpec(l, spec.h_bar, spec.e_h2, spec.N, spec.eps, m) for l, m in enumerate(M))
    return E.LevelSchedule(lv)


def replication_spread(outs, problem):
    # mean field and mean squared H1 deviation over replications
    mean = np.mean([o.mean for o in outs], axis=0)
    var = sum(problem.h1_norm_sq(o.mean - mean) for o in outs) / (len(outs) - 1)
    return mean, var


class TestSchedule:
    def test_documented_case(self):
        s = det_schedule(BM, 3)
        assert s.M == [256, 64, 65, 37]
        assert s.eps == [0.0] * 4

    def test_same_rule(self):
        assert det_schedule(BM, 3, sample_rule="same").M == [256, 16, 17, 10]

    @pytest.mark.parametrize("L", [0, 2, 5])
    def test_base_level(self, L):
        s = det_schedule(BM, L)
        assert s.M[0] == math.ceil(H[L] ** -2 - 1e-9)
        assert s.L == L

    def test_tail_and_bias_follow_mesh(self):
        s = det_schedule(GIG, 4)
        assert np.allclose(s.eps, np.square(H[:5]))
        for spec in s.levels:
            assert xi_tail(GIG.spectrum, spec.N) <= spec.e_h2

    def test_kappa(self):
        s = E.build_schedule(E.deterministic_pilot(H), 2, kappa=0.5, spectrum=GIG.spectrum, heights=GIG.heights)
        assert np.allclose(s.eps, H[:3])
        assert s.M[0] == math.ceil(1 / H[2] - 1e-9)

    def test_nested(self):
        s = det_schedule(BM, 3, nested=True)
        assert s.M == [256, 64, 64, 37]

    @pytest.mark.parametrize("seed", range(5))
    def test_monotone_from_random_pilot(self, seed):
        g = np.random.default_rng(seed)
        e = np.sort(g.uniform(1e-4, 0.2, 6))[::-1] * g.uniform(0.9, 1.1, 6)
        pil = E.PilotStats(np.array(H[:6]), e, np.zeros(6), 10)
        s = E.build_schedule(pil, 5, spectrum=GIG.spectrum, heights=GIG.heights)
        assert np.all(np.diff(s.N) >= 0) and np.all(np.diff(s.eps) <= 0)

    def test_cutoff_cap(self):
        pil = E.deterministic_pilot([0.5, 1e-9])
        with pytest.raises(E.ScheduleError, match="level 1"):
            E.build_schedule(pil, 1, spectrum=BM.spectrum, heights=BM.heights)

    def test_pilot_too_short(self):
        with pytest.raises(E.ScheduleError):
            E.build_schedule(E.deterministic_pilot(H[:2]), 3)

    def test_bad_rule(self):
        with pytest.raises(ValueError):
            det_schedule(BM, 1, sample_rule="next")

    @pytest.mark.parametrize("field,values,msg", [
        ("h_bar", [0.5, 0.5], "thresholds"),
        ("N", [8, 4], "cutoffs"),
        ("eps", [0.1, 0.2], "biases"),
        ("M", [4, 0], "at least one"),
    ])
    def test_validate(self, field, values, msg):
        base = dict(level=0, h_bar=0.5, e_h2=0.25, N=4, eps=0.1, M=4)
        lv = []
        for l, v in enumerate(values):
            d = dict(base, level=l, h_bar=0.5 / (l + 1))
            d[field] = v
            lv.append(E.LevelSpec(**d))
        with pytest.raises(E.ScheduleError, match=msg):
            E.LevelSchedule(tuple(lv)).validate()

    def test_nested_validate(self):
        with pytest.raises(E.ScheduleError, match="bootstrap"):
            det_schedule(BM, 3).validate(nested=True)


class TestPilot:
    def test_uniform_is_exact(self):
        p = E.pilot_mesh_stats(BM, 3, 10, adaptive=False)
        assert np.array_equal(p.e_h2, np.square(H[:4])) and np.all(p.stderr == 0)

    def test_threshold_is_upper_bound(self):
        p = E.pilot_mesh_stats(BM, 4, 20, adaptive=True, master=3)
        assert np.all(np.sqrt(p.e_h2) <= p.h_bar)

    def test_too_few(self):
        with pytest.raises(ValueError):
            E.pilot_mesh_stats(BM, 2, 5, True)

    def test_stability(self):
        a = E.pilot_mesh_stats(BM, 4, 100, True, master=1)
        b = E.pilot_mesh_stats(BM, 4, 200, True, master=1)
        assert np.all(np.abs(a.e_h2 - b.e_h2) < 2 * a.stderr + 1e-15)

    def test_disjoint_from_estimation(self):
        pil = SampleDraw(BM, 0, rng.PILOT, 0, rng.NO_LEVEL, 0).partition
        est = SampleDraw(BM, 0, rng.ESTIMATION, 0, rng.NO_LEVEL, 0).partition
        assert not np.array_equal(pil.breakpoints, est.breakpoints)


class TestCoupling:
    @pytest.mark.parametrize("key", [(0, 0, 0, 1, 0), (5, 0, 3, -1, 17), (9, 1, 0, 4, 250)])
    def test_recomputation(self, key):
        a, b = SampleDraw(GIG, *key), SampleDraw(GIG, *key)
        na = a.noise(8)
        nb = b.noise(64)
        assert np.array_equal(na, nb[:8]) and np.array_equal(a.noise(64), nb)
        assert np.array_equal(a.partition.breakpoints, b.partition.breakpoints)
        assert np.array_equal(a.height_uniforms, b.height_uniforms)

    def test_levels_share_the_draw(self):
        s = det_schedule(GIG, 3)
        d = SampleDraw(GIG, 1, rng.ESTIMATION, 0, 3, 2)
        fine, coarse = d.coefficient(s.N[3], s.eps[3]), d.coefficient(s.N[2], s.eps[2])
        assert fine.partition is coarse.partition
        assert np.array_equal(fine.field.coefficients[: s.N[2]], coarse.field.coefficients)
        assert np.max(np.abs(fine.heights.values - coarse.heights.values)) ** 2 <= 2 * s.eps[2] + 2 * s.eps[3]

    def test_labels_differ_by_index(self):
        a = SampleDraw(BM, 0, rng.ESTIMATION, 0, 1, 0).noise(4)
        b = SampleDraw(BM, 0, rng.ESTIMATION, 0, 1, 1).noise(4)
        assert not np.array_equal(a, b)


class TestMC:
    def test_deterministic_problem(self):
        spec = det_schedule(FLAT, 3).levels[-1]
        one = FLAT.solve(SampleDraw(FLAT, 0, 0, 0, -1, 0).coefficient(0, 0.0), FLAT.mesh(None, 3, True))
        for M in (1, 7):
            assert np.allclose(E.mc_estimate(FLAT, spec, M, 0).mean, one, atol=1e-15, rtol=0)

    def test_bad_M(self):
        with pytest.raises(ValueError):
            E.mc_estimate(BM, det_schedule(BM, 0).levels[0], 0, 0)

    def test_fail_fast(self, monkeypatch):
        def boom(draw, *a, **k):
            if draw.key[-1] == 3:
                raise FloatingPointError("singular")
            return real(draw, *a, **k)

        real = E.solve_level
        monkeypatch.setattr(E, "solve_level", boom)
        with pytest.raises(E.SampleError, match=r"\(4, 0, 0, -1, 3\)"):
            E.mc_estimate(BM, det_schedule(BM, 0).levels[0], 8, 4)

    def test_std_scaling(self):
        spec = det_schedule(BM, 1).levels[1]
        sd = []
        for M in (8, 32):
            outs = [E.mc_estimate(BM, spec, M, 11, r) for r in range(20)]
            sd.append(math.sqrt(replication_spread(outs, BM)[1]))
        assert sd[0] / sd[1] == pytest.approx(2.0, rel=0.35)

    def test_unbiased_in_M(self):
        spec = det_schedule(BM, 1).levels[1]
        m = []
        for M in (8, 32):
            outs = [E.mc_estimate(BM, spec, M, 12, r) for r in range(20)]
            mean, var = replication_spread(outs, BM)
            m.append((mean, var / 20))
        assert BM.h1_dist(m[0][0], m[1][0]) <= 3 * math.sqrt(m[0][1] + m[1][1])

    def test_variance_record(self):
        out = E.mc_estimate(BM, det_schedule(BM, 0).levels[0], 16, 0)
        assert out.levels[0].variance > 0 and out.predicted_variance == out.levels[0].variance / 16
        assert E.mc_estimate(BM, det_schedule(BM, 0).levels[0], 1, 0).levels[0].variance != 0.0


class TestMLMC:
    def test_level_zero_is_mc(self):
        s = det_schedule(BM, 0)
        a = E.mlmc_estimate(BM, s, 5, 2)
        b = E.mc_estimate(BM, s.levels[0], s.M[0], 5, 2)
        assert np.array_equal(a.mean, b.mean)

    def test_identical_levels_collapse(self, monkeypatch):
        # a real schedule forbids equal thresholds; the identity is checked regardless
        monkeypatch.setattr(E.LevelSchedule, "validate", lambda self, nested=False: None)
        s = same_level_schedule(GIG, (12, 5))
        a = E.mlmc_estimate(GIG, s, 3)
        b = E.mc_estimate(GIG, s.levels[0], 12, 3)
        assert np.array_equal(a.mean, b.mean)
        assert a.levels[1].variance == 0.0

    def test_counts(self):
        s = det_schedule(BM, 2)
        out = E.mlmc_estimate(BM, s, 0)
        assert [st.M for st in out.levels] == s.M
        assert [st.solves for st in out.levels] == [s.M[0], 2 * s.M[1], 2 * s.M[2]]
        assert out.solves == sum(s.M[l] + (s.M[l + 1] if l < 2 else 0) for l in range(3))

    def test_threads_do_not_change_result(self):
        s = det_schedule(GIG, 2)
        a = E.mlmc_estimate(GIG, s, 8, threads=1)
        b = E.mlmc_estimate(GIG, s, 8, threads=3)
        assert np.array_equal(a.mean, b.mean)

    def test_variance_decay(self):
        out = E.mlmc_estimate(BM, det_schedule(BM, 4), 21)
        v = [st.variance for st in out.levels]
        assert v[4] < v[2] < v[0]

    def test_bias_check_trips(self, monkeypatch):
        real = GigHeights.exact_from_uniforms
        monkeypatch.setattr(GigHeights, "exact_from_uniforms", lambda self, u: real(self, u) + 1.0)
        with pytest.raises(E.BiasBoundError):
            E.mlmc_estimate(GIG, det_schedule(GIG, 1), 0)

    def test_bias_recorded(self):
        out = E.mlmc_estimate(GIG, det_schedule(GIG, 2), 0)
        for st, spec in zip(out.levels, out.schedule.levels):
            assert 0 < st.bias_mean_sq <= st.bias_max_sq <= st.bias_bound <= spec.eps


class TestBootstrap:
    def test_equal_M_is_mc(self):
        s = E.LevelSchedule(tuple(E.LevelSpec(l, H[l], H[l] ** 2, 4 + l, 0.0, 9) for l in range(3)))
        a = E.bootstrap_mlmc_estimate(BM, s, 6)
        b = E.mc_estimate(BM, s.levels[-1], 9, 6)
        assert np.array_equal(a.mean, b.mean)

    def test_counts(self):
        s = det_schedule(GIG, 3, nested=True)
        out = E.bootstrap_mlmc_estimate(GIG, s, 0)
        assert out.solves == sum(s.M)
        assert [st.solves for st in out.levels] == s.M
        std = E.mlmc_estimate(GIG, s, 0)
        assert std.solves == sum(s.M) + sum(s.M[1:])

    def test_needs_nesting(self):
        with pytest.raises(E.ScheduleError, match="bootstrap"):
            E.bootstrap_mlmc_estimate(BM, det_schedule(BM, 3), 0)

    def test_threads_do_not_change_result(self):
        s = det_schedule(BM, 2, nested=True)
        assert np.array_equal(E.bootstrap_mlmc_estimate(BM, s, 2).mean,
                              E.bootstrap_mlmc_estimate(BM, s, 2, threads=2).mean)

    @pytest.mark.slow
    def test_unbiased_against_mlmc(self):
        s = det_schedule(BM, 2, nested=True)
        res = []
        for fn in (E.bootstrap_mlmc_estimate, E.mlmc_estimate):
            outs = [fn(BM, s, 31, r) for r in range(20)]
            mean, var = replication_spread(outs, BM)
            res.append((mean, var / 20))
        assert BM.h1_dist(res[0][0], res[1][0]) <= 3 * math.sqrt(res[0][1] + res[1][1])

    @pytest.mark.slow
    def test_variance_accounting(self):
        s = det_schedule(BM, 2, nested=True)
        outs = [E.bootstrap_mlmc_estimate(BM, s, 41, r) for r in range(40)]
        emp = replication_spread(outs, BM)[1]
        pred = np.mean([o.predicted_variance for o in outs])
        assert emp == pytest.approx(pred, rel=0.5)


class TestDispatch:
    def test_mc_uses_finest_level(self):
        s = det_schedule(BM, 1)
        out = E.run_estimator("mc", BM, s, 0)
        assert out.kind == "mc" and out.solves == s.M[0] and out.schedule is s

    def test_unknown(self):
        with pytest.raises(ValueError, match="unknown estimator"):
            E.run_estimator("qmc", BM, det_schedule(BM, 0), 0)


class TestFitRate:
    @pytest.mark.parametrize("rate", [1.0, 0.75, 0.5])
    def test_exact_power_law(self, rate):
        inv_h = 2.0 ** np.arange(1, 7)
        assert E.fit_rate(zip(inv_h, 0.3 * inv_h**-rate)) == pytest.approx(rate, abs=1e-12)

    def test_scale_invariance(self):
        g = np.random.default_rng(0)
        inv_h = 2.0 ** np.arange(5)
        r = g.uniform(0.1, 1, 5)
        assert E.fit_rate(zip(inv_h, r)) == pytest.approx(E.fit_rate(zip(inv_h, 7 * r)), abs=1e-12)

    @pytest.mark.parametrize("rows", [[(1, 1), (2, 0.5)], [(1, 1), (2, 0.0), (4, 0.2)], [(1, 1), (-2, 0.5), (4, 0.2)]])
    def test_bad_rows(self, rows):
        with pytest.raises(ValueError):
            E.fit_rate(rows)


class TestStudy:
    def test_reference_must_be_finer(self):
        with pytest.raises(ValueError, match="reference level"):
            E.rmse_study(BM, range(3), 2, 3, "mlmc", 0)

    def test_deterministic_is_discretization_error(self):
        res = E.rmse_study(FLAT, range(3), 5, 3, "mlmc", 0)
        ref = FLAT.oracle_values()
        for row in res.rows:
            u = FLAT.solve(SampleDraw(FLAT, 0, 0, 0, -1, 0).coefficient(0, 0.0), FLAT.mesh(None, row.L, True))
            assert row.rmse == pytest.approx(FLAT.h1_dist(u, ref), abs=1e-10)
        assert res.slope == pytest.approx(1.0, abs=0.05)

    def test_rows(self):
        res = E.rmse_study(BM, range(3), 4, 3, "mlmc", 1, adaptive=False, keep_outputs=True)
        assert [r.L for r in res.rows] == [0, 1, 2]
        assert [r.inv_h for r in res.rows] == [2.0, 4.0, 8.0]
        assert len(res.rows[2].errors) == 3 and res.rows[2].slope_so_far is not None
        assert res.rows[1].slope_so_far is None and len(res.outputs) == 9
        assert res.rows[2].M_levels == res.schedules[2].M

    @pytest.mark.slow
    def test_rmse_decreases(self):
        res = E.rmse_study(BM, range(5), 6, 5, "mlmc", 3)
        r = [row.rmse for row in res.rows]
        inversions = [b / a for a, b in zip(r, r[1:]) if b > a]
        assert len(inversions) <= 1 and all(x <= 1.2 for x in inversions)


class TestLevelVariances:
    @pytest.mark.slow
    @pytest.mark.parametrize("name", ["bm-uniform-1d", "se-gig-1d"])
    def test_decay(self, name):
        # pooled over replications; Brownian paths give heavy-tailed corrections, so only
        # the overall decay is asserted there
        p = make_problem(name)
        s = E.build_schedule(E.pilot_mesh_stats(p, 5, 100, True, 2024), 5, spectrum=p.spectrum, heights=p.heights)
        v = np.mean([[st.variance for st in E.mlmc_estimate(p, s, 2024, r).levels] for r in range(3)], axis=0)
        assert v[5] < v[1]
        if name == "se-gig-1d":
            assert np.all(np.diff(v[2:]) <= 0)
