import numpy as np
import pytest

from jumpdiff import fem1d, fem2d, rng
from jumpdiff.gig import GigHeights
from jumpdiff.jumps import ConstantHeights, UniformHeights
from jumpdiff.problems import PRESETS, SampleDraw, make_problem, solve_level, with_heights


class TestPresets:
    @pytest.mark.parametrize("name,dim,kind,heights", [
        ("bm-uniform-1d", 1, "brownian-motion-1d", UniformHeights),
        ("se-gig-1d", 1, "squared-exponential-nystrom-1d", GigHeights),
        ("hetero-2d", 2, "heat-kernel-2d", UniformHeights),
    ])
    def test_random_presets(self, name, dim, kind, heights):
        p = make_problem(name)
        assert p.dim == dim and p.spectrum.kind == kind and isinstance(p.heights, heights)
        assert not p.deterministic

    def test_custom_is_deterministic(self):
        p = make_problem("custom")
        assert p.deterministic and p.spectrum is None and isinstance(p.heights, ConstantHeights)

    def test_all_presets_build(self):
        assert {make_problem(n).name for n in PRESETS} == set(PRESETS)

    def test_levels(self):
        assert make_problem("hetero-2d").h_level(2) == pytest.approx(0.1)
        assert make_problem("bm-uniform-1d").h_level(3) == 2.0**-4

    def test_overrides(self):
        p = make_problem("bm-uniform-1d", intensity="none", jump_hi="4")
        assert p.intensity is None and p.heights.hi == 4.0

    def test_mixed_bc(self):
        assert make_problem("hetero-2d", bc="mixed").bc is fem2d.FLOW_BC

    @pytest.mark.parametrize("kw,match", [
        ({"colour": 1}, "unknown problem parameter"),
        ({"heights": "gamma"}, "heights model"),
        ({"bc": "robin"}, "boundary"),
        ({"dim": 2}, "does not match"),
    ])
    def test_errors(self, kw, match):
        with pytest.raises(ValueError, match=match):
            make_problem("bm-uniform-1d", **kw)

    def test_unknown_preset(self):
        with pytest.raises(ValueError, match="unknown preset"):
            make_problem("bm-3d")

    def test_describe(self):
        d = make_problem("se-gig-1d").describe()
        assert d["problem"] == "se-gig-1d" and d["spectrum_r"] == 0.1 and d["intensity"] == 12.0

    def test_with_heights(self):
        p = with_heights(make_problem("bm-uniform-1d"), ConstantHeights(1.0))
        assert isinstance(p.heights, ConstantHeights) and p.intensity == 12.0


class TestOracleReference:
    def test_custom_oracle(self):
        x = fem1d.REF_GRID_1D
        assert np.allclose(make_problem("custom").oracle_values(), x * (1 - x) / 2, atol=1e-12)

    def test_random_problem_has_no_oracle(self):
        with pytest.raises(ValueError):
            make_problem("bm-uniform-1d").oracle_values()


class TestDraws:
    def test_single_cell(self):
        d = SampleDraw(make_problem("custom"), 0, rng.ESTIMATION, 0, rng.NO_LEVEL, 0)
        assert d.partition is None and d.height_uniforms.size == 1

    @pytest.mark.parametrize("name", ["bm-uniform-1d", "hetero-2d"])
    def test_one_uniform_per_cell(self, name):
        d = SampleDraw(make_problem(name), 3, rng.ESTIMATION, 0, 2, 5)
        assert d.height_uniforms.size == d.partition.n_cells

    def test_noise_prefix_any_order(self):
        p = make_problem("bm-uniform-1d")
        a = SampleDraw(p, 1, rng.ESTIMATION, 0, 1, 0)
        short = a.noise(5).copy()
        long = a.noise(50)
        assert np.array_equal(long[:5], short)

    def test_purposes_differ(self):
        p = make_problem("bm-uniform-1d")
        a = SampleDraw(p, 1, rng.ESTIMATION, 0, 1, 0).noise(4)
        b = SampleDraw(p, 1, rng.REFERENCE, 0, 1, 0).noise(4)
        assert not np.array_equal(a, b)


class TestSolveLevel:
    def test_1d(self):
        p = make_problem("se-gig-1d")
        d = SampleDraw(p, 0, rng.ESTIMATION, 0, 1, 0)
        res = solve_level(d, 2, 8, 1e-2, True, keep_heights=True)
        assert res.values.shape == (p.grid_size,)
        assert res.realized_h <= p.h_level(2) and 0 < res.bias <= 1e-2
        assert res.heights.size == res.uniforms.size == d.partition.n_cells

    def test_2d(self):
        p = make_problem("hetero-2d")
        d = SampleDraw(p, 0, rng.ESTIMATION, 0, 1, 0)
        res = solve_level(d, 0, 8, 0.0, True)
        assert res.values.shape == (fem2d.REF_N_2D**2,) and np.all(np.isfinite(res.values))
        # homogeneous Dirichlet data on the grid boundary
        grid = res.values.reshape(fem2d.REF_N_2D, fem2d.REF_N_2D)
        assert np.abs(grid[0]).max() < 1e-12 and np.abs(grid[:, -1]).max() < 1e-12

    def test_uniform_ignores_partition(self):
        p = make_problem("bm-uniform-1d")
        d = SampleDraw(p, 0, rng.ESTIMATION, 0, 1, 0)
        assert solve_level(d, 3, 8, 0.0, False).realized_h == p.h_level(3)

    def test_h1_dist_symmetric(self):
        p = make_problem("bm-uniform-1d")
        g = np.random.default_rng(0)
        a, b = g.random(p.grid_size), g.random(p.grid_size)
        assert p.h1_dist(a, b) == p.h1_dist(b, a) > 0
