import numpy as np
import pytest

from polyheat.bundle import Bundle, ConstantFormConnection, make_potential, min_eigenvalue_potential
from polyheat.geometry import Circle, FlatTorus, Sphere
from polyheat.kernels import StepKernelConfig, step_kernel_matrix, weighted
from polyheat.oracle import operator_reference_1d, spectral_trace
from polyheat.polygon import Partition
from polyheat.propagator import (
    PreconditionError,
    compose_apply,
    compose_apply_mc,
    heat_kernel_matrix,
    hsu_compare,
    trace_estimate,
)

SO2 = np.array([[0.0, -1.0], [1.0, 0.0]])


def circle_setup(variant="w-hat", lam=1.0, **bundle_kw):
    M = Circle()
    return M, M.make_grid(256), StepKernelConfig(Bundle(M, **bundle_kw), variant, lam)


class TestComposeApply:
    def test_empty_partition_is_identity(self):
        M, g, cfg = circle_setup()
        u = np.sin(g.nodes[:, 0])
        assert np.array_equal(compose_apply(cfg, None, u, g), u)
        assert np.array_equal(compose_apply(cfg, Partition(()), u, g), u)

    def test_torus_preserves_constants(self):
        M = FlatTorus([1.0, 1.0])
        g = M.make_grid(48)
        cfg = StepKernelConfig(Bundle(M))
        out = compose_apply(cfg, Partition.uniform(0.01, 4), np.full(len(g), 3.0), g)
        assert np.abs(out - 3.0).max() <= 1e-10

    def test_circle_eigenfunction(self):
        M, g, cfg = circle_setup()
        u = np.cos(g.nodes[:, 0])
        out = compose_apply(cfg, Partition.uniform(0.5, 64), u, g)
        assert np.abs(out - np.exp(-0.5) * u).max() <= 2e-3

    def test_associativity(self):
        M, g, cfg = circle_setup(potential=make_potential("cos-theta", Circle(), 1))
        u = np.exp(np.sin(g.nodes[:, 0]))
        T1, T2 = Partition((0.1, 0.05)), Partition((0.2, 0.2, 0.07))
        joint = compose_apply(cfg, T1 + T2, u, g)
        split = compose_apply(cfg, T1, compose_apply(cfg, T2, u, g), g)
        assert np.abs(joint - split).max() <= 1e-12

    def test_rank_two_section_shape(self):
        M = Circle()
        g = M.make_grid(64)
        cfg = StepKernelConfig(Bundle(M, 2, potential=make_potential("matrix-demo", M, 2)))
        u = np.stack([np.cos(g.nodes[:, 0]), np.ones(64)], axis=1)
        assert compose_apply(cfg, Partition.uniform(0.1, 2), u, g).shape == (64, 2)
        with pytest.raises(ValueError):
            compose_apply(cfg, Partition.uniform(0.1, 2), u[:, 0], g)

    def test_converges_to_reference_with_potential(self):
        M = Circle()
        g = M.make_grid(128)
        V = make_potential("matrix-demo", M, 2)
        cfg = StepKernelConfig(Bundle(M, 2, potential=V))
        u = np.stack([np.cos(g.nodes[:, 0]), np.sin(2 * g.nodes[:, 0])], axis=1)
        exact = (operator_reference_1d(M, 128, 0.4, 2, V) @ u.reshape(-1)).reshape(u.shape)
        errs = [np.abs(compose_apply(cfg, Partition.uniform(0.4, r), u, g) - exact).max() for r in (4, 8, 16, 32)]
        assert all(b < a for a, b in zip(errs, errs[1:]))
        assert errs[-1] < 5e-3


class TestHeatKernelMatrix:
    def test_single_step_is_step_matrix(self):
        M, g, cfg = circle_setup("v", 0.0)
        K = heat_kernel_matrix(cfg, Partition((0.3,)), g)
        assert np.array_equal(K.matrix, weighted(step_kernel_matrix(cfg, 0.3, g), g, 1))

    def test_apply_matches_compose(self):
        M, g, cfg = circle_setup(potential=make_potential("cos-theta", Circle(), 1))
        u = np.exp(np.cos(g.nodes[:, 0]))
        T = Partition.uniform(0.3, 5)
        assert np.abs(heat_kernel_matrix(cfg, T, g).apply(u) - compose_apply(cfg, T, u, g)).max() <= 1e-12

    def test_circle_diagonal(self):
        M, g, cfg = circle_setup("v", 0.0)
        K = heat_kernel_matrix(cfg, Partition.uniform(0.5, 64), g)
        assert K.kernel_values()[7, 7, 0, 0] == pytest.approx(0.398942, abs=1e-3)

    def test_fine_then_last_ladder_converges(self):
        # partitions refined everywhere except a fixed short final step
        M = Circle()
        V = make_potential("cos-theta", M, 1)
        g = M.make_grid(256)
        cfg = StepKernelConfig(Bundle(M, potential=V))
        ref = operator_reference_1d(M, 256, 0.5, 1, V)
        errs = []
        for r in (4, 8, 16, 32):
            K = heat_kernel_matrix(cfg, Partition.fine_then_last(0.5, 0.05, r), g)
            errs.append(np.abs(K.matrix - ref).max() / np.abs(ref).max())
        assert all(b < a for a, b in zip(errs, errs[1:]))

    def test_needs_steps(self):
        M, g, cfg = circle_setup()
        with pytest.raises(ValueError):
            heat_kernel_matrix(cfg, Partition(()), g)


class TestTrace:
    def test_single_step_weyl_term(self):
        M = FlatTorus([1.0, 2.0])
        g = M.make_grid(16)
        cfg = StepKernelConfig(Bundle(M))
        assert trace_estimate(cfg, Partition((0.05,)), g) == pytest.approx(2.0 / (4 * np.pi * 0.05), rel=1e-12)

    def test_circle(self):
        M, g, cfg = circle_setup()
        est = trace_estimate(cfg, Partition.uniform(0.5, 32), g)
        assert est == pytest.approx(2.506628, rel=1e-2)
        assert est == pytest.approx(spectral_trace(M, 0.5), rel=1e-10)

    def test_direct_sum_doubles(self):
        M = Sphere()
        g = M.make_grid(300)
        T = Partition.uniform(0.5, 4)
        one = trace_estimate(StepKernelConfig(Bundle(M, 1)), T, g)
        two = trace_estimate(StepKernelConfig(Bundle(M, 2)), T, g)
        assert two == pytest.approx(2 * one, rel=1e-14)

    def test_diagonal_positive(self):
        M = Sphere()
        g = M.make_grid(300)
        K = heat_kernel_matrix(StepKernelConfig(Bundle(M), "lambda", -1.0), Partition.uniform(0.4, 4), g)
        assert np.all(K.diagonal_traces() > 0)


class TestHsu:
    def test_scalar_equality_case(self):
        M = Circle()
        V = make_potential("cos-theta", M, 1)
        cfg = StepKernelConfig(Bundle(M, potential=V), "v", 0.0)
        assert hsu_compare(cfg, V, Partition.uniform(0.5, 4), M.make_grid(128)) <= 1e-12

    def test_shifted_potential_has_margin(self):
        M = Circle()
        V = make_potential("cos-theta", M, 1, shift=1.0)
        cfg = StepKernelConfig(Bundle(M, potential=V))
        v = make_potential("cos-theta", M, 1)
        margin = hsu_compare(cfg, v, Partition.uniform(0.5, 4), M.make_grid(128))
        assert margin < 0
        assert margin > -(1 - np.exp(-0.5)) * 2

    @pytest.mark.parametrize("variant, lam", [("w-hat", 1.0), ("v", 0.0), ("lambda", -1.0)])
    def test_matrix_demo(self, variant, lam):
        M = Circle()
        V = make_potential("matrix-demo", M, 2)
        cfg = StepKernelConfig(Bundle(M, 2, potential=V), variant, lam)
        for r in (2, 8):
            assert hsu_compare(cfg, min_eigenvalue_potential(V), Partition.uniform(0.5, r), M.make_grid(96)) <= 1e-12

    def test_precondition(self):
        M = Circle()
        V = make_potential("matrix-demo", M, 2)
        cfg = StepKernelConfig(Bundle(M, 2, potential=V))
        with pytest.raises(PreconditionError):
            hsu_compare(cfg, 1.0, Partition.uniform(0.5, 2), M.make_grid(32))


def torus_mc_config(**bundle_kw):
    M = FlatTorus([1.0, 1.0])
    return M, StepKernelConfig(Bundle(M, **bundle_kw), "lambda", -1.0, cutoff=False)


class TestMonteCarlo:
    def test_weights_are_zero_or_one(self):
        from polyheat.polygon import sample_paths
        from polyheat.propagator import path_weights

        M, cfg = torus_mc_config()
        T = Partition.uniform(0.5, 4)
        batch = sample_paths(M, np.zeros(2), T, 4000, np.random.default_rng(0))
        w = path_weights(cfg, batch)[:, 0, 0]
        assert set(np.unique(w)) <= {0.0, 1.0}
        assert np.any(w == 0)

    def test_constant_section_loses_escaped_mass(self):
        M, cfg = torus_mc_config()
        T = Partition.uniform(0.5, 4)
        res = compose_apply_mc(cfg, T, lambda p: np.ones(len(p)), np.zeros(2), 20_000, seed=3)
        assert res.estimate[0] == pytest.approx(1 - res.zero_weight / res.paths, abs=1e-12)
        fine = compose_apply_mc(cfg, Partition.uniform(0.5, 64), lambda p: np.ones(len(p)), np.zeros(2), 20_000, 3)
        assert fine.estimate[0] > res.estimate[0]
        assert fine.zero_weight < res.zero_weight

    def test_constant_potential_scales_exactly(self):
        M, cfg = torus_mc_config()
        _, shifted = torus_mc_config(potential=make_potential("constant", M, 1, value=0.9))
        T = Partition.uniform(0.2, 8)

        def u(p):
            return np.cos(2 * np.pi * p[:, 0])

        a = compose_apply_mc(cfg, T, u, np.array([0.2, 0.1]), 5000, seed=11)
        b = compose_apply_mc(shifted, T, u, np.array([0.2, 0.1]), 5000, seed=11)
        assert b.estimate[0] == pytest.approx(np.exp(-0.9 * 0.2) * a.estimate[0], rel=1e-12)

    def test_workers_do_not_change_result(self, monkeypatch):
        import polyheat.propagator as prop

        monkeypatch.setattr(prop, "MC_CHUNK", 1000)
        M, cfg = torus_mc_config()
        T = Partition.uniform(0.1, 4)

        def u(p):
            return np.cos(2 * np.pi * p[:, 0])

        one = compose_apply_mc(cfg, T, u, np.zeros(2), 5500, seed=5, workers=1)
        many = compose_apply_mc(cfg, T, u, np.zeros(2), 5500, seed=5, workers=4)
        assert np.array_equal(one.estimate, many.estimate)
        assert np.array_equal(one.stderr, many.stderr)

    def test_agrees_with_grid_for_twisted_bundle(self):
        # a rotating connection makes the transport order matter
        M = FlatTorus([1.0, 1.0])
        conn = ConstantFormConnection(np.array([3.0, -1.0]), SO2)
        cfg = StepKernelConfig(Bundle(M, 2, conn), "w-hat")
        T = Partition.uniform(0.05, 4)

        def u(p):
            return np.stack([np.cos(2 * np.pi * p[:, 0]), np.sin(2 * np.pi * p[:, 1])], axis=1)

        g = M.make_grid(40)
        grid = compose_apply(cfg, T, u(g.nodes), g)
        i = 40 * 8 + 13
        res = compose_apply_mc(cfg, T, u, g.nodes[i], 100_000, seed=2)
        assert np.all(np.abs(res.estimate - grid[i]) <= 3 * res.stderr + 1e-6)

    def test_sphere_eigenfunction(self):
        M = Sphere()
        cfg = StepKernelConfig(Bundle(M), "lambda", 0.0)
        res = compose_apply_mc(cfg, Partition.uniform(0.3, 16), lambda p: p[:, 2], np.array([0, 0, 1.0]), 100_000, 4)
        assert abs(res.estimate[0] - np.exp(-0.6)) <= 3 * res.stderr[0] + 2e-3
        assert res.escape_bound < 1e-20

    def test_needs_two_paths(self):
        M, cfg = torus_mc_config()
        with pytest.raises(ValueError):
            compose_apply_mc(cfg, Partition((0.1,)), lambda p: np.ones(len(p)), np.zeros(2), 1, 0)
