import io
import math
import warnings

import numpy as np
import pytest

from pathineq import bsdesolve as bs
from pathineq import pathcore as pc


def brownian(grid, d, n, seed):
    return pc.sample_brownian(grid, d, n, seed)


def model_from(gen, term, m=1, d=1, label=""):
    return bs.BsdeModel(
        generator=gen.fn, terminal=term.fn, m=m, d=d, cls=gen.cls,
        L_g=gen.L_g, L_F=term.L_F, growth_C=gen.growth_C, gstar=gen.gstar,
        lower_bound_a=gen.lower_bound_a, lower_bound_b=gen.lower_bound_b,
        linear_L_G=gen.linear_L_G, label=label,
    )


# ---------------------------------------------------------------- model probes


def test_model_rejects_understated_lipschitz_constant():
    gen = bs.generator_library("martingale", q=lambda t, paths: np.array([2.0]),
                               q_bound=2.0)
    term = bs.terminal_library("terminal_value")
    with pytest.raises(ValueError, match="Lipschitz"):
        bs.BsdeModel(
            generator=gen.fn, terminal=term.fn, m=1, d=1, cls="lipschitz",
            L_g=0.1, L_F=1.0,
        )


def test_model_rejects_understated_growth():
    term = bs.terminal_library("terminal_value")
    with pytest.raises(ValueError, match="growth"):
        bs.BsdeModel(
            generator=lambda t, paths, y, z: 5.0 * (z**2).sum(axis=-1),
            terminal=term.fn, m=1, d=1, cls="quadratic_convex",
            L_g=0.0, L_F=1.0, growth_C=0.5,
        )


def test_model_rejects_multidim_quadratic_and_bad_class():
    term = bs.terminal_library("terminal_value")
    gen = bs.generator_library("quadratic")
    with pytest.raises(ValueError, match="one-dimensional"):
        bs.BsdeModel(generator=gen.fn, terminal=term.fn, m=2, d=1,
                     cls="quadratic_convex", L_g=0.0, L_F=1.0, growth_C=0.5)
    with pytest.raises(ValueError, match="class"):
        bs.BsdeModel(generator=gen.fn, terminal=term.fn, m=1, d=1,
                     cls="mystery", L_g=0.0, L_F=1.0)


# ---------------------------------------------------------------- lsmc solver


def test_lsmc_conditional_expectation_of_terminal_brownian():
    # g = 0, F = W_T: Y_t = W_t (martingale), terminal slice exact
    grid = pc.make_grid(1.0, 25)
    noise = brownian(grid, 1, 4096, 17)
    model = model_from(bs.generator_library("zero"),
                       bs.terminal_library("terminal_value"))
    sol = bs.solve_bsde_lsmc(model, grid, noise)
    np.testing.assert_array_equal(sol.Y.values[:, -1, 0], noise.values[:, -1, 0])
    err = sol.Y.values[:, :, 0] - noise.values[:, :, 0]
    assert np.sqrt(np.mean(err**2)) < 0.05
    assert abs(sol.y0[0]) < 4.0 / math.sqrt(noise.n)
    assert sol.diagnostics["picard_converged"]


def test_lsmc_linear_ode_closed_form():
    # g = -r y, F = 1: Y_t = e^{-r (T - t)} (no Monte-Carlo noise in Y)
    r, T, K = 0.5, 1.0, 50
    grid = pc.make_grid(T, K)
    noise = brownian(grid, 1, 512, 3)
    gen = bs.GeneratorSpec(fn=lambda t, paths, y, z: -r * y, cls="lipschitz",
                           L_g=r, label="-ry")
    model = model_from(gen, bs.terminal_library("constant", value=1.0))
    sol = bs.solve_bsde_lsmc(model, grid, noise)
    target = np.exp(-r * (T - grid.times))
    err = np.abs(sol.Y.values[:, :, 0] - target[None, :])
    assert err.max() < 0.01


def test_lsmc_generator_in_z_matches_tilted_mean():
    # g = gamma z, F = W_T: Y_t = W_t + gamma (T - t); Y_0 equals the
    # terminal mean under the gamma-tilted law (the only feasible dual tilt)
    gamma, T, K = 0.7, 1.0, 25
    grid = pc.make_grid(T, K)
    noise = brownian(grid, 1, 8192, 29)
    gen = bs.generator_library("linear", gamma=gamma)
    model = model_from(gen, bs.terminal_library("terminal_value"))
    sol = bs.solve_bsde_lsmc(model, grid, noise)
    truth = noise.values[:, :, 0] + gamma * (T - grid.times)[None, :]
    err = sol.Y.values[:, :, 0] - truth
    assert np.sqrt(np.mean(err**2)) < 0.05
    assert sol.y0[0] == pytest.approx(gamma * T, abs=0.05)
    tilt = pc.GirsanovTilt(q=lambda t: np.array([gamma]), bound=gamma,
                           kind="deterministic", label="const")
    tilted = pc.sample_tilted_brownian(grid, tilt, 1, 8192, join := 77)
    dual = float(tilted.values[:, -1, 0].mean())
    se = float(tilted.values[:, -1, 0].std() / math.sqrt(tilted.n))
    assert abs(sol.y0[0] - dual) < 3 * se + 0.05


def test_lsmc_two_dimensional_value_process():
    # F = (W_T, W_T^2): E[W_T^2 | W_t] = W_t^2 + (T - t), both in the basis
    T, K = 1.0, 20
    grid = pc.make_grid(T, K)
    noise = brownian(grid, 1, 8192, 5)

    def term(values):
        w = values[:, -1, 0]
        return np.column_stack([w, w**2])

    model = bs.BsdeModel(
        generator=lambda t, paths, y, z: np.zeros(y.shape),
        terminal=term, m=2, d=1, cls="lipschitz", L_g=0.0, L_F=3.0,
    )
    sol = bs.solve_bsde_lsmc(model, grid, noise)
    w = noise.values[:, :, 0]
    truth0, truth1 = w, w**2 + (T - grid.times)[None, :]
    assert np.sqrt(np.mean((sol.Y.values[:, :, 0] - truth0) ** 2)) < 0.06
    assert np.sqrt(np.mean((sol.Y.values[:, :, 1] - truth1) ** 2)) < 0.12


def test_lsmc_martingale_residuals_centered():
    # terminal outside the basis span, so the residual variance is intrinsic
    # rather than pure fit noise and the standard-error band is meaningful
    grid = pc.make_grid(1.0, 16)
    noise = brownian(grid, 1, 4096, 23)
    model = model_from(bs.generator_library("zero"),
                       bs.terminal_library("running_max"))
    sol = bs.solve_bsde_lsmc(model, grid, noise)
    for k in range(grid.steps):
        dw = noise.values[:, k + 1, 0] - noise.values[:, k, 0]
        r = (sol.Y.values[:, k + 1, 0] - sol.Y.values[:, k, 0]
             - sol.Z[:, k, 0, 0] * dw)
        # mean(Y_{k+1} - Y_k) is exactly zero in sample (least squares keeps
        # the constant column), so the mean residual equals -mean(Z dW):
        # the band must cover the fluctuation of Z dW with Z frozen, not the
        # naive per-path residual spread (paths are coupled through the fit)
        s = sol.Z[:, k, 0, 0] * dw
        se = math.hypot(r.std(ddof=1), s.std(ddof=1)) / math.sqrt(len(r))
        assert abs(r.mean()) < 4 * se + 1e-12


def test_lsmc_rank_deficient_design_warns_and_reduces():
    grid = pc.make_grid(1.0, 4)
    noise = brownian(grid, 1, 3, 0)
    model = model_from(bs.generator_library("zero"),
                       bs.terminal_library("terminal_value"))
    with pytest.warns(UserWarning, match="rank-deficient"):
        sol = bs.solve_bsde_lsmc(model, grid, noise)
    assert np.all(np.isfinite(sol.Y.values))


def test_lsmc_picard_cap_flags_nonconvergence():
    grid = pc.make_grid(1.0, 2)  # dt = 0.5, contraction factor 15 > 1
    noise = brownian(grid, 1, 64, 1)
    gen = bs.GeneratorSpec(fn=lambda t, paths, y, z: 30.0 * y, cls="lipschitz",
                           L_g=30.0, label="stiff")
    model = model_from(gen, bs.terminal_library("terminal_value"))
    sol = bs.solve_bsde_lsmc(model, grid, noise)
    assert not sol.diagnostics["picard_converged"]


def test_lsmc_rejects_quadratic_class_and_mismatches():
    grid = pc.make_grid(1.0, 4)
    noise = brownian(grid, 1, 8, 0)
    qmodel = model_from(bs.generator_library("quadratic"),
                        bs.terminal_library("terminal_value"))
    with pytest.raises(ValueError):
        bs.solve_bsde_lsmc(qmodel, grid, noise)
    lmodel = model_from(bs.generator_library("zero"),
                        bs.terminal_library("terminal_value"))
    with pytest.raises(ValueError):
        bs.solve_bsde_lsmc(lmodel, pc.make_grid(2.0, 4), noise)


# ---------------------------------------------------------------- quadratic solver


def test_quadratic_constant_terminal():
    grid = pc.make_grid(1.0, 8)
    noise = brownian(grid, 1, 16384, 11)
    sol = bs.solve_quadratic_exponential(lambda v: np.full(v.shape[0], 0.7),
                                         grid, noise)
    assert np.max(np.abs(sol.Y.values - 0.7)) < 1e-9
    assert np.abs(sol.Z).mean() < 0.15


def test_quadratic_brownian_terminal_closed_form():
    # Y_t = W_t + (T - t)/2 via the Gaussian moment generating function
    T, K = 1.0, 16
    grid = pc.make_grid(T, K)
    noise = brownian(grid, 1, 8192, 31)
    sol = bs.solve_quadratic_exponential(lambda v: v[:, -1, 0], grid, noise)
    truth = noise.values[:, :, 0] + 0.5 * (T - grid.times)[None, :]
    np.testing.assert_array_equal(sol.Y.values[:, -1, 0], noise.values[:, -1, 0])
    assert np.sqrt(np.mean((sol.Y.values[:, :, 0] - truth) ** 2)) < 0.05
    assert abs(sol.Y.values[:, 0, 0].mean() - T / 2) < 0.02
    assert abs(np.median(sol.Z[:, :, 0, 0]) - 1.0) < 0.15


def test_quadratic_running_max_vs_nested_mc():
    grid = pc.make_grid(1.0, 16)
    noise = brownian(grid, 1, 8192, 41)
    term = bs.terminal_library("running_max")
    sol = bs.solve_quadratic_exponential(term.fn, grid, noise)
    fresh = brownian(grid, 1, 8192, 42)
    eF = np.exp(term.fn(fresh.values))
    oracle = math.log(eF.mean())
    se_oracle = eF.std(ddof=1) / (eF.mean() * math.sqrt(fresh.n))
    eF_in = np.exp(term.fn(noise.values))
    se_sol = eF_in.std(ddof=1) / (eF_in.mean() * math.sqrt(noise.n))
    joint = math.hypot(se_oracle, se_sol)
    assert abs(sol.Y.values[:, 0, 0].mean() - oracle) < 3 * joint


def test_quadratic_cap_reported_with_sensitivity():
    grid = pc.make_grid(1.0, 8)
    noise = brownian(grid, 1, 2048, 7)
    sol = bs.solve_quadratic_exponential(lambda v: v[:, -1, 0], grid, noise,
                                         cap=10.0)
    assert sol.diagnostics["cap"] == 10.0
    assert sol.diagnostics["cap_sensitivity"] >= 0.0
    # a cap far into the tail barely moves Y_0
    assert sol.diagnostics["cap_sensitivity"] < 0.05


def test_quadratic_aborts_on_nonpositive_conditional_mean():
    grid = pc.make_grid(1.0, 8)
    noise = brownian(grid, 1, 64, 2)
    with pytest.raises(RuntimeError, match="cannot take log"):
        bs.solve_quadratic_exponential(lambda v: 30.0 * v[:, -1, 0], grid, noise)


def test_lsmc_truncated_quadratic_agrees_with_exponential_solver():
    # truncation radius above the Z bound leaves the dynamics untouched
    T, K = 1.0, 20
    grid = pc.make_grid(T, K)
    noise = brownian(grid, 1, 8192, 57)
    gen = bs.generator_library("quadratic_truncated", radius=2.0)
    model = model_from(gen, bs.terminal_library("terminal_value"))
    lsmc = bs.solve_bsde_lsmc(model, grid, noise)
    qexp = bs.solve_quadratic_exponential(lambda v: v[:, -1, 0], grid, noise)
    assert abs(lsmc.y0[0] - qexp.Y.values[:, 0, 0].mean()) < 0.05


# ---------------------------------------------------------------- conjugate


def test_conjugate_of_half_square():
    g = lambda z: 0.5 * float(np.sum(np.asarray(z) ** 2))
    assert bs.convex_conjugate(g, np.array([1.0])) == pytest.approx(0.5, abs=1e-5)
    assert bs.convex_conjugate(g, np.array([0.7, -0.3])) == pytest.approx(
        0.5 * 0.58, abs=1e-5
    )


def test_conjugate_of_full_square():
    g = lambda z: float(np.sum(np.asarray(z) ** 2))
    for q in ([0.5], [1.0], [-2.0]):
        qv = np.array(q)
        assert bs.convex_conjugate(g, qv) == pytest.approx(
            float(qv @ qv) / 4.0, abs=1e-5
        )


def test_conjugate_flags_linear_generator():
    g = lambda z: 2.0 * float(np.asarray(z).reshape(-1)[0])
    with pytest.warns(UserWarning, match="superlinear"):
        out = bs.convex_conjugate(g, np.array([1.0]), max_radius=64.0)
    assert out == math.inf


# ---------------------------------------------------------------- dual bound


def quadratic_model():
    return model_from(bs.generator_library("quadratic"),
                      bs.terminal_library("terminal_value"))


def const_tilt(c, d=1):
    vec = np.full(d, float(c))
    return pc.GirsanovTilt(q=lambda t: vec, bound=abs(c) * math.sqrt(d) + 1e-12,
                           kind="deterministic", label=f"const:{c}")


def test_dual_bound_zero_tilt_is_mean_terminal():
    grid = pc.make_grid(1.0, 20)
    est = bs.dual_lower_bound(quadratic_model(), const_tilt(0.0), grid,
                              n_mc=4096, seed=1)
    assert abs(est.value) < 3 * est.se + 1e-12


def test_dual_bound_optimal_tilt_attains_y0():
    T = 1.0
    grid = pc.make_grid(T, 20)
    est = bs.dual_lower_bound(quadratic_model(), const_tilt(1.0), grid,
                              n_mc=8192, seed=2)
    assert est.value == pytest.approx(T / 2, abs=3 * est.se + 1e-9)


def test_dual_bounds_never_beat_primal():
    T = 1.0
    grid = pc.make_grid(T, 20)
    noise = brownian(grid, 1, 8192, 3)
    qexp = bs.solve_quadratic_exponential(lambda v: v[:, -1, 0], grid, noise)
    y0 = float(qexp.Y.values[:, 0, 0].mean())
    for c in (-1.0, 0.3, 1.0, 1.5):
        est = bs.dual_lower_bound(quadratic_model(), const_tilt(c), grid,
                                  n_mc=4096, seed=10 + int(10 * c))
        assert est.value <= y0 + 3 * est.se + 0.02


def test_dual_bound_numeric_conjugate_matches_analytic():
    grid = pc.make_grid(1.0, 10)
    gen = bs.generator_library("quadratic")
    term = bs.terminal_library("terminal_value")
    with_gstar = model_from(gen, term)
    without = bs.BsdeModel(
        generator=gen.fn, terminal=term.fn, m=1, d=1, cls="quadratic_convex",
        L_g=0.0, L_F=1.0, growth_C=0.5, gstar=None,
    )
    a = bs.dual_lower_bound(with_gstar, const_tilt(0.8), grid, n_mc=1024, seed=5)
    b = bs.dual_lower_bound(without, const_tilt(0.8), grid, n_mc=1024, seed=5)
    assert a.value == pytest.approx(b.value, abs=2e-3)


def test_dual_bound_preconditions():
    grid = pc.make_grid(1.0, 10)
    lmodel = model_from(bs.generator_library("zero"),
                        bs.terminal_library("terminal_value"))
    with pytest.raises(ValueError):
        bs.dual_lower_bound(lmodel, const_tilt(0.5), grid)
    gen = bs.generator_library("quadratic")
    term = bs.terminal_library("terminal_value")
    no_gstar = bs.BsdeModel(
        generator=gen.fn, terminal=term.fn, m=1, d=1, cls="quadratic_convex",
        L_g=0.0, L_F=1.0, growth_C=0.5, gstar=None,
    )
    adapted = pc.GirsanovTilt(
        q=lambda t, values: 0.1 * np.tanh(values[:, -1, :]),
        bound=0.2, kind="adapted", label="adapted",
    )
    with pytest.raises(ValueError, match="gstar"):
        bs.dual_lower_bound(no_gstar, adapted, grid)


# ---------------------------------------------------------------- constants


def test_constants_conditional_expectation_case():
    model = model_from(bs.generator_library("zero"),
                       bs.terminal_library("terminal_value"))
    cons = bs.bsde_constants(model, T=1.0)
    assert cons.C_y_multi == 2.0
    assert cons.L_Y == 1.0
    assert cons.lsi == 2.0
    assert cons.z_bound == pytest.approx(math.e, rel=1e-12)
    assert cons.C_z_quartic == pytest.approx(
        2.0 * (1.0 + math.e**4) ** 0.25, rel=1e-12
    )
    assert cons.Lambda == pytest.approx(math.sqrt(2.0), rel=1e-12)


def test_constants_unit_lipschitz_substitution():
    gen = bs.GeneratorSpec(fn=lambda t, paths, y, z: y, cls="lipschitz",
                           L_g=1.0, label="y")
    model = model_from(gen, bs.terminal_library("terminal_value"))
    cons = bs.bsde_constants(model, T=1.0)
    assert cons.C_y_multi == pytest.approx(8.0 * math.e**2, rel=1e-12)
    assert cons.Lambda == pytest.approx(2.0, rel=1e-12)


def test_constants_linear_class():
    gen = bs.generator_library("linear", alpha=0.3, beta=0.5, gamma=0.25,
                               L_alpha=2.0)
    model = model_from(gen, bs.terminal_library("terminal_value"))
    cons = bs.bsde_constants(model, T=1.0)
    assert cons.C_z_linear == pytest.approx(2.0 * 9.0 * math.exp(4.0), rel=1e-12)
    assert cons.C_yz == cons.C_z_linear
    assert cons.C_yz >= cons.C_y_multi


def test_constants_quadratic_class_and_errors():
    model = quadratic_model()
    cons = bs.bsde_constants(model, T=2.0)
    assert cons.C_y_1d == 2.0
    assert cons.C_y == 2.0
    assert cons.L_Y == 1.0
    assert cons.lsi == 4.0
    assert cons.C_y_multi is None and cons.z_bound is None
    with pytest.raises(ValueError):
        bs.bsde_constants(model, T=0.0)
    gen = bs.generator_library("linear", gamma=0.5)
    broken = bs.BsdeModel(
        generator=gen.fn, terminal=bs.terminal_library("terminal_value").fn,
        m=1, d=1, cls="linear", L_g=0.5, L_F=1.0, linear_L_G=None,
    )
    with pytest.raises(ValueError, match="linear_L_G"):
        bs.bsde_constants(broken, T=1.0)


def test_truncated_growth_constants_require_rho_q():
    with pytest.warns(UserWarning, match="rho_q"):
        out = bs.truncated_growth_constants(
            L_F=1.0, L_g=0.0, m=1, d=1, T=0.1, rho_q=0.5, phi_lambda=1.0
        )
    assert out["small_T_ok"] is True
    assert out["C_y"] > 0 and out["C_z"] > 0
    assert out["Lambda"] == pytest.approx(math.sqrt(2.0), rel=1e-12)


def test_bsde_constants_json_roundtrip():
    import json

    cons = bs.bsde_constants(quadratic_model(), T=1.0)
    parsed = json.loads(cons.to_json())
    assert parsed["C_y"] == 2.0
    assert parsed["C_y_multi"] is None


# ---------------------------------------------------------------- z bound


def test_z_bound_holds_for_brownian_terminal():
    grid = pc.make_grid(1.0, 20)
    noise = brownian(grid, 1, 8192, 19)
    model = model_from(bs.generator_library("zero"),
                       bs.terminal_library("terminal_value"))
    sol = bs.solve_bsde_lsmc(model, grid, noise)
    report = bs.z_bound_check(sol, model)
    assert report["passed"]
    assert report["max_z_sq"] <= math.e * 1.05
    corrupted = bs.BsdeSolution(Y=sol.Y, Z=sol.Z * 10.0,
                                diagnostics=sol.diagnostics)
    assert not bs.z_bound_check(corrupted, model)["passed"]


def test_z_bound_constant_terminal_near_zero():
    grid = pc.make_grid(1.0, 10)
    noise = brownian(grid, 1, 4096, 20)
    model = model_from(bs.generator_library("zero"),
                       bs.terminal_library("constant", value=2.0))
    sol = bs.solve_bsde_lsmc(model, grid, noise)
    report = bs.z_bound_check(sol, model)
    assert report["passed"]
    with pytest.raises(ValueError):
        bs.z_bound_check(sol, quadratic_model())


# ---------------------------------------------------------------- lipschitz probe


def ramp_shift(grid, rate, d=1):
    return pc.CameronMartinShift(hdot=lambda t: np.full(d, rate), grid=grid, d=d)


def test_probe_identity_process():
    grid = pc.make_grid(1.0, 16)
    noise = brownian(grid, 1, 32, 7)
    ratio = bs.pathwise_lipschitz_probe(lambda b: b, [ramp_shift(grid, 0.5)],
                                        noise)
    assert ratio == pytest.approx(1.0, rel=1e-12)


def test_probe_conditional_expectation_bounded_by_LF():
    grid = pc.make_grid(1.0, 20)
    noise = brownian(grid, 1, 2048, 13)
    model = model_from(bs.generator_library("zero"),
                       bs.terminal_library("terminal_value"))

    def process(bundle):
        return bs.solve_bsde_lsmc(model, grid, bundle).Y

    bumps = [ramp_shift(grid, 0.5), ramp_shift(grid, -0.25)]
    ratio = bs.pathwise_lipschitz_probe(process, bumps, noise)
    assert ratio <= model.L_F * 1.05


def test_probe_linear_generator_bounded_by_paper_constant():
    T, gamma = 1.0, 0.4
    grid = pc.make_grid(T, 20)
    noise = brownian(grid, 1, 2048, 15)
    gen = bs.generator_library("linear", gamma=gamma)
    model = model_from(gen, bs.terminal_library("terminal_value"))

    def process(bundle):
        return bs.solve_bsde_lsmc(model, grid, bundle).Y

    bumps = [ramp_shift(grid, 0.5), ramp_shift(grid, -0.3)]
    ratio = bs.pathwise_lipschitz_probe(process, bumps, noise)
    limit = (model.L_F + T * model.L_g) * math.exp(T * model.L_g)
    assert ratio <= limit * 1.05


def test_probe_skips_zero_bumps():
    grid = pc.make_grid(1.0, 8)
    noise = brownian(grid, 1, 8, 0)
    zero = np.zeros((grid.steps + 1, 1))
    with pytest.warns(UserWarning, match="zero-norm"):
        ratio = bs.pathwise_lipschitz_probe(
            lambda b: b, [zero, ramp_shift(grid, 0.5)], noise
        )
    assert ratio == pytest.approx(1.0, rel=1e-12)
    with pytest.raises(ValueError):
        with pytest.warns(UserWarning, match="zero-norm"):
            bs.pathwise_lipschitz_probe(lambda b: b, [zero], noise)


# ---------------------------------------------------------------- libraries


def test_utility_zero_set_is_scaled_square():
    alpha = 1.7
    gen = bs.generator_library("utility", alpha=alpha, theta=[0.4, -0.2],
                               constraint="zero")
    rng = np.random.default_rng(0)
    z = rng.normal(size=(5, 1, 2))
    out = gen.fn(0.3, None, np.zeros((5, 1)), z)
    expected = (alpha / 2.0) * (z**2).sum(axis=-1)
    assert np.max(np.abs(out - expected)) < 1e-12
    assert gen.cls == "quadratic_convex"
    assert gen.gstar(0.0, np.array([[1.0, 0.0]]))[0] == pytest.approx(
        1.0 / (2 * alpha)
    )


def test_utility_full_space_is_linear():
    alpha, theta = 2.0, np.array([0.5])
    gen = bs.generator_library("utility", alpha=alpha, theta=theta,
                               constraint="full")
    assert gen.cls == "linear"
    z = np.array([[[1.5]]])
    out = gen.fn(0.0, None, np.zeros((1, 1)), z)
    expected = -1.5 * 0.5 - 0.25 / (2 * alpha)
    assert out[0, 0] == pytest.approx(expected, rel=1e-12)


def test_utility_box_and_halfspace_projections():
    alpha = 1.0
    box = bs.generator_library("utility", alpha=alpha, theta=[0.0],
                               constraint="box", lo=-1.0, hi=1.0)
    z_in = np.array([[[0.5]]])  # inside the box: distance 0
    assert box.fn(0.0, None, np.zeros((1, 1)), z_in)[0, 0] == pytest.approx(0.0)
    z_out = np.array([[[2.0]]])
    assert box.fn(0.0, None, np.zeros((1, 1)), z_out)[0, 0] == pytest.approx(
        0.5 * (2.0 - 1.0) ** 2
    )
    half = bs.generator_library("utility", alpha=alpha, theta=[0.0, 0.0],
                                constraint="halfspace", normal=[1.0, 0.0],
                                offset=0.0)
    z = np.array([[[0.8, 0.3]]])
    assert half.fn(0.0, None, np.zeros((1, 1)), z)[0, 0] == pytest.approx(
        0.5 * 0.8**2
    )
    z_neg = np.array([[[-0.8, 0.3]]])
    assert half.fn(0.0, None, np.zeros((1, 1)), z_neg)[0, 0] == pytest.approx(0.0)


def test_utility_lower_bound_data():
    alpha = 1.3
    theta = np.array([0.6, -0.1])
    gen = bs.generator_library("utility", alpha=alpha, theta=theta,
                               constraint="zero")
    a = gen.lower_bound_a(0.2)
    np.testing.assert_allclose(a, -theta)
    tmax = float(np.linalg.norm(theta))
    assert gen.lower_bound_b == pytest.approx(-(tmax**2) / (2 * alpha))
    # the lower bound really holds: g(z) >= a.z + b on random probes
    rng = np.random.default_rng(1)
    z = rng.normal(size=(50, 1, 2), scale=2.0)
    g = gen.fn(0.2, None, np.zeros((50, 1)), z)
    low = np.einsum("nmd,d->nm", z, a) + gen.lower_bound_b
    assert np.all(g >= low - 1e-12)


def test_utility_validation_errors():
    with pytest.raises(ValueError, match="alpha"):
        bs.generator_library("utility", alpha=0.0, theta=[0.1])
    with pytest.raises(ValueError, match="constraint"):
        bs.generator_library("utility", alpha=1.0, theta=[0.1],
                             constraint="simplex")
    with pytest.raises(ValueError, match="box"):
        bs.generator_library("utility", alpha=1.0, theta=[0.1],
                             constraint="box")
    with pytest.raises(KeyError):
        bs.generator_library("nope")


def test_linear_generator_degenerate_is_zero():
    gen = bs.generator_library("linear")
    z = np.random.default_rng(0).normal(size=(4, 1, 1))
    out = gen.fn(0.1, None, np.ones((4, 1)), z)
    assert np.all(out == 0.0)
    assert gen.cls == "linear" and gen.L_g == 0.0


def test_terminal_library_values():
    values = np.zeros((2, 4, 1))
    values[0, :, 0] = [0.0, 1.0, -2.0, 0.5]
    values[1, :, 0] = [0.0, 3.0, 1.0, 2.0]
    assert np.allclose(
        bs.terminal_library("terminal_value", scale=2.0).fn(values), [1.0, 4.0]
    )
    assert np.allclose(bs.terminal_library("running_max").fn(values), [1.0, 3.0])
    assert np.allclose(
        bs.terminal_library("clipped_terminal", lo=-1, hi=1).fn(values),
        [0.5, 1.0],
    )
    assert np.allclose(bs.terminal_library("constant", value=3.0).fn(values),
                       [3.0, 3.0])
    with pytest.raises(KeyError):
        bs.terminal_library("nope")


# ---------------------------------------------------------------- export


def test_solution_export_roundtrip():
    grid = pc.make_grid(1.0, 8)
    noise = brownian(grid, 1, 16, 3)
    model = model_from(bs.generator_library("zero"),
                       bs.terminal_library("terminal_value"))
    sol = bs.solve_bsde_lsmc(model, grid, noise)
    yb, zb = io.BytesIO(), io.BytesIO()
    bs.export_solution(sol, yb, zb)
    yb.seek(0), zb.seek(0)
    y_loaded = pc.load_bundle(yb)
    z_loaded = pc.load_bundle(zb)
    np.testing.assert_array_equal(y_loaded.values, sol.Y.values)
    np.testing.assert_array_equal(
        z_loaded.values, sol.Z.reshape(noise.n, grid.steps, 1)
    )
    assert z_loaded.grid.T == pytest.approx(grid.T - grid.dt)
