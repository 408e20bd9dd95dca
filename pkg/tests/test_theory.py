import numpy as np
import pytest

from flashback import model as mdl
from flashback import theory as th
from flashback.losses import LossContext, build_objective


def objective_value(case, theta):
    params = mdl.unflatten(theta, case.params)
    ctx = LossContext(params, flat=True)
    node, _ = build_objective(ctx, case.category, case.batch, case.S, case.P, case.alpha_s, case.alpha_p, case.tau)
    return ctx.value_and_grad(node)[0]


@pytest.fixture(scope="module")
def suite():
    return th.run_suite(n_cases=20, seed=0)


class TestSuite:
    def test_all_default_checks_pass(self, suite):
        failed = [r.line() for r in suite if not r.passed]
        assert not failed, "\n".join(failed)

    def test_covers_every_identity(self, suite):
        names = {r.name for r in suite}
        for cat in ("distill", "replay", "reg"):
            assert f"decomposition.{cat}" in names
        for tau in ("1", "2", "5"):
            assert f"decomposition.dyn.tau{tau}" in names
        for k in (1, 5, 25):
            assert f"recursion.fl.k{k}" in names and f"recursion.cl.k{k}" in names
        assert {"fixedpoint.fl.k500", "cosine_equivalence"} <= names

    def test_tight_tolerance_fails_without_raising(self):
        results = th.run_suite(["distill"], n_cases=5, tolerances={"all": 1e-15})
        assert any(not r.passed for r in results)
        assert all("FAIL" in r.line() or "PASS" in r.line() for r in results)

    def test_category_filter(self):
        names = [r.name for r in th.run_suite(["reg"], n_cases=3)]
        assert names and all(n.startswith(("decomposition.reg", "recursion.", "fixedpoint.")) for n in names)

    def test_report_has_one_line_per_check(self, suite):
        assert len(th.format_report(suite).splitlines()) == len(suite)


class TestClosedForms:
    @pytest.mark.parametrize("category,tau", [("distill", 2.0), ("replay", 2.0), ("reg", 2.0),
                                              ("dyn", 1.0), ("dyn", 5.0)])
    def test_closed_form_matches_finite_differences(self, category, tau):
        # an oracle independent of the tape: central differences of the objective
        case = th.random_case(category, np.random.default_rng(11), tau=tau)
        theta = mdl.flatten(case.params)
        h = 1e-6
        fd = np.empty_like(theta)
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = h
            fd[i] = (objective_value(case, theta + e) - objective_value(case, theta - e)) / (2 * h)
        np.testing.assert_allclose(th.closed_form_gradient(case), fd, rtol=1e-5, atol=1e-7)

    @pytest.mark.parametrize("category", ["distill", "replay", "reg", "dyn"])
    def test_zero_plastic_weight_reduces_to_cl(self, category):
        rng = np.random.default_rng(3)
        for _ in range(5):
            case = th.random_case(category, rng)
            assert th.check_decomposition(case, alpha_p=0.0) <= 1e-10

    def test_interpolation_target(self):
        np.testing.assert_allclose(th.interpolation_target(1.0, [0.0, 2.0], 3.0, [4.0, 2.0]), [3.0, 2.0])

    def test_reg_is_exact(self):
        rng = np.random.default_rng(8)
        worst = max(th.check_decomposition(th.random_case("reg", rng)) for _ in range(20))
        assert worst <= 1e-12


class TestRecursion:
    @pytest.mark.parametrize("task", ["quadratic", "sequence", "zero"])
    @pytest.mark.parametrize("k", [1, 5, 25])
    def test_unrolled_matches_iterated(self, task, k):
        case = th.random_recursion_case(np.random.default_rng(k), task=task)
        assert th.check_sgd_recursion(case, k) <= 1e-8

    def test_one_step_by_hand(self):
        case = th.random_recursion_case(np.random.default_rng(0), n=3, task="sequence")
        theta, grads = th.iterate_sgd(case, 1)
        reg = case.alpha_s * case.F_s @ (case.theta0 - case.theta_s) + case.alpha_p * case.F_p @ (case.theta0 - case.theta_p)
        np.testing.assert_allclose(theta, case.theta0 - case.eta * (grads[0] + reg), atol=1e-13)

    def test_fixed_point_is_the_linear_solve(self):
        case = th.random_recursion_case(np.random.default_rng(5), task="zero")
        assert th.check_fixed_point(case, 500) <= 1e-6
        A = case.alpha_s * case.F_s + case.alpha_p * case.F_p
        b = case.alpha_s * case.F_s @ case.theta_s + case.alpha_p * case.F_p @ case.theta_p
        np.testing.assert_allclose(th.fixed_point(case), np.linalg.solve(A, b), atol=1e-10)

    def test_cl_fixed_point_is_stable_model(self):
        case = th.random_recursion_case(np.random.default_rng(6), task="zero", fl=False)
        theta, _ = th.iterate_sgd(case, 500)
        np.testing.assert_allclose(theta, case.theta_s, atol=1e-6)


class TestStationarity:
    @pytest.mark.parametrize("category", ["distill", "replay"])
    def test_target_is_stationary_and_stable_is_not(self, category):
        probe = th.stationarity_probe(category, np.random.default_rng(2))
        assert probe.grad_at_target <= 1e-10
        assert probe.grad_at_stable > 1e-3
        assert probe.monotone

    def test_other_categories_rejected(self):
        with pytest.raises(ValueError):
            th.stationarity_probe("reg", np.random.default_rng(0))
