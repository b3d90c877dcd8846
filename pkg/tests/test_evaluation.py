import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oilad import iforest
from oilad.data import gen_detours, gen_normal
from oilad.evaluation import (ConfusionCounts, Detector, EvalReport, Experiment, OBJECTIVES,
                              ablation_csv, ablation_run, bootstrap_mean_difference, confusion,
                              evaluate_verdicts, fit_boundary, metrics, remark_values,
                              rows_csv, theorem1_check, trajectory_verdict, value_correlation,
                              window_sweep)
from oilad.features import WindowConfig
from oilad.mdp import greedy_rollout, parse_grid, value_iteration
from oilad.policy import PolicyConfig, TransformerPolicy
from oilad.training import TrainConfig
from oilad.trajectory import POLICY_ANOMALY, Dataset, Trajectory


class TestMetrics:
    def test_worked_example(self):
        m = metrics(ConfusionCounts(tp=8, fp=2, tn=100, fn=2))
        assert (m.precision, m.recall) == (0.8, 0.8)
        assert m.f1 == pytest.approx(0.8, abs=1e-15)
        assert not m.degenerate

    def test_no_predictions_is_degenerate(self):
        m = metrics(ConfusionCounts(tp=0, fp=0, tn=5, fn=3))
        assert m.f1 == 0.0 and m.degenerate

    @settings(max_examples=100)
    @given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
    def test_f1_is_harmonic_mean(self, tp, fp, tn, fn):
        m = metrics(ConfusionCounts(tp, fp, tn, fn))
        assert 0 <= m.f1 <= 1
        if tp:
            assert m.f1 == pytest.approx(2 * tp / (2 * tp + fp + fn))
        else:
            assert m.f1 == 0.0

    def test_confusion(self):
        c = confusion([True, True, False, False], [True, False, True, False])
        assert c == ConfusionCounts(1, 1, 1, 1)
        assert (c + c).total == 8
        with pytest.raises(ValueError):
            confusion([True], [True, False])
        with pytest.raises(ValueError):
            ConfusionCounts(-1, 0, 0, 0)


class TestVerdict:
    def test_any_window(self):
        assert trajectory_verdict([False, True, False])
        assert not trajectory_verdict([False, False])

    def test_fraction(self):
        flags = [True] + [False] * 9
        assert trajectory_verdict(flags, "fraction", 0.1)
        assert not trajectory_verdict(flags, "fraction", 0.2)

    def test_errors(self):
        with pytest.raises(ValueError):
            trajectory_verdict([])
        with pytest.raises(ValueError):
            trajectory_verdict([True], "majority")


class TestMonotonicityCondition:
    @pytest.mark.parametrize("gamma", [0.5, 0.9, 0.99])
    def test_constant_negative_rewards(self, gamma):
        assert all(theorem1_check([-1.0] * 12, gamma))

    def test_length(self):
        assert len(theorem1_check([-1.0] * 5, 0.9)) == 4
        assert theorem1_check([-1.0], 0.9) == []

    def test_detects_violation(self):
        # a large reward early followed by penalties breaks the condition
        assert theorem1_check([5.0, -1.0, -1.0], 0.9)[0] is False

    def test_terminal_bonus(self):
        assert all(theorem1_check([-1.0] * 8 + [10.0], 0.9))

    def test_gamma_range(self):
        with pytest.raises(ValueError):
            theorem1_check([-1.0, -1.0], 1.0)

    @pytest.mark.parametrize("gamma", [0.5, 0.9, 0.99])
    @pytest.mark.parametrize("bonus", [0.0, 10.0])
    def test_closed_form_matches_discounted_sum(self, gamma, bonus):
        T = 9
        rewards = [-1.0] * (T - 1) + [bonus if bonus > 0 else -1.0]
        expected = [sum(gamma ** k * r for k, r in enumerate(rewards[t:])) for t in range(T)]
        np.testing.assert_allclose(remark_values(T, gamma, -1.0, bonus), expected, atol=1e-12)

    def test_value_iteration_agrees_on_corridor(self):
        env = parse_grid(".......G10").compile()
        vt = value_iteration(env)
        t = greedy_rollout(env, vt, 0)
        np.testing.assert_allclose(vt.V[t.state_ids[:-1]],
                                   remark_values(len(t), 0.9, -1.0, 10.0), atol=1e-9)


class TestBootstrap:
    def test_clear_separation(self):
        rng = np.random.default_rng(0)
        diff, lo, hi = bootstrap_mean_difference(rng.normal(2, 1, 200), rng.normal(0, 1, 200))
        assert lo > 1.5 and hi < 2.5 and lo < diff < hi

    def test_seeded(self):
        a, b = np.arange(10.0), np.arange(10.0)[::-1] * 0.5
        assert bootstrap_mean_difference(a, b, seed=3) == bootstrap_mean_difference(a, b, seed=3)


@pytest.fixture(scope="module")
def small_setup(grid5):
    env, vt = grid5
    train = gen_normal(env, vt, 80, seed=0)
    normal = gen_normal(env, vt, 60, seed=1, prefix="test")
    detours = gen_detours(env, normal, 20, 2, 0.5, seed=2)
    model = TransformerPolicy(PolicyConfig(2, 5, embed_dim=16, dropout=0.0, max_seq_len=32))
    exp = Experiment(train, normal, {POLICY_ANOMALY: detours}, WindowConfig(3, 3), 0.01,
                     n_trees=20, test_size=40, anomaly_rate=0.1, resamples=3, seed=0)
    return env, vt, exp, model


class TestProtocol:
    def test_evaluate_verdicts_oracle(self):
        normal = Dataset(Trajectory(f"n{i}", [[0.0]], [0]) for i in range(30))
        anom = Dataset(Trajectory(f"a{i}", [[0.0]], [0], POLICY_ANOMALY) for i in range(10))
        verdicts = {t.id: t.is_anomaly for t in list(normal) + list(anom)}
        rep = evaluate_verdicts(verdicts, normal, {POLICY_ANOMALY: anom}, 20, 0.1, 4, seed=0)
        assert rep.classes[POLICY_ANOMALY].f1 == 1.0
        assert rep.seeds == [0, 1, 2, 3]
        assert rep.classes[POLICY_ANOMALY].counts.total == 80

    def test_flag_everything(self):
        normal = Dataset(Trajectory(f"n{i}", [[0.0]], [0]) for i in range(30))
        anom = Dataset(Trajectory(f"a{i}", [[0.0]], [0], POLICY_ANOMALY) for i in range(10))
        verdicts = {t.id: True for t in list(normal) + list(anom)}
        rep = evaluate_verdicts(verdicts, normal, {POLICY_ANOMALY: anom}, 20, 0.1, 2)
        c = rep.classes[POLICY_ANOMALY]
        assert (c.precision, c.recall) == (0.1, 1.0)

    def test_detector_and_report(self, small_setup):
        env, vt, exp, model = small_setup
        det = exp.detector(model)
        assert isinstance(det, Detector)
        flags = det.window_flags(exp.train_set[0])
        assert flags.dtype == bool
        rep = exp.report(model, config={"note": 1})
        d = rep.to_dict()
        assert d["config"] == {"note": 1} and POLICY_ANOMALY in d["classes"]
        assert "F1=" in rep.table_row()

    def test_boundary_refuses_anomalies(self, small_setup):
        _, _, exp, model = small_setup
        with pytest.raises(ValueError):
            fit_boundary(model, exp.anomaly_pools[POLICY_ANOMALY], exp.windows, 0.01)

    def test_ablation_and_sweep(self, small_setup):
        _, _, exp, model = small_setup
        reports = ablation_run(exp, model, TrainConfig(iterations=4, batch_size=8,
                                                       monotonic_batch_size=8))
        assert list(reports) == ["Obj1", "Obj2", "Obj1+2"]
        text = ablation_csv(reports)
        assert text.splitlines()[0] == "objective,policy_f1,perturbed_f1,average_f1"
        rows = window_sweep(exp, model, [2, 3], vary="w_q")
        assert [(r["w_q"], r["w_v"]) for r in rows] == [(2, 3), (3, 3)]
        assert rows_csv(rows).startswith("w_q,w_v,")
        with pytest.raises(ValueError):
            window_sweep(exp, model, [2], vary="w")

    def test_objective_arms(self):
        assert OBJECTIVES["Obj2"]["monotonic_start"] == 0
        assert not OBJECTIVES["Obj1"]["monotonic_objective"]

    def test_value_correlation_range(self, small_setup):
        env, vt, exp, model = small_setup
        pcc, scc = value_correlation(model, env, exp.normal_pool)
        assert -1 <= pcc <= 1 and -1 <= scc <= 1
        with pytest.raises(ValueError):
            value_correlation(model, env, [])
