import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evsched import core, datagen


def write_sessions(path, rows):
    lines = [",".join(core.SESSION_HEADER)] + rows
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


class TestLoadSessions:
    def test_field_mapping(self, tmp_path):
        p = tmp_path / "s.csv"
        write_sessions(p, ["s1,8.5,17.0,20.0,1,16.0,18.0"])
        ss = core.load_sessions(p, T=144)
        s = ss.sessions[0]
        assert s.id == "s1"
        assert s.arrival == 8.5 and s.departure == 17.0
        assert s.energy_kwh == 20.0 and s.charger == 1
        assert s.user_departure == 16.0 and s.user_energy_kwh == 18.0

    def test_overlap_rejected_with_both_ids(self, tmp_path):
        p = tmp_path / "s.csv"
        write_sessions(p, ["a,1.0,10.0,5.0,1,10.0,5.0",
                           "b,9.0,12.0,5.0,1,12.0,5.0"])
        with pytest.raises(core.SessionFileError) as exc:
            core.load_sessions(p, T=144)
        assert "a" in str(exc.value) and "b" in str(exc.value)

    def test_malformed_row_reports_line(self, tmp_path):
        p = tmp_path / "s.csv"
        write_sessions(p, ["a,1.0,10.0,notanumber,1,10.0,5.0"])
        with pytest.raises(core.SessionFileError) as exc:
            core.load_sessions(p, T=144)
        assert ":2:" in str(exc.value)

    def test_negative_demand_rejected(self, tmp_path):
        p = tmp_path / "s.csv"
        write_sessions(p, ["a,1.0,10.0,-5.0,1,10.0,5.0"])
        with pytest.raises(core.SessionFileError):
            core.load_sessions(p, T=144)

    def test_header_checked(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("id,arrival\n", encoding="utf-8")
        with pytest.raises(core.SessionFileError):
            core.load_sessions(p, T=144)

    def test_generator_fixture_counts_match_log(self, tmp_path):
        # The generator's log is the oracle for how many sessions land.
        rng = core.rng_stream(5, "fixture")
        sessions, log = datagen.generate_sessions("pre", 30, m=8, T=144, rng=rng)
        assert log.requested == 30
        assert log.placed + log.omitted == 30
        assert len(sessions) == log.placed
        p = tmp_path / "f.csv"
        core.save_sessions(p, sessions)
        assert len(core.load_sessions(p, T=144)) == log.placed

    def test_load_is_deterministic(self, tmp_path):
        rng = core.rng_stream(6, "fixture")
        sessions, _ = datagen.generate_sessions("post", 12, m=2, T=144, rng=rng)
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        core.save_sessions(p1, sessions)
        core.save_sessions(p2, core.load_sessions(p1, T=144))
        assert p1.read_bytes() == p2.read_bytes()


class TestAssembleDynamics:
    def test_charging_efficiency_block(self):
        # Experiment parameters: 10-minute steps and 0.8 charging efficiency.
        spec = core.DynamicsSpec(m=2, T=4, delta_hours=1 / 6, mu_eff=0.8,
                                 beta_ctrl=0.2)
        A, _ = core.assemble_dynamics(spec, 0)
        expect = -(1 / 6) * 0.8 * np.eye(2)
        np.testing.assert_allclose(A[:2, 2:], expect, rtol=0, atol=1e-15)
        np.testing.assert_array_equal(A[:2, :2], np.eye(2))
        np.testing.assert_array_equal(A[2:, 2:], np.eye(2))
        np.testing.assert_array_equal(A[2:, :2], np.zeros((2, 2)))

    def test_control_efficiency_block(self):
        spec = core.DynamicsSpec(m=2, T=4, delta_hours=1 / 6, mu_eff=0.8,
                                 beta_ctrl=0.2)
        _, B = core.assemble_dynamics(spec, 0)
        np.testing.assert_array_equal(B[2:, :], 0.2 * np.eye(2))
        np.testing.assert_array_equal(B[:2, :], np.zeros((2, 2)))

    def test_zero_coupling(self):
        spec = core.DynamicsSpec(m=3, T=2, delta_hours=0.5, mu_eff=0.0,
                                 beta_ctrl=1.0)
        A, _ = core.assemble_dynamics(spec, 1)
        np.testing.assert_array_equal(A, np.eye(6))

    def test_step_out_of_range(self):
        spec = core.DynamicsSpec(m=1, T=3, delta_hours=0.5, mu_eff=0.5,
                                 beta_ctrl=0.5)
        with pytest.raises(IndexError):
            core.assemble_dynamics(spec, 3)

    @given(delta=st.floats(0.01, 2.0), mu=st.floats(0.0, 1.0),
           beta=st.floats(0.0, 1.0), m=st.integers(1, 4))
    @settings(max_examples=60, deadline=None)
    def test_norm_bounds(self, delta, mu, beta, m):
        spec = core.DynamicsSpec(m=m, T=1, delta_hours=delta, mu_eff=mu,
                                 beta_ctrl=beta)
        A, B = core.assemble_dynamics(spec, 0)
        assert np.linalg.norm(A, 2) <= 1.0 + delta * mu + 1e-9
        assert abs(np.linalg.norm(B, 2) - beta) <= 1e-12


class TestCostSpec:
    def test_non_pd_rejected(self):
        bad = np.eye(4)
        bad[0, 0] = 0.0
        with pytest.raises(core.SpecError):
            core.CostSpec(T=2, q=bad, r_cost=np.eye(2), p_term=np.eye(4))

    def test_indefinite_terminal_rejected(self):
        with pytest.raises(core.SpecError):
            core.CostSpec(T=2, q=np.eye(4), r_cost=np.eye(2),
                          p_term=-np.eye(4))

    def test_eigen_envelope(self):
        spec = core.CostSpec(T=3, q=2.0 * np.eye(4), r_cost=0.1 * np.eye(2),
                             p_term=np.eye(4))
        assert spec.mu_lb == pytest.approx(0.1)
        assert spec.xi_ub == pytest.approx(2.0)

    def test_stage_cost_value(self):
        spec = core.uniform_cost(T=2, m=2, alpha_cost=0.1)
        c = spec.stage_cost(0, np.array([10.0, 5.0, 6.0, 2.0]),
                            np.array([1.0, -1.0]))
        assert c == pytest.approx(0.5 * (100 + 25 + 36 + 4 + 0.1 * 2))


class TestSpaceSpec:
    def test_box_membership(self):
        sp = core.default_box_space(2)
        assert sp.contains_state([0, 0, 6.6, -6.6])
        assert not sp.contains_state([0, 0, 6.7, 0])
        assert sp.contains_action([2.0, -2.0])
        assert not sp.contains_action([2.1, 0.0])

    def test_simplex_membership(self):
        sp = core.SpaceSpec(m=2, mode=core.NONNEG_SIMPLEX, line_limit=8.0,
                            per_charger_limit=6.0)
        assert sp.contains_state([1.0, 0.0, 4.0, 4.0])
        assert not sp.contains_state([1.0, 0.0, 5.0, 4.0])
        assert not sp.contains_state([-1.0, 0.0, 1.0, 1.0])

    def test_bad_mode(self):
        with pytest.raises(core.SpecError):
            core.SpaceSpec(m=1, mode="weird")


class TestExperimentConfig:
    def test_shift_after_end_rejected(self):
        with pytest.raises(core.SpecError):
            core.ExperimentConfig(episodes=10, shift_episode=11)

    def test_beta_parse(self):
        assert core.parse_beta("inf") == float("inf")
        assert core.parse_beta("0.1") == 0.1
        assert core.format_beta(float("inf")) == "inf"
        assert core.format_beta(10.0) == "10"

    def test_hash_stable(self):
        a = core.ExperimentConfig()
        b = core.ExperimentConfig()
        assert a.config_hash() == b.config_hash()
        c = core.ExperimentConfig(episodes=99, shift_episode=50)
        assert c.config_hash() != a.config_hash()


class TestRngStreams:
    def test_reproducible_and_distinct(self):
        a = core.rng_stream(1, "env", 0).normal(size=4)
        b = core.rng_stream(1, "env", 0).normal(size=4)
        c = core.rng_stream(1, "env", 1).normal(size=4)
        d = core.rng_stream(2, "env", 0).normal(size=4)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
        assert not np.array_equal(a, d)
