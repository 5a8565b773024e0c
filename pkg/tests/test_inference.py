"""Tests for the posterior sampler, priors, likelihood, and predictors."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import zonetrace.emulator as em
import zonetrace.inference as inf
from zonetrace import seven_room
from zonetrace.errors import ConfigError, NoDetection
from zonetrace.netflow import SourceScenario

TV_TOL = 0.02
HAND_TOL = 1e-12
BACKEND_TOL = 1e-8


def _space(zone_ids=(1, 2, 4), n_max=3):
    return inf.StateSpace(net=seven_room(), zone_ids=zone_ids,
                          n_sources_max=n_max)


def _toy_obs(zones=(1, 2), base=0.02):
    records = []
    for k, z in enumerate(zones):
        for t in (20.0, 21.0, 22.0):
            records.append((z, t, base * (k + 1) * (t - 19.0), 1e-4))
    return inf.observations_from_records(records)


class TestDecode:
    def test_count_segments(self):
        space = _space()
        for r_s, expected in ((0.0, 1), (0.2, 1), (0.34, 2), (0.5, 2),
                              (0.67, 3), (0.99, 3), (1.0, 3)):
            phi = np.full(space.dim, 0.5)
            phi[0] = r_s
            assert space.decode(phi).a == expected

    def test_zone_segments_follow_candidate_list(self):
        space = _space(zone_ids=(1, 2, 4))
        for r_z, expected in ((0.0, 1), (0.4, 2), (0.7, 4), (1.0, 4)):
            phi = np.full(space.dim, 0.5)
            phi[1] = r_z
            assert space.decode(phi).b == expected

    def test_physical_mapping(self):
        space = _space()
        zone = space.net.zone(2)
        phi = np.full(space.dim, 0.5)
        phi[1] = 0.5           # second candidate zone
        phi[2], phi[3] = 0.25, 0.75
        phi[-2], phi[-1] = 0.0, 1.0
        cand = space.decode(phi)
        assert cand.b == 2
        x, y = cand.scenario.locations[0]
        assert abs(x - 0.25 * zone.width) < 1e-12
        assert abs(y - 0.75 * zone.depth) < 1e-12
        assert cand.scenario.rate == pytest.approx(0.03)
        assert cand.scenario.start_min == pytest.approx(25.0)

    def test_surplus_location_slots_are_inert(self):
        space = _space()
        phi = np.full(space.dim, 0.5)
        phi[0] = 0.0           # one active source
        other = phi.copy()
        other[4:8] = [0.9, 0.1, 0.2, 0.8]
        c1, c2 = space.decode(phi), space.decode(other)
        assert c1.scenario == c2.scenario
        assert np.array_equal(c1.theta, c2.theta)

    def test_theta_concatenates_active_slots(self):
        space = _space()
        phi = np.arange(space.dim) / space.dim
        cand = space.decode(phi)
        expected = np.concatenate([phi[2:2 + 2 * cand.a], phi[-2:]])
        assert np.array_equal(cand.theta, expected)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(min_value=0.0, max_value=1.0),
                    min_size=10, max_size=10))
    def test_unit_box_always_decodes_in_support(self, values):
        space = _space()
        cand = space.decode(np.array(values))
        zone = space.net.zone(cand.b)
        assert 1 <= cand.a <= 3
        assert cand.b in (1, 2, 4)
        for x, y in cand.scenario.locations:
            assert 0.0 <= x <= zone.width and 0.0 <= y <= zone.depth
        assert np.isfinite(space.log_prior(cand))


class TestPrior:
    def test_value_matches_hand_formula(self):
        space = _space()
        phi = np.full(space.dim, 0.5)
        cand = space.decode(phi)
        zone = space.net.zone(cand.b)
        area = zone.width * zone.depth
        expected = (-math.log(3) - cand.a * math.log(area * 3)
                    - math.log(0.12 * 20.0))
        assert space.log_prior(cand) == pytest.approx(expected, abs=HAND_TOL)

    def test_out_of_range_scenarios_get_minus_infinity(self):
        space = _space()
        base = space.decode(np.full(space.dim, 0.5))
        bad_rate = inf.Candidate(
            a=base.a, b=base.b, theta=base.theta,
            scenario=SourceScenario(
                count=base.a, zone=base.b, rate=0.5,
                start_min=base.scenario.start_min,
                locations=base.scenario.locations))
        assert space.log_prior(bad_rate) == -np.inf
        zone = space.net.zone(base.b)
        bad_loc = inf.Candidate(
            a=1, b=base.b, theta=base.theta,
            scenario=SourceScenario(
                count=1, zone=base.b, rate=0.1, start_min=10.0,
                locations=((zone.width + 0.5, 1.0),)))
        assert space.log_prior(bad_loc) == -np.inf

    def test_more_sources_cost_more_prior_mass(self):
        space = _space()
        one = np.full(space.dim, 0.5)
        one[0] = 0.0
        three = one.copy()
        three[0] = 1.0
        p1 = space.log_prior(space.decode(one))
        p3 = space.log_prior(space.decode(three))
        zone = space.net.zone(space.decode(one).b)
        gap = 2.0 * math.log(zone.width * zone.depth * 3)
        assert p1 - p3 == pytest.approx(gap, rel=1e-12)


class TestLikelihood:
    def test_single_observation_hand_formula(self):
        obs = inf.observations_from_records([(3, 12.0, 0.05, 0.002)])
        disc = inf.DiscrepancyConfig(sigma2_delta={3: 1e-6}, lam={3: 0.04})
        pred = {3: np.array([0.041])}
        var = 1e-6 + 0.002 ** 2
        expected = -0.5 * math.log(var) - 0.5 * (0.05 - 0.041) ** 2 / var
        got = inf.log_likelihood(obs, pred, disc)
        assert got == pytest.approx(expected, abs=HAND_TOL)

    def test_perfect_prediction_maximizes(self):
        obs = _toy_obs()
        disc = inf.DiscrepancyConfig.from_observations(obs)
        like = inf.GaussianLikelihood(obs, disc)
        exact = {z: obs.values[z].copy() for z in obs.zones}
        best = like(exact)
        rng = np.random.default_rng(4)
        for _ in range(25):
            shifted = {z: obs.values[z] + 0.01 * rng.standard_normal(3)
                       for z in obs.zones}
            assert like(shifted) < best

    def test_covariance_blocks_are_positive_definite(self):
        obs = _toy_obs()
        disc = inf.DiscrepancyConfig.from_observations(obs)
        like = inf.GaussianLikelihood(obs, disc)
        for z in obs.zones:
            cov = like.covariances[z]
            assert np.allclose(cov, cov.T)
            assert np.min(np.linalg.eigvalsh(cov)) > 0.0

    def test_wider_noise_softens_the_quadratic_penalty(self):
        records = [(1, 10.0, 0.1, 0.001), (1, 11.0, 0.1, 0.001)]
        wide = [(1, 10.0, 0.1, 0.01), (1, 11.0, 0.1, 0.01)]
        disc = inf.DiscrepancyConfig(sigma2_delta={1: 0.0 + 1e-12},
                                     lam={1: 0.04})
        pred = {1: np.array([0.0, 0.0])}
        tight = inf.log_likelihood(
            inf.observations_from_records(records), pred, disc)
        soft = inf.log_likelihood(
            inf.observations_from_records(wide), pred, disc)
        assert soft > tight
        exact = {1: np.array([0.1, 0.1])}
        tight0 = inf.log_likelihood(
            inf.observations_from_records(records), exact, disc)
        soft0 = inf.log_likelihood(
            inf.observations_from_records(wide), exact, disc)
        assert soft0 < tight0

    def test_discrepancy_scale_follows_peak(self):
        obs = _toy_obs()
        disc = inf.DiscrepancyConfig.from_observations(obs)
        expected = (inf.DISCREPANCY_PEAK_FRACTION * obs.peak()) ** 2
        for z in obs.zones:
            assert disc.sigma2_delta[z] == pytest.approx(expected)
            assert disc.lam[z] == pytest.approx(inf.DISCREPANCY_LAMBDA)


class TestSampler:
    def test_uniform_target_accepts_every_proposal(self):
        chain = inf.mh_sample(lambda phi: 0.0, np.full(3, 0.5),
                              total=2000, burn_in=500, step_scales=0.2,
                              seed=11)
        assert chain.acceptance_rate == 1.0
        assert bool(np.all(chain.accepted))

    def test_reflection_keeps_samples_in_the_unit_box(self):
        chain = inf.mh_sample(lambda phi: 0.0, np.array([0.01, 0.99]),
                              total=4000, burn_in=0, step_scales=0.9, seed=3)
        assert np.min(chain.samples) >= 0.0
        assert np.max(chain.samples) <= 1.0

    def test_five_state_target_matches_exact_masses(self):
        masses = np.array([0.10, 0.20, 0.30, 0.25, 0.15])

        def target(phi):
            state = min(int(phi[0] * 5 + 1), 5)
            return float(np.log(masses[state - 1]))

        chain = inf.mh_sample(target, np.array([0.5]), total=100_000,
                              burn_in=5000, step_scales=0.25, seed=42)
        states = np.minimum((chain.kept[:, 0] * 5 + 1).astype(int), 5)
        freq = np.array([np.mean(states == s) for s in range(1, 6)])
        tv = 0.5 * float(np.sum(np.abs(freq - masses)))
        assert tv <= TV_TOL

    def test_seed_reproducibility(self):
        def target(phi):
            return -10.0 * float(np.sum((phi - 0.3) ** 2))

        a = inf.mh_sample(target, np.full(4, 0.5), 3000, 1000, 0.1, seed=9)
        b = inf.mh_sample(target, np.full(4, 0.5), 3000, 1000, 0.1, seed=9)
        assert np.array_equal(a.samples, b.samples)
        assert np.array_equal(a.accepted, b.accepted)

    def test_burn_in_tuning_shrinks_scales_for_a_sharp_target(self):
        def target(phi):
            return -5000.0 * float(np.sum((phi - 0.5) ** 2))

        chain = inf.mh_sample(target, np.full(3, 0.5), total=4000,
                              burn_in=3000, step_scales=0.5, seed=1)
        assert np.all(chain.step_scales < 0.5)

    def test_no_tuning_without_burn_in(self):
        def target(phi):
            return -5000.0 * float(np.sum((phi - 0.5) ** 2))

        chain = inf.mh_sample(target, np.full(3, 0.5), total=2000,
                              burn_in=0, step_scales=0.5, seed=1)
        assert np.array_equal(chain.step_scales, np.full(3, 0.5))
        assert chain.low_acceptance == (chain.acceptance_rate < 0.01)

    def test_requires_room_after_burn_in(self):
        with pytest.raises(ConfigError):
            inf.mh_sample(lambda phi: 0.0, np.full(2, 0.5), 100, 100, 0.1, 0)

    def test_gaussian_target_moments(self):
        mu, sd = 0.6, 0.05

        def target(phi):
            return -0.5 * float((phi[0] - mu) ** 2) / sd ** 2

        chain = inf.mh_sample(target, np.array([0.5]), 60_000, 5000,
                              0.15, seed=7)
        kept = chain.kept[:, 0]
        assert abs(np.mean(kept) - mu) < 0.01
        assert abs(np.std(kept) - sd) < 0.01


class TestPosteriorAssembly:
    def test_log_posterior_is_exactly_likelihood_plus_prior(self):
        space = _space()
        obs = _toy_obs(zones=(1, 2))
        disc = inf.DiscrepancyConfig.from_observations(obs)

        def stub_predictor(candidate, zone_times):
            return {z: np.full(len(t), 0.01 * candidate.a)
                    for z, t in zone_times.items()}

        target = inf.make_log_posterior(space, obs, stub_predictor, disc)
        like = inf.GaussianLikelihood(obs, disc)
        rng = np.random.default_rng(2)
        for _ in range(20):
            phi = rng.uniform(size=space.dim)
            cand = space.decode(phi)
            pred = stub_predictor(cand, {z: obs.times[z] for z in obs.zones})
            expected = space.log_prior(cand) + like(pred)
            assert target(phi) - expected == 0.0

    def test_replacement_prior_swaps_out_the_uniform_one(self):
        space = _space()
        obs = _toy_obs()
        zero_pred = lambda c, zt: {z: np.zeros(len(t)) for z, t in zt.items()}
        target_plain = inf.make_log_posterior(space, obs, zero_pred)
        target_repl = inf.make_log_posterior(
            space, obs, zero_pred, log_prior_fn=lambda cand, phi: -1.5)
        phi = np.full(space.dim, 0.4)
        base = space.log_prior(space.decode(phi))
        assert target_repl(phi) == pytest.approx(
            target_plain(phi) - base - 1.5)

    def test_all_zero_observations_refuse_inference(self):
        records = [(z, t, 0.0, 1e-6) for z in (1, 2) for t in (5.0, 6.0)]
        obs = inf.observations_from_records(records)
        space = _space()
        with pytest.raises(NoDetection):
            inf.run_inference(space, obs,
                              lambda c, zt: {z: np.zeros(len(t))
                                             for z, t in zt.items()},
                              seed=0)

    def test_initial_state_points_at_the_loudest_zone(self):
        space = _space(zone_ids=(1, 2, 4))
        records = [(1, 20.0, 0.001, 1e-5), (4, 20.0, 0.09, 1e-5),
                   (2, 19.0, 0.0, 1e-5), (2, 21.0, 0.002, 1e-5)]
        obs = inf.observations_from_records(records)
        phi = space.initial_state(obs)
        assert space.decode(phi).b == 4
        lo, hi = space.ranges.start
        expected = (20.0 - 1.0 - lo) / (hi - lo)  # earliest positive reading
        assert phi[-1] == pytest.approx(expected)

    def test_summaries_normalize(self):
        space = _space()
        rng = np.random.default_rng(5)
        samples = rng.uniform(size=(400, space.dim))
        chain = inf.PosteriorChain(
            samples=samples, log_posteriors=np.zeros(400),
            accepted=np.ones(400, dtype=bool), burn_in=100, seed=0,
            step_scales=np.full(space.dim, 0.1), acceptance_rate=1.0)
        summ = inf.posterior_summaries(chain, space)
        assert sum(summ.p_zone.values()) == pytest.approx(1.0)
        assert sum(summ.p_count.values()) == pytest.approx(1.0)
        edges, dens = summ.rate_hist
        assert np.sum(dens * np.diff(edges)) == pytest.approx(1.0)
        edges, dens = summ.start_hist
        assert np.sum(dens * np.diff(edges)) == pytest.approx(1.0)
        for z, grid in summ.location_density.items():
            zone = space.net.zone(z)
            if summ.p_zone[z] > 0:
                cell = (zone.width / inf.HIST_BINS) * (zone.depth / inf.HIST_BINS)
                assert np.sum(grid) * cell == pytest.approx(1.0)
        text = summ.to_text()
        assert "source-zone" in text and "start time" in text


def _family(seed=0, n=16, zones=(1, 2)):
    """Two sensed-zone surrogates for one source in zone 1 (theta dim 4)."""
    rng = np.random.default_rng(seed)
    design = rng.uniform(size=(n, 4))
    families = {}
    models = {}
    for k, c in enumerate(zones):
        def response(theta, t, k=k):
            level = (0.4 + 0.3 * k) * (0.5 + theta[0] + 0.4 * theta[2]
                                       + 0.2 * theta[3] * (1 - k))
            return level * (1.0 - np.exp(-np.asarray(t) / (6.0 + 2.0 * k)))

        s1 = np.array([response(row, em.KNOTS_STAGE1) for row in design])
        s2 = np.array([response(row, em.KNOTS_STAGE2) for row in design])
        lam = np.full(4, 1.5 + 0.5 * k)
        models[c] = em.build_zone_emulator(1, 1, c, design, lam, s1, s2)
    families[(1, 1)] = em.EmulatorFamily(source_count=1, source_zone=1,
                                         models=models)
    return families


class TestPredictors:
    def test_emulator_backend_matches_the_series_policy(self):
        families = _family()
        pred = inf.EmulatorPredictor(families)
        space = inf.StateSpace(net=seven_room(), zone_ids=(1,),
                               n_sources_max=1)
        rng = np.random.default_rng(8)
        times = np.array([16.0, 19.0, 23.0, 27.0, 30.0])
        for _ in range(12):
            phi = rng.uniform(size=space.dim)
            phi[-1] = rng.uniform(0.1, 0.9)
            cand = space.decode(phi)
            got = pred(cand, {1: times, 2: times})
            t_rel = times - cand.scenario.start_min
            if np.any(t_rel > 26.0):
                continue
            for c in (1, 2):
                want, _ = families[(1, 1)].models[c].predict_series(
                    cand.theta, t_rel)
                assert np.max(np.abs(got[c] - want)) <= BACKEND_TOL

    def test_emulator_backend_handles_distinct_time_sets(self):
        families = _family()
        pred = inf.EmulatorPredictor(families)
        space = inf.StateSpace(net=seven_room(), zone_ids=(1,),
                               n_sources_max=1)
        phi = np.full(space.dim, 0.45)
        cand = space.decode(phi)
        zone_times = {1: np.array([18.0, 20.0]), 2: np.array([21.0, 24.0])}
        got = pred(cand, zone_times)
        for c, times in zone_times.items():
            want, _ = families[(1, 1)].models[c].predict_series(
                cand.theta, times - cand.scenario.start_min)
            assert np.max(np.abs(got[c] - want)) <= BACKEND_TOL

    def test_emulator_backend_rejects_unknown_family(self):
        pred = inf.EmulatorPredictor(_family())
        space = _space()
        phi = np.full(space.dim, 0.5)
        with pytest.raises(ConfigError):
            pred(space.decode(phi), {1: np.array([10.0])})

    def test_simulator_backend_matches_a_direct_run(self):
        import zonetrace.cfdzone as cz
        net = seven_room()
        space = inf.StateSpace(net=net, zone_ids=(1,), n_sources_max=1)
        phi = np.array([0.2, 0.3, 0.5, 0.4, 0.6, 0.55])
        cand = space.decode(phi)
        pred = inf.SimulatorPredictor(net, horizon_min=24.0)
        times = np.array([20.0, 22.0, 24.0])
        got = pred(cand, {1: times, 3: times})
        trace = cz.CoupledOperator(net.with_cfd(1)).run(cand.scenario, 24.0)
        for z in (1, 3):
            assert np.array_equal(got[z], trace.at(z, times))

    def test_simulator_backend_zeroes_when_start_is_past_horizon(self):
        net = seven_room()
        space = inf.StateSpace(net=net, zone_ids=(1,), n_sources_max=1)
        phi = np.full(space.dim, 0.5)
        phi[-1] = 1.0          # start at 25 min
        cand = space.decode(phi)
        pred = inf.SimulatorPredictor(net, horizon_min=20.0)
        out = pred(cand, {2: np.array([10.0, 20.0])})
        assert np.array_equal(out[2], np.zeros(2))

    def test_simulator_backend_caches_one_operator_per_zone(self):
        net = seven_room()
        space = inf.StateSpace(net=net, zone_ids=(1, 2), n_sources_max=1)
        pred = inf.SimulatorPredictor(net, horizon_min=16.0)
        times = np.array([14.0, 16.0])
        for r_z in (0.1, 0.9, 0.1):
            phi = np.full(space.dim, 0.5)
            phi[1] = r_z
            pred(space.decode(phi), {3: times})
        assert sorted(pred._operators) == [1, 2]


class TestChainIO:
    def test_observation_csv_round_trip(self, tmp_path):
        obs = _toy_obs()
        path = tmp_path / "obs.csv"
        inf.write_observations_csv(path, obs)
        back = inf.read_observations_csv(path)
        assert back.zones == obs.zones
        for z in obs.zones:
            assert np.array_equal(back.times[z], obs.times[z])
            assert np.allclose(back.values[z], obs.values[z], rtol=1e-12)
            assert np.allclose(back.noise_sd[z], obs.noise_sd[z], rtol=1e-12)

    def test_chain_csv_layout(self, tmp_path):
        space = _space()
        rng = np.random.default_rng(0)
        n = 40
        chain = inf.PosteriorChain(
            samples=rng.uniform(size=(n, space.dim)),
            log_posteriors=rng.normal(size=n),
            accepted=rng.uniform(size=n) < 0.5, burn_in=10, seed=0,
            step_scales=np.full(space.dim, 0.1), acceptance_rate=0.5)
        path = tmp_path / "chain.csv"
        inf.write_chain_csv(path, chain, space)
        lines = path.read_text().strip().splitlines()
        header = lines[0].split(",")
        assert header[:3] == ["iteration", "a", "b"]
        assert header[-2:] == ["log_posterior", "accepted"]
        assert "x3" in header and "S_a" in header
        assert len(lines) == n + 1
        first = lines[1].split(",")
        cand = space.decode(chain.samples[0])
        assert int(first[1]) == cand.a
        assert int(first[2]) == cand.b
        assert float(first[-2]) == chain.log_posteriors[0]
        assert first[-1] in ("0", "1")


class TestEndToEndSmall:
    def test_emulator_chain_recovers_a_synthetic_source(self):
        families = _family(seed=3, n=24)
        net = seven_room()
        space = inf.StateSpace(net=net, zone_ids=(1,), n_sources_max=1)
        truth_phi = np.array([0.2, 0.5, 0.55, 0.4, 0.5, 0.5])
        truth = space.decode(truth_phi)
        times = np.array([20.0, 21.0, 22.0, 23.0, 24.0])
        pred = inf.EmulatorPredictor(families)
        clean = pred(truth, {1: times, 2: times})
        rng = np.random.default_rng(10)
        records = []
        for z in (1, 2):
            for t, v in zip(times, clean[z]):
                noisy = v * (1.0 + 0.01 * rng.standard_normal())
                records.append((z, float(t), noisy, max(0.01 * v, 1e-8)))
        obs = inf.observations_from_records(records)
        chain, summ = inf.run_inference(
            space, obs, pred, seed=5,
            settings=inf.InferenceSettings(total=4000, burn_in=1500))
        assert summ.p_zone[1] == 1.0
        assert abs(summ.rate_mean - truth.scenario.rate) < 0.02
        assert abs(summ.start_mean - truth.scenario.start_min) < 2.0
        assert chain.acceptance_rate > 0.01
