import numpy as np
import pytest

from flowprompt import dataset, geometry, synthenv
from flowprompt.errors import InputError


def simple_spec(links=2, lengths=(1.0, 1.0), freq=30.0, arms=1, sigma=0.0, theta=0.0):
    cams = {"top": synthenv.CameraModel(theta, 0.0, 0.0, 1.0, sigma)}
    bases = ((0.0, 0.0),) if arms == 1 else ((-0.5, 0.0), (0.5, 0.0))
    return synthenv.EmbodimentSpec(
        name="test", arms=arms, links_per_arm=links, link_lengths=tuple(lengths),
        joint_limits=tuple([np.inf] + [2.8] * (links - 1)), control_freq_hz=freq,
        base_offsets=bases, cameras=cams,
    )


def simple_task(spec, goals=((1.2, 0.6, 1),)):
    return synthenv.Task(goals=tuple([tuple(goals)] * spec.arms))


class TestSuite:
    def test_deterministic(self):
        a = synthenv.make_suite(0)
        b = synthenv.make_suite(0)
        assert [hw.to_dict() for _, hw in a] == [hw.to_dict() for _, hw in b]
        assert [s.link_lengths for s, _ in a] == [s.link_lengths for s, _ in b]

    def test_seven_domains(self):
        assert len(synthenv.make_suite(1)) == 7

    def test_paired_domains_share_kinematics(self):
        suite = synthenv.make_suite(0)
        s2, s3 = suite[1][0], suite[2][0]
        assert s2.link_lengths == s3.link_lengths
        assert s2.links_per_arm == s3.links_per_arm
        assert s2.cameras != s3.cameras

    def test_mixture_weights(self):
        suite = synthenv.make_suite(0)
        mix = synthenv.default_mixture(suite)
        np.testing.assert_allclose(sorted(mix.weights), sorted(synthenv.DEFAULT_WEIGHTS))

    def test_holdout_unseen_kinematics(self):
        suite = synthenv.make_suite(0)
        spec, hw = synthenv.make_holdout_domain(0)
        assert hw.domain_id not in [h.domain_id for _, h in suite]
        assert spec.link_lengths not in [s.link_lengths for s, _ in suite]


class TestFK:
    def test_straight_chain(self):
        spec = simple_spec()
        (eef, heading), = synthenv.fk(spec, [[0.0, 0.0]])
        np.testing.assert_allclose(eef, [2.0, 0.0], atol=1e-12)
        assert heading == 0.0

    def test_quarter_turn_base(self):
        spec = simple_spec()
        (eef, heading), = synthenv.fk(spec, [[np.pi / 2, 0.0]])
        np.testing.assert_allclose(eef, [0.0, 2.0], atol=1e-12)
        assert heading == pytest.approx(np.pi / 2)

    def test_single_link(self):
        spec = simple_spec(links=1, lengths=(0.7,))
        (eef, heading), = synthenv.fk(spec, [[0.0]])
        np.testing.assert_allclose(eef, [0.7, 0.0], atol=1e-12)
        assert heading == 0.0

    def test_out_of_limit_rejected(self):
        spec = simple_spec()
        with pytest.raises(InputError):
            synthenv.fk(spec, [[0.0, 3.5]])

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        for links in (2, 3, 4):
            spec = simple_spec(links=links, lengths=tuple(rng.uniform(0.4, 1.0, links)))
            joints = np.concatenate([rng.uniform(-np.pi, np.pi, 1), rng.uniform(-1, 1, links - 1)])[None]
            j_analytic = synthenv.jacobian(spec, joints, 0)
            eps = 1e-7
            j_num = np.zeros_like(j_analytic)
            for i in range(links):
                jp, jm = joints.copy(), joints.copy()
                jp[0, i] += eps
                jm[0, i] -= eps
                j_num[:, i] = (
                    synthenv.fk_points(spec, jp, 0)[-1] - synthenv.fk_points(spec, jm, 0)[-1]
                ) / (2 * eps)
            np.testing.assert_allclose(j_analytic, j_num, atol=1e-6)


class TestObserve:
    def test_identity_noise_free_returns_raw_keypoints(self):
        spec = simple_spec()
        task = simple_task(spec)
        state = synthenv.reset_state(spec, task, np.random.default_rng(0))
        obs = synthenv.observe(spec, state, "top", np.random.default_rng(0))
        pts = synthenv.fk_points(spec, state.joints, 0)
        np.testing.assert_allclose(obs[: 2 * (spec.links_per_arm + 1)], pts.reshape(-1), atol=1e-12)
        assert obs.shape == (synthenv.obs_dim(spec),)

    def test_camera_rotation_pi_negates_coordinates(self):
        spec0 = simple_spec(theta=0.0)
        spec_pi = simple_spec(theta=np.pi)
        task = simple_task(spec0)
        state = synthenv.reset_state(spec0, task, np.random.default_rng(1))
        a = synthenv.observe(spec0, state, "top", np.random.default_rng(0))
        b = synthenv.observe(spec_pi, state, "top", np.random.default_rng(0))
        n_coords = 2 * (spec0.links_per_arm + 1 + synthenv.G_MAX)
        np.testing.assert_allclose(b[:n_coords], -a[:n_coords], atol=1e-12)
        np.testing.assert_array_equal(b[n_coords:], a[n_coords:])

    def test_noise_reproducible(self):
        spec = simple_spec(sigma=0.05)
        task = simple_task(spec)
        state = synthenv.reset_state(spec, task, np.random.default_rng(2))
        a = synthenv.observe(spec, state, "top", np.random.default_rng(7))
        b = synthenv.observe(spec, state, "top", np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)

    def test_unknown_view_rejected(self):
        spec = simple_spec()
        state = synthenv.reset_state(spec, simple_task(spec), np.random.default_rng(0))
        with pytest.raises(InputError):
            synthenv.observe(spec, state, "side", np.random.default_rng(0))


def command_row(spec, xy, heading=0.0, grip=0):
    return synthenv._command_row(spec, [(np.asarray(xy), heading, grip)] * spec.arms)


class TestStep:
    def test_fixed_point(self):
        spec = simple_spec()
        state = synthenv.reset_state(spec, simple_task(spec), np.random.default_rng(3))
        (eef, heading), = synthenv.fk(spec, state.joints)
        new = synthenv.step(spec, state, command_row(spec, eef, heading, 0))
        np.testing.assert_allclose(new.joints, state.joints, atol=1e-12)

    def test_distant_command_clamped_displacement(self):
        spec = simple_spec()
        state = synthenv.reset_state(spec, simple_task(spec), np.random.default_rng(4))
        start = synthenv.fk_points(spec, state.joints, 0)[-1]
        new = synthenv.step(spec, state, command_row(spec, start + np.array([5.0, 0.0])))
        disp = np.linalg.norm(synthenv.fk_points(spec, new.joints, 0)[-1] - start)
        assert disp == pytest.approx(spec.v_max / spec.control_freq_hz, rel=1e-3)

    def test_displacement_never_exceeds_limit(self):
        rng = np.random.default_rng(5)
        for links in (2, 3, 4):
            spec = simple_spec(links=links, lengths=tuple(rng.uniform(0.4, 1.0, links)))
            state = synthenv.reset_state(spec, simple_task(spec), rng)
            for _ in range(50):
                target = rng.uniform(-2, 2, size=2)
                prev = synthenv.fk_points(spec, state.joints, 0)[-1]
                state = synthenv.step(spec, state, command_row(spec, target, rng.uniform(-3, 3)))
                disp = np.linalg.norm(synthenv.fk_points(spec, state.joints, 0)[-1] - prev)
                assert disp <= spec.v_max / spec.control_freq_hz + 1e-9

    def test_converges_to_reachable_pose(self):
        spec = simple_spec(links=3, lengths=(0.9, 0.7, 0.5))
        state = synthenv.reset_state(spec, simple_task(spec), np.random.default_rng(6))
        target = np.array([1.0, 0.8])
        for _ in range(200):
            state = synthenv.step(spec, state, command_row(spec, target))
        eef = synthenv.fk_points(spec, state.joints, 0)[-1]
        assert np.linalg.norm(eef - target) <= synthenv.EPS_GOAL

    def test_non_finite_action_rejected(self):
        spec = simple_spec()
        state = synthenv.reset_state(spec, simple_task(spec), np.random.default_rng(0))
        row = command_row(spec, [np.nan, 0.0])
        with pytest.raises(InputError):
            synthenv.step(spec, state, row)


class TestExpert:
    def test_every_episode_succeeds_and_counts(self):
        rng = np.random.default_rng(0)
        suite = synthenv.make_suite(0)
        episodes = []
        for spec, hw in suite:
            eps = synthenv.generate_dataset(spec, hw, 2, rng)
            assert len(eps) == 2
            episodes.extend(eps)
        assert len(episodes) == 2 * 7

    def test_zero_jitter_same_seed_identical(self):
        spec, hw = synthenv.make_suite(0)[0]
        task = synthenv.sample_task(spec, np.random.default_rng(11))
        a = synthenv.scripted_expert(spec, hw, task, np.random.default_rng(3))
        b = synthenv.scripted_expert(spec, hw, task, np.random.default_rng(3))
        assert len(a.steps) == len(b.steps)
        for sa, sb in zip(a.steps, b.steps):
            np.testing.assert_array_equal(sa.raw_action, sb.raw_action)
            np.testing.assert_array_equal(sa.obs["top"], sb.obs["top"])

    def test_dual_arm_expert(self):
        spec, hw = synthenv.make_suite(0)[4]
        rng = np.random.default_rng(2)
        ep = synthenv.scripted_expert(spec, hw, synthenv.sample_task(spec, rng), rng)
        assert ep.steps[0].raw_action.shape == (10,)
        assert ep.steps[0].proprio.shape == (2 * 2 * spec.links_per_arm,)

    def test_unreachable_task_rejected(self):
        spec, hw = synthenv.make_suite(0)[0]
        task = synthenv.Task(goals=(((10.0, 10.0, 1),),))
        with pytest.raises(Exception):
            synthenv.scripted_expert(spec, hw, task, np.random.default_rng(0))

    def test_aligned_heading_recovers_raw(self):
        spec, hw = synthenv.make_suite(0)[1]
        rng = np.random.default_rng(4)
        ep = synthenv.scripted_expert(spec, hw, synthenv.sample_task(spec, rng), rng)
        for s in ep.steps[::5]:
            rot = geometry.rot6d_decode(s.aligned[3:9])
            want = synthenv.wrap_angle(s.raw_action[3])
            assert geometry.heading_from_rot(rot) == pytest.approx(want, abs=1e-9)


class TestRollout:
    def test_expert_policy_succeeds(self):
        for idx in (0, 1, 4):
            spec, hw = synthenv.make_suite(0)[idx]
            rng = np.random.default_rng(idx)
            task = synthenv.sample_task(spec, rng, n_goals=2)
            policy = synthenv.expert_chunk_policy(spec, task, np.random.default_rng(0))
            res = synthenv.rollout(policy, spec, task, np.random.default_rng(1), max_steps=400)
            assert res.success, f"expert rollout failed on domain {idx}"

    def test_zero_action_policy_fails(self):
        spec, hw = synthenv.make_suite(0)[0]
        task = synthenv.sample_task(spec, np.random.default_rng(5), n_goals=2)

        def policy(state):
            return dataset.ActionChunk(np.zeros((30, 10)), arms=1)

        res = synthenv.rollout(policy, spec, task, np.random.default_rng(1), max_steps=120)
        assert not res.success

    def test_non_finite_policy_recorded_not_crash(self):
        spec, hw = synthenv.make_suite(0)[0]
        task = synthenv.sample_task(spec, np.random.default_rng(5))

        def policy(state):
            return dataset.ActionChunk(np.full((30, 10), np.nan), arms=1)

        res = synthenv.rollout(policy, spec, task, np.random.default_rng(1), max_steps=50)
        assert not res.success and res.failure == "non_finite_action"

    def test_deterministic_given_seeds(self):
        spec, hw = synthenv.make_suite(0)[1]
        task = synthenv.sample_task(spec, np.random.default_rng(6), n_goals=1)
        outs = []
        for _ in range(2):
            policy = synthenv.expert_chunk_policy(spec, task, np.random.default_rng(0))
            res = synthenv.rollout(policy, spec, task, np.random.default_rng(2), max_steps=300)
            outs.append((res.success, res.steps))
        assert outs[0] == outs[1]


class TestPairedDomainStatistics:
    def test_same_actions_different_observations(self):
        suite = synthenv.make_suite(0)
        (s2, h2), (s3, h3) = suite[1], suite[2]
        rng = np.random.default_rng(0)
        eps2 = synthenv.generate_dataset(s2, h2, 8, np.random.default_rng(21))
        eps3 = synthenv.generate_dataset(s3, h3, 8, np.random.default_rng(21))
        acts2 = np.concatenate([ep.aligned_matrix() for ep in eps2])
        acts3 = np.concatenate([ep.aligned_matrix() for ep in eps3])
        # identical kinematics + task distribution: matching action stats
        assert np.abs(acts2.mean(0) - acts3.mean(0)).max() < 0.25
        assert np.abs(acts2.std(0) - acts3.std(0)).max() < 0.25
        obs2 = np.stack([s.obs[h2.main_view] for ep in eps2 for s in ep.steps])
        obs3 = np.stack([s.obs[h3.main_view] for ep in eps3 for s in ep.steps])
        # cameras differ: observation means must separate
        assert np.abs(obs2.mean(0) - obs3.mean(0)).max() > 0.2
