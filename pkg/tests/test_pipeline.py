from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
import torch

from ebmpose.diffusion import NoiseSchedule
from ebmpose.energynet import DTYPE, ArchConfig, energy_and_score
from ebmpose.errors import ConfigError, NoCandidates
from ebmpose.geom import ObjectModel, PriorConfig, RigidPose, axis_angle_matrix, icosphere_prior_poses, mean_pose, pose_to_vec, vec_to_pose
from ebmpose.pipeline import (
    PipelineConfig,
    StageFlags,
    TrackerState,
    estimate,
    estimate_uncertainty,
    postrank,
    prefilter,
    refine_candidates,
    select_grasp,
    track_step,
)
from ebmpose.simulator import TactileImprint, make_shape, parse_shape

OBS = TactileImprint(np.zeros((2, 16, 16)), [True, True], 5.0)


class StubModel:
    """Stands in for the energy network with a closed-form energy ``E(P, t)``.

    ``Phi = E * P / |P|^2`` so that ``<Phi, P> = E`` exactly.
    """

    def __init__(self, energy_fn):
        self.energy_fn = energy_fn
        self.cfg = ArchConfig()
        self.schedule = NoiseSchedule()

    def render(self, P, objects, obj_index, gap):
        return np.zeros((len(P), 2, 16, 16))

    def phi(self, P, obs, t, rendered=None, ren_features=None):
        E = self.energy_fn(P, t)
        return E[:, None] * P / (P * P).sum(dim=1, keepdim=True)

    def energy_and_score(self, P, obs, t, create_graph=False, rendered=None):
        return energy_and_score(lambda q: self.phi(q, obs, t), P, create_graph)


def linear(c):
    c = torch.as_tensor(c, dtype=DTYPE)
    return StubModel(lambda P, t: P @ c)


def zero_model():
    return StubModel(lambda P, t: torch.zeros(P.shape[0], dtype=DTYPE))


def quadratic(target, schedule=NoiseSchedule()):
    target = torch.as_tensor(target, dtype=DTYPE)

    def E(P, t):
        sigma = schedule.sigma_min * (schedule.sigma_max / schedule.sigma_min) ** t
        return -((P - target) ** 2).sum(dim=1) / (2 * sigma**2)

    return StubModel(E)


@pytest.fixture(scope="module")
def box():
    return make_shape(parse_shape("box:20,10,6"))


@pytest.fixture(scope="module")
def asym():
    pts = np.random.default_rng(3).normal(size=(200, 3)) * [5.0, 3.0, 1.5]
    return ObjectModel(pts - pts.mean(axis=0))


def cands_with_first(values):
    C = np.tile(pose_to_vec(RigidPose.identity()), (len(values), 1))
    C[:, 0] = values
    return C


E1 = np.eye(9)[0]


# --- prefilter ----------------------------------------------------------------


def test_prefilter_forced_energies(box):
    kept, E, idx = prefilter(linear(E1), cands_with_first([3.0, 1.0, 2.0]), box, OBS, K=2)
    assert list(idx) == [0, 2]
    assert np.allclose(E, [3.0, 2.0], atol=1e-12)


def test_prefilter_k_equals_m_sorted(box):
    vals = np.random.default_rng(0).normal(size=12)
    kept, E, idx = prefilter(linear(E1), cands_with_first(vals), box, OBS, K=12)
    assert sorted(idx) == list(range(12))
    assert np.all(np.diff(E) <= 0)


def test_prefilter_matches_sort_oracle(box):
    rng = np.random.default_rng(1)
    for _ in range(100):
        M = int(rng.integers(1, 30))
        K = int(rng.integers(1, M + 1))
        c = rng.normal(size=9)
        C = rng.normal(size=(M, 9))
        if rng.random() < 0.3:  # force ties
            C[rng.integers(M)] = C[0]
        E = C @ c
        _, _, idx = prefilter(linear(c), C, box, OBS, K)
        order = sorted(range(M), key=lambda i: (-E[i], i))
        got_E = E[idx]
        want_E = E[order[:K]]
        assert np.allclose(got_E, want_E, atol=1e-12)
        exact = np.asarray(C @ c)
        if len(np.unique(exact)) == M:
            assert list(idx) == order[:K]


def test_prefilter_ties_to_lower_index(box):
    _, _, idx = prefilter(linear(E1), cands_with_first([1.0, 2.0, 2.0, 2.0]), box, OBS, K=2)
    assert list(idx) == [1, 2]


def test_prefilter_k_out_of_range(box):
    with pytest.raises(ConfigError):
        prefilter(linear(E1), cands_with_first([1.0, 2.0]), box, OBS, K=3)
    with pytest.raises(ConfigError):
        prefilter(linear(E1), cands_with_first([1.0, 2.0]), box, OBS, K=0)


# --- postrank -----------------------------------------------------------------


def test_postrank_examples(box):
    one = cands_with_first([0.7])
    pose, i, _ = postrank(linear(E1), one, box, OBS)
    assert i == 0 and np.allclose(pose_to_vec(pose), pose_to_vec(vec_to_pose(one[0])))
    _, i, _ = postrank(linear(E1), cands_with_first([0.1, 5.0, 2.0]), box, OBS)
    assert i == 1
    with pytest.raises(NoCandidates):
        postrank(linear(E1), np.zeros((0, 9)), box, OBS)


def test_postrank_scale_invariance(box):
    rng = np.random.default_rng(2)
    C = rng.normal(size=(20, 9))
    c = rng.normal(size=9)
    _, i, E = postrank(linear(c), C, box, OBS)
    for s in (1e-3, 0.5, 7.0, 1e4):
        assert postrank(linear(s * c), C, box, OBS)[1] == i
    assert np.all(E[i] >= E)


# --- refinement ---------------------------------------------------------------


def test_refine_zero_score_identity(box):
    C = np.random.default_rng(3).normal(size=(5, 9))
    out, reps = refine_candidates(zero_model(), C, box, OBS, 0.6)
    assert np.array_equal(out, C)
    assert not any(r.failed for r in reps)


@pytest.mark.parametrize("t0", [1.0, 0.6])
def test_refine_quadratic_closed_form(box, t0):
    target = np.linspace(-0.5, 0.5, 9)
    C = target + np.random.default_rng(4).normal(size=(6, 9))
    S = NoiseSchedule()
    out, _ = refine_candidates(quadratic(target), C, box, OBS, t0, tol=(1e-6, 1e-8))
    expected = S.sigma_value(S.eps) / S.sigma_value(t0)
    ratio = np.linalg.norm(out - target, axis=1) / np.linalg.norm(C - target, axis=1)
    assert np.all(np.abs(ratio / expected - 1) < 1e-3)


def test_refine_concurrent_equals_sequential(box):
    target = np.zeros(9)
    C = np.random.default_rng(5).normal(size=(6, 9)) * np.arange(1, 7)[:, None]
    model = quadratic(target)
    together, _ = refine_candidates(model, C, box, OBS, 0.6)
    with ThreadPoolExecutor(3) as ex:
        parts = list(ex.map(lambda row: refine_candidates(model, row[None], box, OBS, 0.6)[0][0], C))
    assert np.array_equal(np.stack(parts), together)


def test_refine_t0_domain(box):
    with pytest.raises(ConfigError):
        refine_candidates(zero_model(), np.ones((1, 9)), box, OBS, 1.5)


# --- estimate -----------------------------------------------------------------


def test_all_stages_off_gives_prior_mean(box):
    cfg = PipelineConfig(K=3, prior=PriorConfig(level=0, n_inplane=1, M=3), stages=StageFlags(False, False, False))
    prior = icosphere_prior_poses(cfg.prior, box, np.random.default_rng(6))
    res = estimate(linear(E1), box, OBS, cfg, np.random.default_rng(6))
    want = mean_pose([vec_to_pose(p) for p in prior])
    assert np.allclose(res.pose.rotation, want.rotation, atol=1e-12)
    assert np.allclose(res.pose.translation, want.translation, atol=1e-12)
    assert res.index == -1


def test_stage_composability(box):
    model = quadratic(pose_to_vec(RigidPose(axis_angle_matrix([0, 1, 0], 0.4), [1.0, 2.0, 0.0])))
    cfg = PipelineConfig(K=4, prior=PriorConfig(level=0, n_inplane=2))
    res = estimate(model, box, OBS, cfg, np.random.default_rng(7))
    prior = icosphere_prior_poses(cfg.prior, box, np.random.default_rng(7))
    kept, _, _ = prefilter(model, prior, box, OBS, 4)
    refined, _ = refine_candidates(model, kept, box, OBS, cfg.t0_est)
    pose, _, _ = postrank(model, refined, box, OBS)
    assert np.array_equal(res.pose.rotation, pose.rotation)
    assert np.array_equal(res.pose.translation, pose.translation)
    assert len(res.candidates) == 4 and res.rhs_evals > 0


def test_selected_pose_has_max_energy(box):
    model = linear(np.random.default_rng(8).normal(size=9))
    cfg = PipelineConfig(K=8, prior=PriorConfig(level=0, n_inplane=2), stages=StageFlags(True, False, True))
    res = estimate(model, box, OBS, cfg, np.random.default_rng(8))
    assert res.energies[res.index] == res.energies.max()


def test_unrefined_symmetric_candidates_have_undefined_spread(box):
    # the 12 icosahedron directions average to a rank-deficient rotation
    cfg = PipelineConfig(K=12, prior=PriorConfig(level=0, n_inplane=1), stages=StageFlags(True, False, True))
    res = estimate(linear(E1), box, OBS, cfg, np.random.default_rng(0))
    assert np.isnan(res.uncertainty)
    assert res.energies[res.index] == res.energies.max()


def test_pipeline_config_checks(box):
    with pytest.raises(ConfigError):
        estimate(zero_model(), box, OBS, PipelineConfig(K=300), np.random.default_rng(0))
    with pytest.raises(ConfigError):
        estimate(zero_model(), box, OBS, PipelineConfig(t0_track=0.8, t0_est=0.6), np.random.default_rng(0))
    assert PipelineConfig().M == 252


# --- uncertainty and grasp selection -----------------------------------------


def test_uncertainty_examples(asym):
    p = RigidPose(axis_angle_matrix([1, 0, 0], 0.2), [1.0, 0.0, 0.0])
    assert estimate_uncertainty([p, p, p], asym) == pytest.approx(0.0, abs=1e-12)
    two = [RigidPose.identity(), RigidPose(np.eye(3), [2.0, 0.0, 0.0])]
    assert estimate_uncertainty(two, asym) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(NoCandidates):
        estimate_uncertainty([], asym)


def test_uncertainty_brute_force(box):
    rng = np.random.default_rng(9)
    for _ in range(5):
        poses = [RigidPose(axis_angle_matrix(rng.normal(size=3), 0.3 * rng.random()), rng.normal(size=3)) for _ in range(6)]
        center = mean_pose(poses)
        total = 0.0
        for c in poses:
            moved = c.apply(box.points)
            ref = center.apply(box.points)
            total += np.mean([np.min(np.linalg.norm(ref - m, axis=1)) for m in moved])
        assert estimate_uncertainty(poses, box) == pytest.approx(total / len(poses), abs=1e-9)


def test_select_grasp():
    assert select_grasp([3.1, 0.5, 2.2]) == 1
    assert select_grasp([4.0]) == 0
    assert select_grasp([1.0, 0.5, 0.5]) == 1
    with pytest.raises(NoCandidates):
        select_grasp([])


# --- tracking -----------------------------------------------------------------


def test_track_step_static(box):
    last = RigidPose(axis_angle_matrix([0, 0, 1], 0.3), [1.0, -1.0, 0.5])
    cfg = PipelineConfig(sigma_track=0.0)
    pose, state = track_step(zero_model(), box, OBS, TrackerState(last), cfg, np.random.default_rng(0))
    assert np.allclose(pose.rotation, last.rotation, atol=1e-12)
    assert np.allclose(pose.translation, last.translation, atol=1e-12)
    assert state.step_index == 1 and state.last_result is not None


def test_track_step_deterministic(box):
    model = quadratic(pose_to_vec(RigidPose.identity()))
    last = RigidPose(axis_angle_matrix([1, 0, 0], 0.1), [0.5, 0.0, 0.0])
    a, _ = track_step(model, box, OBS, TrackerState(last), PipelineConfig(), np.random.default_rng(11))
    b, _ = track_step(model, box, OBS, TrackerState(last), PipelineConfig(), np.random.default_rng(11))
    assert np.array_equal(a.rotation, b.rotation) and np.array_equal(a.translation, b.translation)
