"""Returns, normalizers, jump-step segments, inverse-dynamics pairs and storage."""

import csv
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_pairs, brute_returns, brute_segments, random_dataset

from diffplan.dataset import (
    EpisodeRecord,
    OfflineDataset,
    ReturnNormalizer,
    StateNormalizer,
    build_segments,
    compute_returns,
    export_csv,
    fit_state_normalizer,
    gather_segments,
    invdyn_pairs,
    load_dataset,
    normalize_returns,
    pair_input,
    save_dataset,
    segment_returns,
    segment_steps,
)


@pytest.fixture
def toy():
    return random_dataset(np.random.default_rng(0), n_episodes=20)


def line_episode(L, ds=2):
    s = np.arange(L * ds, dtype=float).reshape(L, ds)
    return EpisodeRecord(s, -s[:, :1], np.zeros(L))


class TestReturns:
    def test_geometric(self):
        np.testing.assert_allclose(compute_returns([1, 1, 1], 0.5), [1.75, 1.5, 1.0])

    def test_zero_rewards(self):
        assert (compute_returns(np.zeros(5), 0.9) == 0).all()

    def test_iql_maze_shaping(self):
        assert compute_returns(np.zeros(3), 0.99, "iql-maze")[0] == pytest.approx(-2.9701, abs=1e-12)

    @pytest.mark.parametrize("mode", ["discount", "iql-maze"])
    def test_matches_brute_force_and_bellman(self, mode):
        rng = np.random.default_rng(1)
        r = rng.normal(size=40)
        R = compute_returns(r, 0.97, mode)
        np.testing.assert_allclose(R, brute_returns(r, 0.97, mode == "iql-maze"), atol=1e-9)
        shaped = r - 1.0 if mode == "iql-maze" else r
        np.testing.assert_allclose(R[:-1], shaped[:-1] + 0.97 * R[1:], atol=1e-9)

    @pytest.mark.parametrize("gamma", [0.0, -0.1, 1.01])
    def test_bad_gamma(self, gamma):
        with pytest.raises(ValueError, match="gamma"):
            compute_returns([1.0], gamma)

    def test_non_finite(self):
        with pytest.raises(ValueError, match="finite"):
            compute_returns([1.0, np.nan], 0.9)


class TestReturnNormalizer:
    def test_two_values(self):
        _, z = normalize_returns(np.array([0.0, 10.0]))
        np.testing.assert_array_equal(z, [-1.0, 1.0])

    def test_three_values(self):
        _, z = normalize_returns([np.array([0.0, 5.0]), np.array([10.0])])
        np.testing.assert_allclose(z, [-1.0, 0.0, 1.0])

    def test_round_trip(self):
        r = np.random.default_rng(0).normal(0, 30, 100)
        norm, z = normalize_returns(r)
        assert z.min() == -1.0 and z.max() == 1.0
        np.testing.assert_allclose(norm.denormalize(z), r, atol=1e-9)

    def test_degenerate_warns_and_maps_to_zero(self):
        with pytest.warns(RuntimeWarning, match="equal"):
            norm, z = normalize_returns(np.full(4, 3.0))
        assert (z == 0).all()
        assert norm.degenerate and (norm.denormalize(z) == 3.0).all()

    def test_empty(self):
        with pytest.raises(ValueError):
            normalize_returns(np.zeros(0))

    def test_out_of_range_values_extrapolate(self):
        assert ReturnNormalizer(0.0, 10.0).normalize(20.0) == 3.0


class TestStateNormalizer:
    def test_symmetric_range(self):
        n = StateNormalizer.fit(np.array([[-4.0], [4.0]]))
        assert n.apply(np.array([[2.0]]))[0, 0] == 0.5

    def test_constant_dimension(self):
        x = np.array([[1.0, 7.0], [3.0, 7.0], [2.0, 7.0]])
        n = StateNormalizer.fit(x)
        assert (n.apply(x)[:, 1] == 0).all()
        np.testing.assert_allclose(n.inverse(n.apply(x)), x, atol=1e-9)

    def test_training_set_in_unit_box(self, toy):
        n = fit_state_normalizer(toy)
        z = n.apply(toy.all_states())
        assert z.min() >= -1 - 1e-12 and z.max() <= 1 + 1e-12
        np.testing.assert_allclose(n.inverse(z), toy.all_states(), atol=1e-9)

    def test_dict_round_trip(self, toy):
        n = fit_state_normalizer(toy)
        m = StateNormalizer.from_dict(n.to_dict())
        assert np.array_equal(m.lo, n.lo) and np.array_equal(m.hi, n.hi)

    def test_empty(self):
        with pytest.raises(ValueError):
            StateNormalizer.fit(np.zeros((0, 3)))


class TestSegments:
    def test_interior_anchor(self):
        steps, pad = segment_steps(10, 0, 3, 2)
        assert steps.tolist() == [0, 2, 4] and pad == 0

    def test_padded_anchor(self):
        steps, pad = segment_steps(10, 8, 3, 2)
        assert steps.tolist() == [8, 9, 9] and pad == 1

    def test_count_short_episode(self):
        idx = build_segments(OfflineDataset("x", [line_episode(5)]), 2, 1)
        assert len(idx) == 5
        assert idx.pad_count.tolist() == [0, 0, 0, 0, 1]

    @pytest.mark.parametrize("H,M", [(2, 1), (3, 2), (4, 3), (5, 1)])
    @pytest.mark.parametrize("mode", ["states-only", "joint"])
    def test_matches_brute_force(self, toy, H, M, mode):
        idx = build_segments(toy, H, M, mode)
        X = gather_segments(toy, idx)
        ref = brute_segments(toy, H, M, joint=mode == "joint")
        assert len(idx) == len(ref)
        for k, (e, t, arr, pad) in enumerate(ref):
            assert (idx.episode[k], idx.anchor[k], idx.pad_count[k]) == (e, t, pad)
            assert np.array_equal(X[k], arr)

    def test_dense_steps_are_contiguous_slices(self, toy):
        idx = build_segments(toy, 3, 1)
        X = gather_segments(toy, idx)
        for k in np.nonzero(idx.pad_count == 0)[0]:
            ep = toy.episodes[idx.episode[k]]
            t = idx.anchor[k]
            if t + 3 <= len(ep):
                assert np.array_equal(X[k], ep.states[t : t + 3])

    def test_segments_stay_in_their_episode(self, toy):
        idx = build_segments(toy, 4, 3)
        lengths = np.array([len(ep) for ep in toy.episodes])
        assert (idx.steps < lengths[idx.episode][:, None]).all()
        assert (idx.pad_count < idx.H).all()

    def test_gather_preserves_index_order(self, toy):
        idx = build_segments(toy, 3, 2)
        X = gather_segments(toy, idx)
        perm = np.random.default_rng(0).permutation(len(idx))
        sub = type(idx)(idx.episode[perm], idx.anchor[perm], idx.steps[perm], idx.pad_count[perm], 3, 2, idx.mode)
        assert np.array_equal(gather_segments(toy, sub), X[perm])

    def test_clip(self):
        idx = build_segments(OfflineDataset("x", [line_episode(30)]), 2, 1, clip=10)
        assert len(idx) == 10 and idx.steps.max() == 9

    def test_normalized_joint_width(self, toy):
        idx = build_segments(toy, 3, 1, "joint")
        X = gather_segments(toy, idx, fit_state_normalizer(toy), StateNormalizer.fit(toy.all_actions()))
        assert X.shape[2] == toy.state_dim + toy.action_dim
        assert np.abs(X).max() <= 1 + 1e-12

    def test_returns_follow_anchor(self, toy):
        idx = build_segments(toy, 3, 2)
        R = [compute_returns(ep.rewards, 0.9) for ep in toy.episodes]
        sr = segment_returns(idx, R)
        assert all(sr[k] == R[idx.episode[k]][idx.anchor[k]] for k in range(len(idx)))

    @pytest.mark.parametrize("H,M", [(1, 1), (3, 0)])
    def test_bad_shape(self, toy, H, M):
        with pytest.raises(ValueError):
            build_segments(toy, H, M)

    def test_empty_episode_skipped_with_warning(self):
        empty = EpisodeRecord(np.zeros((0, 2)), np.zeros((0, 1)), np.zeros(0))
        with pytest.warns(RuntimeWarning, match="empty"):
            idx = build_segments(OfflineDataset("x", [line_episode(3), empty]), 2, 1)
        assert len(idx) == 3


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(2, 6), st.integers(1, 5))
def test_segment_steps_property(L, H, M):
    for t in range(L):
        steps, pad = segment_steps(L, t, H, M)
        assert steps[0] == t and (np.diff(steps) >= 0).all() and steps[-1] <= L - 1
        assert pad == max(0, sum(t + h * M >= L - 1 for h in range(H)) - 1)


class TestInvDynPairs:
    def test_centralized_example(self):
        x = pair_input(np.array([[2.0, 3.0]]), np.array([[2.5, 3.1]]), True)
        np.testing.assert_allclose(x, [[0.0, 0.0, 0.5, 0.1]])

    def test_no_motion_centralized_is_zero(self):
        s = np.array([[1.0, -2.0]])
        assert (pair_input(s, s, True) == 0).all()

    def test_count(self):
        X, Y = invdyn_pairs(OfflineDataset("x", [line_episode(9)]), 2)
        assert len(X) == len(Y) == 7

    @pytest.mark.parametrize("M", [1, 2, 4])
    @pytest.mark.parametrize("centralize", [False, True])
    def test_matches_brute_force(self, toy, M, centralize):
        X, Y = invdyn_pairs(toy, M, centralize)
        bx, by = brute_pairs(toy, M, centralize)
        assert np.array_equal(X, bx) and np.array_equal(Y, by)

    def test_short_episodes_only(self):
        X, Y = invdyn_pairs(OfflineDataset("x", [line_episode(2)]), 3)
        assert X.shape == (0, 4) and Y.shape == (0, 1)

    def test_bad_stride(self, toy):
        with pytest.raises(ValueError):
            invdyn_pairs(toy, 0)


class TestEpisodeRecord:
    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            EpisodeRecord(np.zeros((3, 2)), np.zeros((2, 1)), np.zeros(3))

    def test_flags_exclusive(self):
        with pytest.raises(ValueError, match="both"):
            EpisodeRecord(np.zeros((1, 2)), np.zeros((1, 1)), np.zeros(1), terminated=True, truncated=True)


class TestStorage:
    def test_round_trip(self, toy, tmp_path):
        toy.episodes[0].terminated = True
        toy.metadata["mix"] = {"expert": 1.0}
        save_dataset(toy, tmp_path / "d.dpds")
        back = load_dataset(tmp_path / "d.dpds")
        assert back.env_id == toy.env_id and back.metadata == toy.metadata
        assert back.episodes[0].terminated
        for a, b in zip(toy.episodes, back.episodes):
            for f in ("states", "actions", "rewards"):
                assert getattr(a, f).tobytes() == getattr(b, f).tobytes()

    def test_truncated_body_rejected(self, toy, tmp_path):
        p = tmp_path / "d.dpds"
        save_dataset(toy, p)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(ValueError, match="header dims"):
            load_dataset(p)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"JUNKJUNK")
        with pytest.raises(ValueError, match="not a dataset"):
            load_dataset(tmp_path / "x")

    def test_csv_export(self, toy, tmp_path):
        export_csv(toy, tmp_path / "d.csv")
        with open(tmp_path / "d.csv") as f:
            rows = list(csv.reader(f))
        assert rows[0][:3] == ["episode", "step", "s0"]
        assert len(rows) == 1 + toy.n_steps


def test_no_warning_for_regular_returns():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        normalize_returns(np.array([0.0, 1.0]))
