import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ppdlab.diffusion import World
from ppdlab.preference import (
    DatasetFormatError,
    PreferenceDataset,
    PreferenceError,
    PreferencePair,
    RewardSpec,
    SyntheticUser,
    base_distribution_source,
    bt_label,
    bt_probability,
    build_dataset,
    dataset_csv,
    default_reward_specs,
    dumps_dataset,
    eval_reward,
    load_dataset,
    loads_dataset,
    onehot_users,
    random_users,
    save_dataset,
    user_reward,
)

WORLD = World()
SPECS = default_reward_specs(WORLD, seed=0)
finite = st.floats(-50, 50)


def small_dataset(mode="deterministic", seed=0, users=None):
    users = users or onehot_users(3)
    return build_dataset(users, range(10), 7, base_distribution_source(WORLD), WORLD, SPECS,
                         mode=mode, seed=seed)


# ---- rewards ---------------------------------------------------------------------


def test_align_peaks_at_target():
    tok = WORLD.tokens([3])[0]
    target = SPECS[0].target(tok)
    assert eval_reward(SPECS[0], tok, target) == 0.0
    assert eval_reward(SPECS[0], tok, target + 0.1) < 0


def test_magnitude_and_smooth_hand_values():
    tok = WORLD.tokens([0])[0]
    assert eval_reward(SPECS[1], tok, np.full(8, 0.5)) == 0.5
    assert eval_reward(SPECS[2], tok, np.full(8, -3.0)) == 0.0
    assert eval_reward(SPECS[2], tok, np.array([0.0, 1, 0, 0, 0, 0, 0, 0])) == -2.0


def test_unknown_family_rejected():
    with pytest.raises(PreferenceError):
        RewardSpec("sharpness")


@given(seed=st.integers(0, 2**32))
def test_rewards_are_pure_and_batch_consistent(seed):
    rng = np.random.default_rng(seed)
    tok = WORLD.tokens(rng.integers(0, 100, size=5))
    x = rng.standard_normal((5, 8))
    for spec in SPECS:
        batch = eval_reward(spec, tok, x)
        single = [eval_reward(spec, tok[i], x[i]) for i in range(5)]
        np.testing.assert_allclose(batch, single, rtol=1e-12, atol=1e-12)
        assert np.all(np.isfinite(batch))


def test_rewards_bounded_above_on_bounded_inputs():
    rng = np.random.default_rng(0)
    tok = WORLD.tokens(rng.integers(0, 100, size=1000))
    x = rng.uniform(-1, 1, (1000, 8))
    assert eval_reward(SPECS[0], tok, x).max() <= 0
    assert eval_reward(SPECS[1], tok, x).max() <= 1
    assert eval_reward(SPECS[2], tok, x).max() <= 0


def test_calibrated_specs_have_unit_difference_spread():
    specs = default_reward_specs(WORLD, seed=0, calibrate=True)
    rng = np.random.default_rng(5)
    cids = rng.integers(0, 10**6, size=20000)
    tok = WORLD.tokens(cids)
    xa, xb = WORLD.sample_data(cids, rng), WORLD.sample_data(cids, rng)
    for spec in specs:
        sd = np.std(eval_reward(spec, tok, xa) - eval_reward(spec, tok, xb))
        assert sd == pytest.approx(1.0, rel=0.05)


def test_align_offset_is_orthogonal_to_other_families():
    spec = SPECS[0]
    shift = spec.params["offset"] - WORLD.pattern
    assert abs(shift.sum()) < 1e-12
    assert abs(shift @ WORLD.pattern) < 1e-12
    assert np.linalg.norm(shift) == pytest.approx(0.5 * math.sqrt(8))


# ---- users -------------------------------------------------------------------------


def test_onehot_user_reward_equals_family_reward():
    rng = np.random.default_rng(0)
    tok, x = WORLD.tokens([4])[0], rng.standard_normal(8)
    for user, spec in zip(onehot_users(3), SPECS):
        assert user_reward(user, tok, x, SPECS) == eval_reward(spec, tok, x)


def test_equal_family_rewards_mix_to_same_value():
    tok = WORLD.tokens([0])[0]
    x = np.full(8, 0.0)  # magnitude 0, smooth 0
    assert user_reward(SyntheticUser(0, (0.0, 0.5, 0.5)), tok, x, SPECS) == 0.0


@given(seed=st.integers(0, 2**32))
def test_user_reward_matches_resummation(seed):
    rng = np.random.default_rng(seed)
    user = SyntheticUser(0, tuple(rng.dirichlet(np.ones(3))))
    tok, x = WORLD.tokens([seed % 50])[0], rng.standard_normal(8)
    target = SPECS[0].target(tok)
    oracle = (user.weights[0] * -np.sum((x - target) ** 2) + user.weights[1] * np.mean(x)
              + user.weights[2] * -np.sum(np.diff(x) ** 2))
    assert user_reward(user, tok, x, SPECS) == pytest.approx(oracle, abs=1e-12)


def test_user_weight_validation():
    with pytest.raises(PreferenceError):
        SyntheticUser(0, (0.5, 0.6, 0.0))
    with pytest.raises(PreferenceError):
        SyntheticUser(0, (1.5, -0.5, 0.0))
    with pytest.raises(PreferenceError):
        user_reward(SyntheticUser(0, (0.5, 0.5)), WORLD.tokens([0])[0], np.zeros(8), SPECS)


@given(n=st.integers(1, 30), seed=st.integers(0, 1000))
def test_random_users_are_on_simplex(n, seed):
    users = random_users(n, 3, seed)
    assert len({u.user_id for u in users}) == n
    for u in users:
        assert abs(sum(u.weights) - 1) < 1e-9


# ---- Bradley-Terry -------------------------------------------------------------


def test_bt_equal_rewards_give_half_and_tie():
    lab = bt_label(1.0, 1.0)
    assert lab.p_a == 0.5 and lab.tie and lab.a_preferred


def test_bt_gap_two():
    assert bt_label(2.0, 0.0).p_a == pytest.approx(0.8807970779778823, abs=1e-12)


@given(a=finite, b=finite)
def test_bt_probabilities_are_complementary(a, b):
    assert bt_label(a, b).p_a + bt_label(b, a).p_a == pytest.approx(1.0, abs=1e-12)


def test_bt_errors():
    with pytest.raises(PreferenceError):
        bt_label(float("nan"), 0.0)
    with pytest.raises(PreferenceError):
        bt_label(1.0, 0.0, "stochastic")
    with pytest.raises(PreferenceError):
        bt_label(1.0, 0.0, "argmax")


def test_bt_probability_is_vectorized():
    np.testing.assert_allclose(bt_probability([0.0, 2.0], [0.0, 0.0]), [0.5, 0.8807970779778823])


# ---- dataset construction ------------------------------------------------------


def test_dataset_is_reproducible():
    assert dumps_dataset(small_dataset(seed=4)) == dumps_dataset(small_dataset(seed=4))
    assert dumps_dataset(small_dataset(seed=4)) != dumps_dataset(small_dataset(seed=5))


def test_deterministic_labels_respect_rewards():
    ds = small_dataset(users=random_users(4, 3, seed=1))
    assert len(ds) == 28
    for p in ds.pairs:
        assert not np.array_equal(p.x_plus, p.x_minus)
        r = [user_reward(ds.user(p.user_id), WORLD.tokens([p.context_id])[0], x, SPECS)
             for x in (p.x_plus, p.x_minus)]
        assert r[0] >= r[1]
        assert r == [p.reward_plus, p.reward_minus]


def test_user_index_is_consistent():
    ds = small_dataset()
    for uid, idx in ds.user_index.items():
        assert all(ds.pairs[i].user_id == uid for i in idx)
    assert sum(len(v) for v in ds.user_index.values()) == len(ds)


def test_stochastic_labels_follow_logistic():
    def fixed_gap(cids, noise):
        out = np.ones((len(cids), 8))
        out[1::2] = -1.0  # magnitude rewards +1 and -1
        return out + 1e-9 * noise

    user = [SyntheticUser(0, (0.0, 1.0, 0.0))]
    ds = build_dataset(user, range(10**4), 10**4, fixed_gap, WORLD, SPECS, "stochastic", seed=3)
    first = np.mean([p.x_plus.mean() > 0 for p in ds.pairs])
    assert abs(first - 0.8807970779778823) < 0.01


def test_build_errors():
    src = base_distribution_source(WORLD)
    with pytest.raises(PreferenceError):
        build_dataset([], range(3), 1, src, WORLD, SPECS)
    with pytest.raises(PreferenceError):
        build_dataset(onehot_users(), range(3), 0, src, WORLD, SPECS)
    with pytest.raises(PreferenceError):
        PreferenceDataset(8, 0, "deterministic", SPECS, onehot_users(),
                          [PreferencePair(0, np.zeros(8), np.ones(8), 9, 0.0, 0.0)])


# ---- persistence -------------------------------------------------------------------


def test_save_load_roundtrip(tmp_path):
    ds = small_dataset(mode="stochastic")
    path = tmp_path / "d.ppd"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert dumps_dataset(back) == path.read_bytes()
    assert back.label_mode == "stochastic" and len(back) == len(ds)
    np.testing.assert_array_equal(back.arrays()["x_plus"], ds.arrays()["x_plus"])


def test_empty_dataset_roundtrip():
    ds = PreferenceDataset(8, 1, "deterministic", SPECS, onehot_users())
    assert len(loads_dataset(dumps_dataset(ds))) == 0


def test_format_errors_name_offsets():
    blob = dumps_dataset(small_dataset())
    with pytest.raises(DatasetFormatError, match="offset"):
        loads_dataset(blob[:-5])
    with pytest.raises(DatasetFormatError, match="magic"):
        loads_dataset(b"NOTADATA" + blob[8:])
    bad = bytearray(blob)
    bad[8] = 7
    with pytest.raises(DatasetFormatError, match="version"):
        loads_dataset(bytes(bad))


def test_csv_export_columns():
    text = dataset_csv(small_dataset()).splitlines()
    assert text[0] == "user_id,context_id,reward_plus,reward_minus,label_mode"
    assert len(text) == 22 and text[1].endswith(",deterministic")
