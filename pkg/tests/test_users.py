import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ppdlab.diffusion import World
from ppdlab.evaluation import binomial_ci
from ppdlab.preference import (
    SyntheticUser,
    base_distribution_source,
    build_dataset,
    default_reward_specs,
    random_users,
)
from ppdlab.users import (
    EncoderConfig,
    EncoderTrainConfig,
    FewShotSet,
    UserEncoder,
    UserModelError,
    dropout_user,
    encode_user,
    few_shot_sets,
    interpolate_users,
    onehot_user,
    pair_feature_dim,
    pair_features,
    probe_topk_accuracy,
    topk_accuracy,
    train_encoder,
)

WORLD = World()
SPECS = default_reward_specs(WORLD, 0, calibrate=True)
SHOTS = 32


def context_feature(cids):
    return WORLD.tokens(cids).mean(axis=1)


@pytest.fixture(scope="module")
def population():
    users = random_users(20, 3, seed=0)
    return build_dataset(users, range(2000), 1000, base_distribution_source(WORLD), WORLD, SPECS)


@pytest.fixture(scope="module")
def trained(population):
    enc = UserEncoder.create(EncoderConfig(n_shots=SHOTS), context_feature, seed=0)
    pools = {u: population.user_index[u][:300] for u in range(20)}
    res = train_encoder(enc, population, EncoderTrainConfig(steps=600, lr=3e-3), pair_indices=pools)
    return res


def probe_sets(ds):
    train = [s for u in range(20) for s in few_shot_sets(ds, u, SHOTS, indices=ds.user_index[u][300:620])]
    test = [s for u in range(20)
            for s in few_shot_sets(ds, u, SHOTS, indices=ds.user_index[u][620:1000], seed=1)]
    return train, test


# ---- one-hot and interpolation ----------------------------------------------------


def test_onehot_examples():
    np.testing.assert_array_equal(onehot_user(0, 3), [1, 0, 0])
    np.testing.assert_array_equal(onehot_user(2, 3), [0, 0, 1])
    np.testing.assert_array_equal(sum(onehot_user(i, 5) for i in range(5)), np.ones(5))
    with pytest.raises(UserModelError):
        onehot_user(3, 3)


def test_interpolation_examples():
    np.testing.assert_array_equal(interpolate_users([0.5, 0.5, 0], 3), [0.5, 0.5, 0])
    np.testing.assert_array_equal(interpolate_users([0, 1, 0], 3), onehot_user(1, 3))
    assert not interpolate_users(np.zeros(3), 3).any()
    with pytest.raises(UserModelError):
        interpolate_users([-0.1, 1.1, 0], 3)


@given(w=st.lists(st.floats(0, 10), min_size=4, max_size=4))
def test_interpolation_is_identity_on_weights(w):
    np.testing.assert_array_equal(interpolate_users(w, 4), w)


# ---- dropout ------------------------------------------------------------------------


def test_dropout_zero_probability_is_identity():
    rng = np.random.default_rng(0)
    u = np.array([0.3, -1.0, 2.0])
    assert all(np.array_equal(dropout_user(u, 0.0, rng), u) for _ in range(100))


def test_dropout_rate_and_exact_zero():
    rng = np.random.default_rng(1)
    u = np.ones(4)
    outs = [dropout_user(u, 0.1, rng) for _ in range(10**4)]
    dropped = [o for o in outs if not np.array_equal(o, u)]
    assert all(np.array_equal(o, np.zeros(4)) for o in dropped)
    assert abs(len(dropped) / 10**4 - 0.1) < 0.01


def test_dropout_rejects_bad_probability():
    with pytest.raises(UserModelError):
        dropout_user(np.ones(2), 1.0, np.random.default_rng(0))


# ---- few-shot sets and encoder --------------------------------------------------------


def test_few_shot_sets_are_disjoint_and_owned(population):
    sets = few_shot_sets(population, 3, 4, indices=population.user_index[3][:40])
    assert len(sets) == 10 and all(len(s) == 4 and s.user_id == 3 for s in sets)
    rows = np.concatenate([s.x_plus for s in sets])
    assert len(np.unique(rows, axis=0)) == 40


def test_pair_features_layout():
    rng = np.random.default_rng(0)
    g, xp, xm = rng.standard_normal((3, 2, 8))
    f = pair_features(g, xp, xm)
    assert f.shape == (2, pair_feature_dim(8, 8)) == (2, 160)
    delta = xp - xm
    np.testing.assert_array_equal(f[:, 24:32], delta)
    np.testing.assert_allclose(f[1, 32:96].reshape(8, 8), np.outer(delta[1], xp[1] + xm[1]))


def make_set(seed, n=4, uid=0):
    rng = np.random.default_rng(seed)
    return FewShotSet(uid, rng.integers(0, 100, size=n), rng.standard_normal((n, 8)),
                      rng.standard_normal((n, 8)))


@given(seed=st.integers(0, 2**32))
def test_encoding_is_permutation_invariant(seed):
    enc = UserEncoder.create(EncoderConfig(), context_feature, seed=1)
    s = make_set(seed)
    order = np.random.default_rng(seed).permutation(4)
    np.testing.assert_allclose(encode_user(enc, s), encode_user(enc, s.permuted(order)),
                               rtol=0, atol=1e-12)


def test_duplicated_example_matches_single():
    enc = UserEncoder.create(EncoderConfig(), context_feature, seed=1)
    one = make_set(3, n=1)
    four = FewShotSet(0, np.repeat(one.context_ids, 4), np.repeat(one.x_plus, 4, axis=0),
                      np.repeat(one.x_minus, 4, axis=0))
    np.testing.assert_allclose(encode_user(enc, four), encode_user(enc, one), atol=1e-12)


def test_empty_set_rejected():
    enc = UserEncoder.create(EncoderConfig(), context_feature, seed=1)
    with pytest.raises(UserModelError):
        encode_user(enc, make_set(0, n=0))


def test_training_loss_decreases(trained):
    losses = trained.losses
    assert np.mean(losses[90:100]) < np.mean(losses[:10])


def test_training_is_deterministic(population):
    def run():
        enc = UserEncoder.create(EncoderConfig(n_shots=4), context_feature, seed=2)
        train_encoder(enc, population, EncoderTrainConfig(steps=5))
        return enc.params

    a, b = run(), run()
    assert all(a[n].tobytes() == b[n].tobytes() for n in a)


def test_training_needs_enough_pairs(population):
    enc = UserEncoder.create(EncoderConfig(n_shots=4), context_feature)
    with pytest.raises(UserModelError, match="user 1"):
        train_encoder(enc, population, EncoderTrainConfig(steps=1),
                      pair_indices={0: range(8), 1: range(7)}, user_ids=[0, 1])


def test_orthogonal_users_embed_apart(trained):
    users = [SyntheticUser(i, tuple(onehot_user(i % 3, 3))) for i in range(100)]
    ds = build_dataset(users, range(10**6, 10**6 + 64), 64, base_distribution_source(WORLD),
                       WORLD, SPECS)
    emb = np.array([trained.encoder.encode(few_shot_sets(ds, i, SHOTS)) for i in range(100)])
    emb /= np.linalg.norm(emb, axis=-1, keepdims=True)
    same = np.mean([emb[i, 0] @ emb[i, 1] for i in range(100)])
    # neighbour i + 1 has a different one-hot weight vector
    cross = np.mean([emb[i, 0] @ emb[(i + 1) % 100, 1] for i in range(100)])
    assert cross < same


# ---- probe ------------------------------------------------------------------------------


def test_uniform_logits_score_chance():
    acc = topk_accuracy(np.zeros((50, 20)), np.arange(50) % 20, [1, 4, 16])
    assert acc == {1: pytest.approx(0.05), 4: pytest.approx(0.2), 16: pytest.approx(0.8)}


@given(seed=st.integers(0, 2**32))
def test_topk_is_monotone_in_k(seed):
    rng = np.random.default_rng(seed)
    logits = rng.integers(0, 3, size=(30, 10)).astype(float)  # many ties
    acc = topk_accuracy(logits, rng.integers(0, 10, size=30), range(1, 11))
    vals = [acc[k] for k in range(1, 11)]
    assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))
    assert vals[-1] == pytest.approx(1.0)


def test_topk_rejects_large_k():
    with pytest.raises(UserModelError):
        topk_accuracy(np.zeros((2, 3)), np.array([0, 1]), [4])


def test_probe_rejects_overlapping_sets(trained, population):
    train, _ = probe_sets(population)
    with pytest.raises(UserModelError, match="held-out"):
        probe_topk_accuracy(trained.encoder, train, train[:3], range(20), ks=(1,))


def test_trained_probe_beats_chance(trained, population):
    train, test = probe_sets(population)
    res = probe_topk_accuracy(trained.encoder, train, test, range(20), ks=(1, 4, 16))
    assert res.n_sets >= 200
    assert res.accuracy[1] > 0.15 and res.accuracy[4] > 0.5
    assert res.accuracy[1] <= res.accuracy[4] <= res.accuracy[16]
    low, _ = binomial_ci(round(res.accuracy[1] * res.n_sets), res.n_sets)
    assert low > 0.05
