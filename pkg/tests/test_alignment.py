import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ppdlab import checkpoint
from ppdlab.autodiff import Graph, backward, evaluate
from ppdlab.diffusion import build_schedule, denoising_loss
from ppdlab.preference import (
    PreferencePair,
    build_dataset,
    default_reward_specs,
    model_source,
    onehot_users,
)
from ppdlab.alignment import (
    AlignmentError,
    OneHotSource,
    TableSource,
    TrainConfig,
    diffusion_dpo_pair_loss,
    history_csv,
    jensen_bound_check,
    loss_from_errors,
    ppd_pair_loss,
    preference_loss,
    sft_loss,
    train,
)

LN2 = math.log(2)


def random_pair(seed, uid=0):
    rng = np.random.default_rng(seed)
    pair = PreferencePair(int(rng.integers(0, 500)), rng.standard_normal(8), rng.standard_normal(8),
                          uid, 0.0, 0.0)
    return pair, int(rng.integers(1, 65)), rng.standard_normal(8), rng.standard_normal(8), rng


@pytest.fixture(scope="module")
def dataset(pretrained, world):
    specs = default_reward_specs(world, 0)
    return build_dataset(onehot_users(), range(300), 300, model_source(pretrained, world, 10),
                         world, specs)


# ---- loss algebra ---------------------------------------------------------------


def test_hand_value():
    total, delta = loss_from_errors(0.9, 1.0, 1.1, 1.0, beta=1.0, T=10)
    assert delta == pytest.approx(-0.2, abs=1e-15)
    assert total == pytest.approx(0.1269280110429725, abs=1e-12)


def test_loss_decreases_with_policy_error_on_winner():
    errs = np.linspace(1.5, 0.5, 11)
    totals = [loss_from_errors(e, 1.0, 1.0, 1.0, beta=0.5, T=64)[0] for e in errs]
    assert all(b < a for a, b in zip(totals, totals[1:]))


@given(errs=st.lists(st.floats(0, 5), min_size=4, max_size=4), beta=st.floats(0.1, 2))
def test_gradient_signs(errs, beta):
    h = 1e-6
    f = lambda *e: float(loss_from_errors(*e, beta=beta, T=10)[0])
    up = list(errs)
    up[0] += h
    dn = list(errs)
    dn[0] -= h
    assert f(*up) - f(*dn) > 0
    up, dn = list(errs), list(errs)
    up[2] += h
    dn[2] -= h
    assert f(*up) - f(*dn) < 0


# ---- pair losses on the denoiser --------------------------------------------------


def test_reference_equality_gives_ln2_and_zero_gradient_at_u0(small_model, world):
    ref = small_model.copy()
    pair, t, ep, em, _ = random_pair(0)
    holder = {}

    def build(g):
        holder["lb"] = ppd_pair_loss(small_model, ref, pair, np.zeros(3), t, ep, em, world,
                                     small_model.sched, 0.5, graph=g)
        return holder["lb"].node

    g = Graph(build)
    evaluate(g, small_model.params)
    lb = holder["lb"]
    assert lb.total == pytest.approx(LN2, abs=1e-12)
    assert np.all(lb.delta == 0)
    grads = backward(g)
    for name in small_model.adapter_names():
        assert not grads[name].any()


@given(seed=st.integers(0, 2**32))
def test_swapping_winner_and_loser_negates_delta(seed):
    from ppdlab.diffusion import Denoiser, ModelConfig, World

    world = World()
    model = Denoiser.create(ModelConfig(), build_schedule(64), seed=seed % 7)
    ref = Denoiser.create(ModelConfig(), model.sched, seed=seed % 7 + 1)
    pair, t, ep, em, rng = random_pair(seed)
    u = rng.standard_normal(3)
    swapped = PreferencePair(pair.context_id, pair.x_minus, pair.x_plus, 0, 0.0, 0.0)
    a = ppd_pair_loss(model, ref, pair, u, t, ep, em, world, model.sched, 1.0)
    b = ppd_pair_loss(model, ref, swapped, u, t, em, ep, world, model.sched, 1.0)
    assert b.delta[0] == -a.delta[0]
    assert min(a.err_theta_plus[0], a.err_ref_plus[0], a.err_theta_minus[0], a.err_ref_minus[0]) >= 0


def test_dpo_equals_ppd_at_zero_user(small_model, pretrained, world):
    pair, t, ep, em, _ = random_pair(4)
    a = diffusion_dpo_pair_loss(small_model, pretrained, pair, t, ep, em, world, small_model.sched, 0.5)
    b = ppd_pair_loss(small_model, pretrained, pair, np.zeros(3), t, ep, em, world,
                      small_model.sched, 0.5)
    assert a.total == b.total and a.delta[0] == b.delta[0]
    same = diffusion_dpo_pair_loss(pretrained, pretrained.copy(), pair, t, ep, em, world,
                                   pretrained.sched, 0.5)
    assert same.total == pytest.approx(LN2, abs=1e-12)


def test_total_is_mean_of_softplus(small_model, pretrained, world):
    rng = np.random.default_rng(5)
    n = 6
    xp, xm = rng.standard_normal((2, n, 8))
    tok = world.tokens(rng.integers(0, 100, n))
    u = rng.standard_normal((n, 3))
    t = rng.integers(1, 65, n)
    ep, em = rng.standard_normal((2, n, 8))
    lb = preference_loss(small_model, pretrained, xp, xm, tok, u, t, ep, em, small_model.sched, 0.3)
    expected = np.mean(np.log1p(np.exp(0.3 * 64 * lb.delta)))
    assert lb.total == pytest.approx(expected, rel=1e-12)
    assert lb.implicit_accuracy == np.mean(lb.delta < 0)


def test_schedule_mismatch_errors(small_model, world):
    other = build_schedule(32)
    pair, t, ep, em, _ = random_pair(6)
    with pytest.raises(AlignmentError):
        ppd_pair_loss(small_model, small_model.copy(), pair, np.zeros(3), 10, ep, em, world, other, 0.5)


# ---- SFT -----------------------------------------------------------------------------


def test_sft_matches_denoising_loss_on_winners(small_model, world):
    rng = np.random.default_rng(7)
    xp = rng.standard_normal((5, 8))
    tok = world.tokens(range(5))
    u = rng.standard_normal((5, 3))
    t = rng.integers(1, 65, 5)
    ep = rng.standard_normal((5, 8))
    a = sft_loss(small_model, xp, tok, u, t, ep, small_model.sched)
    b = denoising_loss(small_model, xp, tok, u, small_model.sched, t=t, eps=ep)
    assert a == b


def test_sft_of_perfect_denoiser_is_zero(sched):
    class Perfect:
        def __call__(self, x_t, tokens, u, t, graph=None, use_adapter=True):
            return self.eps

    m = Perfect()
    m.eps = np.random.default_rng(0).standard_normal((3, 8))
    assert sft_loss(m, np.ones((3, 8)), None, np.zeros((3, 3)), [5, 6, 7], m.eps, sched) == 0.0


# ---- Jensen ------------------------------------------------------------------------


def test_jensen_plus_minus_one():
    res = jensen_bound_check([-1.0, 1.0])
    assert res["lhs"] == pytest.approx(LN2, abs=1e-15)
    assert res["rhs"] == pytest.approx(0.8132616875182228, abs=1e-12)
    assert res["holds"]


@given(c=st.floats(-30, 30), n=st.integers(2, 50))
def test_jensen_equality_for_constant_batch(c, n):
    res = jensen_bound_check(np.full(n, c))
    assert res["lhs"] == pytest.approx(res["rhs"], rel=1e-12, abs=1e-300)


@given(seed=st.integers(0, 2**32), scale=st.floats(0.01, 100))
def test_jensen_holds_for_gaussian_batches(seed, scale):
    assert jensen_bound_check(scale * np.random.default_rng(seed).standard_normal(16))["holds"]


def test_jensen_needs_two_samples():
    with pytest.raises(AlignmentError):
        jensen_bound_check([1.0])


# ---- training loop ---------------------------------------------------------------


def test_train_config_validation():
    for bad in ({"beta": 0.0}, {"beta": -1.0}, {"lr": -1.0}, {"user_dropout_p": 1.0},
                {"objective": "kto"}, {"trainable_set": "lora"}, {"epochs": 0}):
        with pytest.raises(AlignmentError):
            TrainConfig(**bad)


def test_first_step_is_ln2_and_backbone_frozen(pretrained, dataset, world):
    model = pretrained.copy()
    res = train(model, dataset, OneHotSource(3), world, TrainConfig(beta=0.5, max_steps=10),
                ref_model=pretrained)
    assert res.history[0]["loss"] == pytest.approx(LN2, abs=1e-9)
    assert len(res.history) == 10
    for name in model.params:
        if not name.startswith("user_attn."):
            assert model.params[name].tobytes() == pretrained.params[name].tobytes()
    assert model.params["user_attn.wv"].any()


def test_one_epoch_learns_preferences(pretrained, dataset, world):
    model = pretrained.copy()
    res = train(model, dataset, OneHotSource(3), world, TrainConfig(beta=0.1), ref_model=pretrained)
    assert len(res.history) == math.ceil(len(dataset) / 16)
    a = dataset.arrays()
    rng = np.random.default_rng(0)
    n = len(dataset)
    lb = preference_loss(model, pretrained, a["x_plus"], a["x_minus"], world.tokens(a["context_id"]),
                         np.eye(3)[a["user_id"]], rng.integers(1, 65, n),
                         rng.standard_normal((n, 8)), rng.standard_normal((n, 8)), model.sched, 0.1)
    assert lb.implicit_accuracy > 0.5


@pytest.mark.parametrize("objective", ["ppd", "diffusion-dpo", "sft"])
def test_training_is_bit_reproducible(pretrained, dataset, world, objective):
    def run():
        model = pretrained.copy()
        cfg = TrainConfig(max_steps=5, objective=objective, trainable_set="all")
        res = train(model, dataset, OneHotSource(3), world, cfg)
        return checkpoint.dumps(model.params), history_csv(res.history)

    assert run() == run()


def test_user_source_mismatch(pretrained, dataset, world):
    with pytest.raises(AlignmentError, match=r"\[2\]"):
        train(pretrained.copy(), dataset, TableSource({0: np.eye(3)[:1], 1: np.eye(3)[1:2]}),
              world, TrainConfig(max_steps=1))


def test_history_csv_columns(pretrained, dataset, world):
    res = train(pretrained.copy(), dataset, OneHotSource(3), world, TrainConfig(max_steps=2))
    lines = history_csv(res.history).splitlines()
    assert lines[0] == "step,objective,loss,delta_mean,implicit_accuracy,beta"
    assert len(lines) == 3 and lines[1].startswith("0,ppd,")
