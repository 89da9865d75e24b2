"""Preference fine-tuning objectives (personalized DPO, Diffusion-DPO, SFT) and the loop."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import autodiff as ad
from .autodiff import AdamWConfig, AdamWState, Graph, _softplus
from .diffusion import ADAPTER_PREFIX, Denoiser, NoiseSchedule, World, denoising_loss, forward_diffuse
from .preference import PreferenceDataset, PreferencePair
from .seeding import stream

OBJECTIVES = ("ppd", "diffusion-dpo", "sft")
TRAINABLE_SETS = ("adapter-only", "all")


class AlignmentError(ValueError):
    pass


@dataclass
class TrainConfig:
    beta: float = 0.5
    lr: float = 1e-2
    weight_decay: float = 0.0
    batch_pairs: int = 16
    epochs: int = 1
    max_steps: int | None = None
    user_dropout_p: float = 0.1
    seed: int = 0
    trainable_set: str = "adapter-only"
    objective: str = "ppd"

    def __post_init__(self):
        if not self.beta > 0:
            raise AlignmentError("beta > 0 required")
        if self.lr < 0:
            raise AlignmentError("lr >= 0 required")
        if self.batch_pairs < 1 or self.epochs < 1:
            raise AlignmentError("batch_pairs and epochs must be >= 1")
        if not 0 <= self.user_dropout_p < 1:
            raise AlignmentError("user_dropout_p must lie in [0, 1)")
        if self.trainable_set not in TRAINABLE_SETS:
            raise AlignmentError(f"trainable_set must be one of {TRAINABLE_SETS}")
        if self.objective not in OBJECTIVES:
            raise AlignmentError(f"objective must be one of {OBJECTIVES}")


@dataclass
class LossBreakdown:
    """Per-batch view of the preference loss.

    ``total`` is the batch mean of ``-log sigmoid(-beta*T*omega_t*delta)``; the
    array fields hold one entry per pair.
    """

    total: float
    delta: np.ndarray
    err_theta_plus: np.ndarray
    err_ref_plus: np.ndarray
    err_theta_minus: np.ndarray
    err_ref_minus: np.ndarray
    implicit_accuracy: float
    node: object = field(default=None, repr=False)

    @property
    def delta_mean(self) -> float:
        return float(np.mean(self.delta))


def loss_from_errors(err_theta_plus, err_ref_plus, err_theta_minus, err_ref_minus,
                     beta: float, T: int, omega=1.0):
    """Scalar form of the preference loss from the four squared errors."""
    delta = (np.asarray(err_theta_plus) - err_ref_plus) - (np.asarray(err_theta_minus) - err_ref_minus)
    return _softplus(np.asarray(beta * T * omega * delta, dtype=np.float64)), delta


def preference_loss(model: Denoiser, ref_model: Denoiser, x_plus, x_minus, tokens, u, t,
                    eps_plus, eps_minus, sched: NoiseSchedule, beta: float,
                    graph: Graph | None = None) -> LossBreakdown:
    """Batched personalized DPO loss.

    ``u`` conditions only the policy; the reference sees the text alone and
    enters as constants. With ``u`` all zero this is plain Diffusion-DPO.
    """
    if model.sched is not sched and not np.array_equal(model.sched.alpha, sched.alpha):
        raise AlignmentError("model schedule does not match the loss schedule")
    if not np.array_equal(ref_model.sched.alpha, sched.alpha):
        raise AlignmentError("reference schedule does not match the loss schedule")
    x_plus = np.atleast_2d(np.asarray(x_plus, dtype=np.float64))
    x_minus = np.atleast_2d(np.asarray(x_minus, dtype=np.float64))
    batch = x_plus.shape[0]
    t = sched.check_t(np.broadcast_to(np.asarray(t), (batch,)))
    x_t = np.concatenate([forward_diffuse(x_plus, t, eps_plus, sched),
                          forward_diffuse(x_minus, t, eps_minus, sched)])
    eps = np.concatenate([eps_plus, eps_minus])
    tok2 = np.concatenate([tokens, tokens])
    u2 = np.concatenate([u, u])
    t2 = np.concatenate([t, t])

    err_theta = ad.squared_error(eps, model(x_t, tok2, u2, t2, graph=graph))
    ref_pred = ref_model(x_t, tok2, np.zeros_like(u2), t2, use_adapter=False)
    err_ref = ((eps - ref_pred) ** 2).sum(axis=1)

    signs = np.array([[1.0], [-1.0]])
    delta = ad.sum(ad.mul(ad.reshape(ad.sub(err_theta, err_ref), (2, batch)), signs), axis=0)
    scale = beta * sched.T * sched.omega[t]
    total = ad.mean(ad.softplus(ad.mul(delta, scale)))

    et = ad.value_of(err_theta)
    dv = ad.value_of(delta)
    return LossBreakdown(
        total=float(ad.value_of(total)),
        delta=dv.copy(),
        err_theta_plus=et[:batch].copy(), err_ref_plus=err_ref[:batch],
        err_theta_minus=et[batch:].copy(), err_ref_minus=err_ref[batch:],
        implicit_accuracy=float(np.mean(dv < 0)),
        node=total,
    )


def ppd_pair_loss(model, ref_model, pair: PreferencePair, u, t, eps_plus, eps_minus,
                  world: World, sched, beta, graph=None) -> LossBreakdown:
    tokens = world.tokens([pair.context_id])
    return preference_loss(model, ref_model, pair.x_plus[None], pair.x_minus[None], tokens,
                           np.asarray(u, dtype=np.float64)[None], [t],
                           np.asarray(eps_plus)[None], np.asarray(eps_minus)[None],
                           sched, beta, graph)


def diffusion_dpo_pair_loss(model, ref_model, pair: PreferencePair, t, eps_plus, eps_minus,
                            world: World, sched, beta, graph=None) -> LossBreakdown:
    u0 = np.zeros(model.cfg.k_user)
    return ppd_pair_loss(model, ref_model, pair, u0, t, eps_plus, eps_minus, world, sched, beta, graph)


def sft_loss(model: Denoiser, x_plus, tokens, u, t, eps_plus, sched, graph=None):
    """Conditional denoising loss on the preferred samples only."""
    return denoising_loss(model, np.atleast_2d(x_plus), tokens, np.atleast_2d(u), sched,
                          t=np.atleast_1d(t), eps=np.atleast_2d(eps_plus), graph=graph)


def jensen_bound_check(samples) -> dict:
    """Compare ``-log sigmoid(mean X)`` with ``mean(-log sigmoid(X))``."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size < 2:
        raise AlignmentError("need at least two samples")
    lhs = float(_softplus(np.array([-x.mean()]))[0])
    rhs = float(np.mean(_softplus(-x)))
    return {"lhs": lhs, "rhs": rhs, "holds": lhs <= rhs + 1e-12}


# ---------------------------------------------------------------------------
# Training


class UserSource(Protocol):
    """Maps a batch of user ids to user embeddings (B, k)."""

    user_ids: frozenset

    def __call__(self, user_ids: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...


@dataclass
class OneHotSource:
    k: int
    user_ids: frozenset = frozenset()

    def __post_init__(self):
        if not self.user_ids:
            self.user_ids = frozenset(range(self.k))

    def __call__(self, user_ids, rng):
        return np.eye(self.k)[np.asarray(user_ids)]


@dataclass
class TableSource:
    """Picks one of several precomputed embeddings per user at random."""

    table: dict[int, np.ndarray]

    @property
    def user_ids(self) -> frozenset:
        return frozenset(self.table)

    def __call__(self, user_ids, rng):
        out = []
        for uid in user_ids:
            options = self.table[int(uid)]
            out.append(options[rng.integers(len(options))])
        return np.array(out)


def apply_dropout(u: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    keep = rng.random(u.shape[0]) >= p
    return u * keep[:, None]


@dataclass
class TrainResult:
    model: Denoiser
    history: list[dict]


HISTORY_COLUMNS = ("step", "objective", "loss", "delta_mean", "implicit_accuracy", "beta")


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    for row in history:
        writer.writerow([row[c] if not isinstance(row[c], float) else repr(row[c])
                         for c in HISTORY_COLUMNS])
    return buf.getvalue()


def train(model: Denoiser, dataset: PreferenceDataset, user_source: UserSource,
          world: World, cfg: TrainConfig, ref_model: Denoiser | None = None,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Fine-tune ``model`` in place on ``dataset``.

    The reference defaults to a frozen copy of ``model`` as passed in. Per
    step, ``(t, eps+, eps-)`` for pair index ``i`` come from the stream keyed
    by ``(seed, step, i)``.
    """
    if len(dataset) == 0:
        raise AlignmentError("empty dataset")
    if dataset.d != model.cfg.d:
        raise AlignmentError(f"dataset dimension {dataset.d} != model dimension {model.cfg.d}")
    missing = {int(u) for u in np.unique(dataset.arrays()["user_id"])} - set(user_source.user_ids)
    if missing:
        raise AlignmentError(f"user source has no embedding for users {sorted(missing)}")
    ref = ref_model if ref_model is not None else model.copy()
    sched = model.sched
    if cfg.trainable_set == "adapter-only":
        model.params.set_trainable(lambda n: n.startswith(ADAPTER_PREFIX))
    else:
        model.params.set_trainable(lambda n: True)
    flags = [model.params.is_trainable(n) for n in model.params]

    arrays = dataset.arrays()
    tokens_all = world.tokens(arrays["context_id"])
    n = len(dataset)
    state = AdamWState()
    hyper = AdamWConfig(lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = stream(cfg.seed, "epoch", epoch).permutation(n)
        for start in range(0, n, cfg.batch_pairs):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            idx = order[start:start + cfg.batch_pairs]
            t = np.empty(len(idx), dtype=np.int64)
            eps_p = np.empty((len(idx), model.cfg.d))
            eps_m = np.empty_like(eps_p)
            for j, i in enumerate(idx):
                rng = stream(cfg.seed, "pair-noise", step, int(i))
                t[j] = rng.integers(1, sched.T + 1)
                eps_p[j] = rng.standard_normal(model.cfg.d)
                eps_m[j] = rng.standard_normal(model.cfg.d)
            urng = stream(cfg.seed, "user", step)
            if cfg.objective == "diffusion-dpo":
                u = np.zeros((len(idx), model.cfg.k_user))
            else:
                u = apply_dropout(user_source(arrays["user_id"][idx], urng), cfg.user_dropout_p, urng)
            xp, xm, tok = arrays["x_plus"][idx], arrays["x_minus"][idx], tokens_all[idx]

            holder = {}

            def build(g):
                if cfg.objective == "sft":
                    return sft_loss(model, xp, tok, u, t, eps_p, sched, graph=g)
                holder["lb"] = preference_loss(model, ref, xp, xm, tok, u, t, eps_p, eps_m,
                                               sched, cfg.beta, graph=g)
                return holder["lb"].node

            graph = Graph(build, name=cfg.objective)
            loss = float(ad.evaluate(graph, model.params))
            if not math.isfinite(loss):
                raise AlignmentError(f"non-finite loss at step {step}")
            grads = ad.backward(graph)
            ad.adamw_step(model.params, grads, state, hyper)
            lb = holder.get("lb")
            row = {
                "step": step,
                "objective": cfg.objective,
                "loss": loss,
                "delta_mean": lb.delta_mean if lb else float("nan"),
                "implicit_accuracy": lb.implicit_accuracy if lb else float("nan"),
                "beta": cfg.beta,
            }
            history.append(row)
            if on_step:
                on_step(row)
            step += 1
    if [model.params.is_trainable(n) for n in model.params] != flags:
        raise AlignmentError("trainable flags changed during training")
    return TrainResult(model, history)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
