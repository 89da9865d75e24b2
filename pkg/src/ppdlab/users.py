"""User embeddings: one-hot, interpolated, and a few-shot preference-set encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamWConfig, AdamWState, Graph, ParamStore
from .preference import PreferenceDataset
from .seeding import stream


class UserModelError(ValueError):
    pass


def onehot_user(index: int, k: int) -> np.ndarray:
    if not 0 <= index < k:
        raise UserModelError(f"user index {index} out of range for k={k}")
    u = np.zeros(k)
    u[index] = 1.0
    return u


def interpolate_users(weights, k: int) -> np.ndarray:
    """``sum_i w_i e_i``, i.e. the weights themselves; no renormalisation."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (k,):
        raise UserModelError(f"expected {k} weights, got shape {w.shape}")
    if np.any(w < 0):
        raise UserModelError("interpolation weights must be non-negative")
    return sum((w[i] * onehot_user(i, k) for i in range(k)), np.zeros(k))


def dropout_user(u, p: float, rng: np.random.Generator) -> np.ndarray:
    """Zero the whole embedding with probability ``p``."""
    if not 0 <= p < 1:
        raise UserModelError("dropout probability must lie in [0, 1)")
    u = np.asarray(u, dtype=np.float64)
    if rng.random() < p:
        return np.zeros_like(u)
    return u


# ---------------------------------------------------------------------------
# Few-shot sets


@dataclass
class FewShotSet:
    user_id: int
    context_ids: np.ndarray
    x_plus: np.ndarray
    x_minus: np.ndarray

    def __len__(self) -> int:
        return len(self.context_ids)

    def permuted(self, order) -> "FewShotSet":
        order = np.asarray(order)
        return FewShotSet(self.user_id, self.context_ids[order], self.x_plus[order],
                          self.x_minus[order])


def few_shot_sets(ds: PreferenceDataset, user_id: int, n: int = 4,
                  indices: Sequence[int] | None = None, seed: int = 0) -> list[FewShotSet]:
    """Split a user's pairs (or the given subset) into disjoint sets of ``n``."""
    idx = np.array(ds.user_index[user_id] if indices is None else indices, dtype=np.int64)
    idx = idx[stream(seed, "fewshot", user_id).permutation(len(idx))]
    arr = ds.arrays()
    sets = []
    for start in range(0, len(idx) - n + 1, n):
        chunk = idx[start:start + n]
        sets.append(FewShotSet(user_id, arr["context_id"][chunk], arr["x_plus"][chunk],
                               arr["x_minus"][chunk]))
    return sets


# ---------------------------------------------------------------------------
# Encoder


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 8
    d_context: int = 8
    k: int = 16
    hidden: int = 64
    n_shots: int = 4
    temperature: float = 0.1


def pair_features(g: np.ndarray, x_plus: np.ndarray, x_minus: np.ndarray) -> np.ndarray:
    """Per-example input ``[g, x+, x-, delta, vec(delta x sum), vec(delta x g)]``.

    ``delta = x+ - x-`` and ``sum = x+ + x-``. Any quadratic score difference
    ``q(x+) - q(x-)`` is linear in the outer products, so the embedder can
    read off preference directions without learning multiplications.
    """
    delta, total = x_plus - x_minus, x_plus + x_minus
    outer_s = (delta[:, :, None] * total[:, None, :]).reshape(len(delta), -1)
    outer_g = (delta[:, :, None] * g[:, None, :]).reshape(len(delta), -1)
    return np.concatenate([g, x_plus, x_minus, delta, outer_s, outer_g], axis=1)


def pair_feature_dim(d: int, d_g: int) -> int:
    return d_g + 3 * d + d * d + d * d_g


class UserEncoder:
    """Permutation-invariant set encoder.

    Each example's ``pair_features`` go through a two-layer MLP; the
    per-example features are mean-pooled and projected to ``k`` dims.
    ``context_feature`` maps context ids to ``g(c)``.
    """

    def __init__(self, cfg: EncoderConfig, params: ParamStore,
                 context_feature: Callable[[np.ndarray], np.ndarray]):
        self.cfg = cfg
        self.params = params
        self.context_feature = context_feature

    @classmethod
    def create(cls, cfg: EncoderConfig, context_feature, seed: int = 0) -> "UserEncoder":
        rng = stream(seed, "encoder-init")
        f_in = pair_feature_dim(cfg.d, cfg.d_context)
        p = ParamStore()
        p.add("enc.l1.w", rng.standard_normal((f_in, cfg.hidden)) / math.sqrt(f_in))
        p.add("enc.l1.b", np.zeros(cfg.hidden))
        p.add("enc.l2.w", rng.standard_normal((cfg.hidden, cfg.hidden)) / math.sqrt(cfg.hidden))
        p.add("enc.l2.b", np.zeros(cfg.hidden))
        p.add("enc.out.w", rng.standard_normal((cfg.hidden, cfg.k)) / math.sqrt(cfg.hidden))
        p.add("enc.out.b", np.zeros(cfg.k))
        return cls(cfg, p, context_feature)

    def features(self, sets: Sequence[FewShotSet]) -> np.ndarray:
        if not sets:
            raise UserModelError("no few-shot sets given")
        n = len(sets[0])
        if n == 0 or any(len(s) != n for s in sets):
            raise UserModelError("few-shot sets must be non-empty and equally sized")
        cids = np.concatenate([s.context_ids for s in sets])
        xp = np.concatenate([s.x_plus for s in sets])
        xm = np.concatenate([s.x_minus for s in sets])
        if xp.shape[1] != self.cfg.d:
            raise UserModelError(f"sample dimension {xp.shape[1]} != encoder d {self.cfg.d}")
        return pair_features(self.context_feature(cids), xp, xm).reshape(len(sets), n, -1)

    def forward(self, feats: np.ndarray, graph: Graph | None = None):
        get = graph.param if graph is not None else self.params.__getitem__
        h = ad.silu(feats @ get("enc.l1.w") + get("enc.l1.b"))
        h = ad.silu(h @ get("enc.l2.w") + get("enc.l2.b"))
        pooled = ad.mean(h, axis=1)
        return pooled @ get("enc.out.w") + get("enc.out.b")

    def encode(self, sets: Sequence[FewShotSet]) -> np.ndarray:
        return self.forward(self.features(sets))


def encode_user(encoder: UserEncoder, fewshot: FewShotSet) -> np.ndarray:
    if len(fewshot) == 0:
        raise UserModelError("empty few-shot set")
    return encoder.encode([fewshot])[0]


def _normalize(x):
    return ad.div(x, ad.sqrt(ad.add(ad.sum(ad.mul(x, x), axis=-1, keepdims=True), 1e-12)))


def contrastive_loss(a, b, temperature: float):
    """Symmetric InfoNCE between row-aligned embedding batches."""
    za, zb = _normalize(a), _normalize(b)
    logits = ad.mul(ad.matmul(za, ad.transpose(zb)), 1.0 / temperature)
    n = ad.value_of(logits).shape[0]
    diag = ad.sum(ad.mul(logits, np.eye(n)), axis=-1)
    rows = ad.sub(ad.logsumexp(logits), diag)
    cols = ad.sub(ad.logsumexp(ad.transpose(logits)), diag)
    return ad.mul(ad.add(ad.mean(rows), ad.mean(cols)), 0.5)


@dataclass
class EncoderTrainConfig:
    steps: int = 600
    lr: float = 3e-3
    users_per_batch: int = 16
    seed: int = 0


@dataclass
class EncoderTrainResult:
    encoder: UserEncoder
    losses: list[float] = field(default_factory=list)


def train_encoder(encoder: UserEncoder, ds: PreferenceDataset, cfg: EncoderTrainConfig,
                  user_ids: Sequence[int] | None = None,
                  pair_indices: dict[int, Sequence[int]] | None = None) -> EncoderTrainResult:
    """Contrastive training: two disjoint few-shot sets of one user should match.

    ``pair_indices`` restricts each user to a subset of their pairs (e.g. the
    training split).
    """
    n = encoder.cfg.n_shots
    users = list(user_ids) if user_ids is not None else list(ds.user_index)
    if len(users) < 2:
        raise UserModelError("need at least two users")
    pools = {}
    for uid in users:
        idx = np.asarray(pair_indices[uid] if pair_indices else ds.user_index[uid])
        if len(idx) < 2 * n:
            raise UserModelError(f"user {uid} has {len(idx)} pairs; need at least {2 * n}")
        pools[uid] = idx
    arr = ds.arrays()
    feats_all = pair_features(encoder.context_feature(arr["context_id"]), arr["x_plus"],
                              arr["x_minus"])
    state = AdamWState()
    losses = []
    for step in range(cfg.steps):
        rng = stream(cfg.seed, "encoder-step", step)
        batch_users = rng.permutation(users)[: cfg.users_per_batch]
        picks = np.array([rng.choice(pools[u], size=2 * n, replace=False) for u in batch_users])
        fa = feats_all[picks[:, :n]]
        fb = feats_all[picks[:, n:]]
        graph = Graph(lambda g: contrastive_loss(encoder.forward(fa, g), encoder.forward(fb, g),
                                                 encoder.cfg.temperature))
        losses.append(float(ad.evaluate(graph, encoder.params)))
        ad.adamw_step(encoder.params, ad.backward(graph), state, AdamWConfig(lr=cfg.lr))
    return EncoderTrainResult(encoder, losses)


# ---------------------------------------------------------------------------
# Probe


class ProbeClassifier:
    """Linear softmax classifier over frozen user embeddings."""

    def __init__(self, k: int, n_classes: int, seed: int = 0):
        self.params = ParamStore()
        self.params.add("probe.w", stream(seed, "probe-init").standard_normal((k, n_classes)) * 0.01)
        self.params.add("probe.b", np.zeros(n_classes))
        self.mu = np.zeros(k)
        self.sd = np.ones(k)

    def logits(self, emb, graph: Graph | None = None):
        get = graph.param if graph is not None else self.params.__getitem__
        z = (np.asarray(emb) - self.mu) / self.sd
        return z @ get("probe.w") + get("probe.b")

    def fit(self, emb: np.ndarray, labels: np.ndarray, steps: int = 500, lr: float = 5e-2,
            weight_decay: float = 1e-3) -> list[float]:
        emb = np.asarray(emb, dtype=np.float64)
        self.mu = emb.mean(axis=0)
        self.sd = emb.std(axis=0) + 1e-8
        onehot = np.eye(self.params["probe.b"].shape[0])[labels]
        state = AdamWState()
        losses = []
        for _ in range(steps):
            def build(g):
                lg = self.logits(emb, g)
                picked = ad.sum(ad.mul(lg, onehot), axis=-1)
                return ad.mean(ad.sub(ad.logsumexp(lg), picked))
            graph = Graph(build)
            losses.append(float(ad.evaluate(graph, self.params)))
            ad.adamw_step(self.params, ad.backward(graph), state,
                          AdamWConfig(lr=lr, weight_decay=weight_decay))
        return losses


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, ks: Sequence[int]) -> dict[int, float]:
    logits = np.asarray(logits)
    n_classes = logits.shape[1]
    # Ties are broken uniformly at random, in expectation: uniform logits
    # score exactly k / n_classes.
    true = logits[np.arange(len(labels)), labels]
    above = (logits > true[:, None]).sum(axis=1)
    tied = (logits == true[:, None]).sum(axis=1)
    out = {}
    for k in ks:
        if k > n_classes or k < 1:
            raise UserModelError(f"k={k} outside [1, {n_classes}]")
        out[int(k)] = float(np.mean(np.clip((k - above) / tied, 0.0, 1.0)))
    return out


@dataclass
class ProbeResult:
    accuracy: dict[int, float]
    n_users: int
    n_sets: int


def probe_topk_accuracy(encoder: UserEncoder, train_sets: Sequence[FewShotSet],
                        test_sets: Sequence[FewShotSet], user_ids: Sequence[int],
                        ks: Sequence[int] = (1, 4, 16), seed: int = 0,
                        steps: int = 500) -> ProbeResult:
    """Fit a probe on frozen embeddings of ``train_sets``; score ``test_sets``."""
    user_ids = list(user_ids)
    if max(ks) > len(user_ids):
        raise UserModelError(f"k={max(ks)} larger than population of {len(user_ids)}")
    train_keys = {(s.user_id, tuple(s.context_ids), s.x_plus.tobytes()) for s in train_sets}
    for s in test_sets:
        if (s.user_id, tuple(s.context_ids), s.x_plus.tobytes()) in train_keys:
            raise UserModelError("held-out few-shot set also used for probe training")
    label_of = {u: i for i, u in enumerate(user_ids)}
    probe = ProbeClassifier(encoder.cfg.k, len(user_ids), seed)
    probe.fit(encoder.encode(train_sets), np.array([label_of[s.user_id] for s in train_sets]),
              steps=steps)
    logits = probe.logits(encoder.encode(test_sets))
    labels = np.array([label_of[s.user_id] for s in test_sets])
    return ProbeResult(topk_accuracy(logits, labels, ks), len(user_ids), len(test_sets))
