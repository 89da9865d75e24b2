"""Noise schedule, toy data world, conditional denoiser and DDIM sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import AdamWConfig, AdamWState, Graph, ParamStore
from .seeding import stream

ALPHA_FLOOR = 1e-3
COSINE_OFFSET = 0.008


class DiffusionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Schedule


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    kind: str
    alpha: np.ndarray
    sigma: np.ndarray
    lam: np.ndarray
    omega: np.ndarray

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise DiffusionError(f"timestep out of range [0, {self.T}]")
        return t.astype(np.int64)


def _constant_weight(lam: np.ndarray) -> np.ndarray:
    return np.ones_like(lam)


def build_schedule(
    T: int,
    kind: str = "cosine",
    omega: Callable[[np.ndarray], np.ndarray] = _constant_weight,
) -> NoiseSchedule:
    """Variance-preserving schedule tables for t = 0..T.

    t = 0 is the clean data point (alpha = 1, sigma = 0). For t >= 1 alpha is
    floored at 1e-3 so the sampler can always divide by it.
    """
    if T < 2:
        raise DiffusionError("T must be at least 2")
    s = np.arange(T + 1, dtype=np.float64) / T
    if kind == "cosine":
        alpha = np.cos((s + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2)
        alpha = np.clip(alpha, ALPHA_FLOOR, 1.0)
        alpha[0] = 1.0
        sigma = np.sqrt(1.0 - alpha**2)
    elif kind == "linear-snr":
        lam_max, lam_min = 10.0, math.log(ALPHA_FLOOR**2 / (1 - ALPHA_FLOOR**2))
        lam = lam_max + (lam_min - lam_max) * (np.arange(T + 1) - 1) / (T - 1)
        alpha = np.maximum(np.sqrt(1.0 / (1.0 + np.exp(-lam))), ALPHA_FLOOR)
        alpha[0] = 1.0
        sigma = np.sqrt(1.0 - alpha**2)
    else:
        raise DiffusionError(f"unknown schedule kind {kind!r}")
    with np.errstate(divide="ignore"):
        lam = np.log(alpha**2) - np.log(sigma**2)
    w = np.asarray(omega(lam), dtype=np.float64)
    w[0] = w[1]  # t = 0 is never trained on; keep the table finite
    return NoiseSchedule(T, kind, alpha, sigma, lam, w)


def forward_diffuse(x0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """``alpha_t * x0 + sigma_t * eps``; ``t`` may be a scalar or one per row."""
    t = sched.check_t(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise DiffusionError(f"x0 {x0.shape} and eps {eps.shape} differ in shape")
    a = sched.alpha[t]
    s = sched.sigma[t]
    if np.ndim(t):
        a, s = a[:, None], s[:, None]
    return a * x0 + s * eps


# ---------------------------------------------------------------------------
# Contexts and the base data distribution


@dataclass(frozen=True)
class Context:
    id: int
    tokens: np.ndarray


@dataclass(frozen=True)
class World:
    """Seeded stand-in for prompts and pretraining data.

    Context ``c`` gets a fixed token matrix; its clean data is Gaussian around
    a linear read-out of the pooled tokens plus a shared alternating-sign
    pattern of size ``roughness``.
    """

    d: int = 8
    d_ctx: int = 8
    n_tokens: int = 4
    data_scale: float = 0.5
    roughness: float = 0.5
    seed: int = 0

    def context(self, cid: int) -> Context:
        return Context(int(cid), _context_tokens(self.seed, self.n_tokens, self.d_ctx, int(cid)))

    def tokens(self, cids) -> np.ndarray:
        return np.stack([self.context(c).tokens for c in np.atleast_1d(cids)])

    @property
    def mean_map(self) -> np.ndarray:
        return _mean_map(self.seed, self.d_ctx, self.d)

    @property
    def pattern(self) -> np.ndarray:
        return self.roughness * (-1.0) ** np.arange(self.d)

    def data_mean(self, cids) -> np.ndarray:
        return self.tokens(cids).mean(axis=1) @ self.mean_map + self.pattern

    def sample_data(self, cids, rng: np.random.Generator) -> np.ndarray:
        mu = self.data_mean(cids)
        return mu + self.data_scale * rng.standard_normal(mu.shape)


@lru_cache(maxsize=65536)
def _context_tokens(seed: int, n_tokens: int, d_ctx: int, cid: int) -> np.ndarray:
    tok = stream(seed, "context", cid).standard_normal((n_tokens, d_ctx))
    tok.setflags(write=False)
    return tok


@lru_cache(maxsize=64)
def _mean_map(seed: int, d_ctx: int, d: int) -> np.ndarray:
    m = stream(seed, "mean-map").standard_normal((d_ctx, d)) * (2.0 / math.sqrt(d_ctx))
    m.setflags(write=False)
    return m


# ---------------------------------------------------------------------------
# Denoiser


@dataclass(frozen=True)
class ModelConfig:
    d: int = 8
    d_ctx: int = 8
    k_user: int = 3
    n_query: int = 4
    d_model: int = 16
    d_head: int = 16
    hidden: int = 64
    t_features: int = 8

    def __post_init__(self):
        if self.t_features % 2:
            raise DiffusionError("t_features must be even")


ADAPTER_PREFIX = "user_attn."


def init_params(cfg: ModelConfig, seed: int) -> ParamStore:
    rng = stream(seed, "init")
    nq_dm = cfg.n_query * cfg.d_model

    def dense(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)

    p = ParamStore()
    p.add("backbone.in.w", dense(cfg.d + cfg.t_features, nq_dm))
    p.add("backbone.in.b", np.zeros(nq_dm))
    p.add("text_attn.wq", dense(cfg.d_model, cfg.d_head))
    p.add("text_attn.wk", dense(cfg.d_ctx, cfg.d_head))
    p.add("text_attn.wv", dense(cfg.d_ctx, cfg.d_model))
    p.add("backbone.mid.w", dense(nq_dm + cfg.t_features, cfg.hidden))
    p.add("backbone.mid.b", np.zeros(cfg.hidden))
    p.add("backbone.out.w", dense(cfg.hidden, cfg.d) * 0.1)
    p.add("backbone.out.b", np.zeros(cfg.d))
    p.add(ADAPTER_PREFIX + "wk", dense(cfg.k_user, cfg.d_head))
    # Zero value projection: a fresh adapter leaves the model unchanged.
    p.add(ADAPTER_PREFIX + "wv", np.zeros((cfg.k_user, cfg.d_model)))
    return p


class Denoiser:
    """epsilon-prediction network with decoupled text/user cross-attention.

    The MLP head produces a velocity-style output ``v`` and the returned noise
    estimate is ``sigma_t * x_t + alpha_t * v``. This keeps the implied clean
    estimate ``(x_t - sigma_t * eps_hat) / alpha_t = alpha_t * x_t - sigma_t * v``
    well conditioned at the tiny alpha values near t = T.
    """

    def __init__(self, cfg: ModelConfig, params: ParamStore, sched: NoiseSchedule):
        self.cfg = cfg
        self.params = params
        self.sched = sched

    @property
    def T(self) -> int:
        return self.sched.T

    @classmethod
    def create(cls, cfg: ModelConfig, sched: NoiseSchedule, seed: int = 0) -> "Denoiser":
        return cls(cfg, init_params(cfg, seed), sched)

    def copy(self) -> "Denoiser":
        return Denoiser(self.cfg, self.params.copy(), self.sched)

    def with_user_dim(self, k_user: int, seed: int = 0) -> "Denoiser":
        """Copy with a fresh (zero-valued) adapter sized for ``k_user``-dim embeddings."""
        cfg = replace(self.cfg, k_user=k_user)
        fresh = init_params(cfg, seed)
        params = ParamStore()
        for name, value in self.params.items():
            source = fresh if name.startswith(ADAPTER_PREFIX) else self.params
            params.add(name, source[name].copy(), self.params.is_trainable(name))
        return Denoiser(cfg, params, self.sched)

    def adapter_names(self) -> list[str]:
        return [n for n in self.params if n.startswith(ADAPTER_PREFIX)]

    def freeze_backbone(self) -> None:
        self.params.set_trainable(lambda n: n.startswith(ADAPTER_PREFIX))

    def time_features(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        freqs = math.pi * 2.0 ** np.arange(self.cfg.t_features // 2)
        ang = (t / self.T)[:, None] * freqs
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    def __call__(self, x_t, tokens, u, t, graph: Graph | None = None, use_adapter: bool = True):
        cfg = self.cfg
        get = graph.param if graph is not None else self.params.__getitem__
        x_t = np.asarray(x_t, dtype=np.float64) if not isinstance(x_t, ad.Node) else x_t
        batch = ad.value_of(x_t).shape[0]
        if ad.value_of(x_t).shape != (batch, cfg.d):
            raise DiffusionError(f"x_t must have shape (B, {cfg.d}), got {ad.value_of(x_t).shape}")
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim != 3 or tokens.shape[0] != batch or tokens.shape[2] != cfg.d_ctx:
            raise DiffusionError(f"context tokens must be (B, n, {cfg.d_ctx}), got {tokens.shape}")
        t = self.sched.check_t(np.broadcast_to(np.asarray(t), (batch,)))
        tf = self.time_features(t)

        h = ad.silu(ad.concat([x_t, tf]) @ get("backbone.in.w") + get("backbone.in.b"))
        z = ad.reshape(h, (batch, cfg.n_query, cfg.d_model))
        u_tokens = None
        if use_adapter:
            u = np.asarray(u, dtype=np.float64)
            if u.shape != (batch, cfg.k_user):
                raise DiffusionError(f"user embedding must be (B, {cfg.k_user}), got {u.shape}")
            u_tokens = u[:, None, :]
        attn = decoupled_cross_attention(
            ad.layer_norm(z), tokens, u_tokens,
            {
                "wq": get("text_attn.wq"),
                "wk": get("text_attn.wk"),
                "wv": get("text_attn.wv"),
                "wk_user": get(ADAPTER_PREFIX + "wk"),
                "wv_user": get(ADAPTER_PREFIX + "wv"),
            },
        )
        z = z + attn
        flat = ad.concat([ad.reshape(z, (batch, cfg.n_query * cfg.d_model)), tf])
        h2 = ad.silu(flat @ get("backbone.mid.w") + get("backbone.mid.b"))
        v = h2 @ get("backbone.out.w") + get("backbone.out.b")
        return self.sched.sigma[t][:, None] * x_t + self.sched.alpha[t][:, None] * v


def decoupled_cross_attention(z, c_tokens, u_tokens, params):
    """Text cross-attention plus a separate user cross-attention term.

    Both terms share the query ``z @ wq``. Passing ``u_tokens=None`` drops the
    user term entirely (the adapter-free model).
    """
    q = ad.matmul(z, params["wq"])
    k = ad.matmul(c_tokens, params["wk"])
    v = ad.matmul(c_tokens, params["wv"])
    out = ad.attention(q, k, v)
    if u_tokens is not None:
        k_u = ad.matmul(u_tokens, params["wk_user"])
        v_u = ad.matmul(u_tokens, params["wv_user"])
        out = ad.add(out, ad.attention(q, k_u, v_u))
    return out


def denoise_predict(model: Denoiser, x_t, tokens, u, t, graph: Graph | None = None):
    """Predicted noise; ``u`` is (B, k) and may be all zeros."""
    return model(x_t, tokens, u, t, graph=graph)


def denoising_loss(model: Denoiser, x0, tokens, u, sched: NoiseSchedule,
                   rng: np.random.Generator | None = None, *, t=None, eps=None,
                   graph: Graph | None = None, use_adapter: bool = True):
    """Batch mean of ``omega(lambda_t) * ||eps - eps_hat||^2``.

    ``t`` and ``eps`` are drawn from ``rng`` unless given explicitly.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise DiffusionError("denoising_loss needs a non-empty (B, d) batch")
    batch = x0.shape[0]
    if t is None:
        t = rng.integers(1, sched.T + 1, size=batch)
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    t = sched.check_t(t)
    x_t = forward_diffuse(x0, t, eps, sched)
    pred = model(x_t, tokens, u, t, graph=graph, use_adapter=use_adapter)
    err = ad.squared_error(eps, pred)
    return ad.mean(ad.mul(err, sched.omega[t]))


def ddim_timesteps(T: int, n_steps: int) -> np.ndarray:
    if not 1 <= n_steps <= T:
        raise DiffusionError(f"n_steps must lie in [1, {T}], got {n_steps}")
    return np.round(np.linspace(T, 0, n_steps + 1)).astype(np.int64)


def ddim_sample(model: Denoiser, tokens, u, n_steps: int, sched: NoiseSchedule,
                seed: int | None = None, x_T: np.ndarray | None = None,
                eta: float = 0.0, use_adapter: bool = True) -> np.ndarray:
    """Deterministic DDIM from ``x_T`` (drawn from ``seed`` if not given)."""
    if eta != 0.0:
        raise DiffusionError("only deterministic sampling (eta = 0) is supported")
    tokens = np.asarray(tokens, dtype=np.float64)
    batch = tokens.shape[0]
    if x_T is None:
        x_T = stream(seed if seed is not None else 0, "ddim").standard_normal((batch, model.cfg.d))
    x = np.array(x_T, dtype=np.float64)
    steps = ddim_timesteps(sched.T, n_steps)
    for t, t_prev in zip(steps[:-1], steps[1:]):
        a, s = sched.alpha[t], sched.sigma[t]
        if a < ALPHA_FLOOR:
            raise DiffusionError(f"alpha_t={a} below floor at t={t}")
        eps_hat = model(x, tokens, u, np.full(batch, t), use_adapter=use_adapter)
        x0_hat = (x - s * eps_hat) / a
        x = sched.alpha[t_prev] * x0_hat + sched.sigma[t_prev] * eps_hat
    return x


# ---------------------------------------------------------------------------
# Pretraining


@dataclass
class PretrainConfig:
    steps: int = 4000
    batch: int = 128
    lr: float = 2e-3
    weight_decay: float = 0.0
    n_contexts: int = 100000
    seed: int = 0


@dataclass
class PretrainResult:
    model: Denoiser
    losses: list[float] = field(default_factory=list)


def pretrain(model: Denoiser, world: World, sched: NoiseSchedule,
             cfg: PretrainConfig) -> PretrainResult:
    """Fit the text-conditioned backbone with the plain denoising loss.

    The user adapter stays frozen (it sees u = 0 here anyway).
    """
    model.params.set_trainable(lambda n: not n.startswith(ADAPTER_PREFIX))
    state = AdamWState()
    losses = []
    zeros_u = np.zeros((cfg.batch, model.cfg.k_user))
    for step in range(cfg.steps):
        rng = stream(cfg.seed, "pretrain", step)
        cids = rng.integers(0, cfg.n_contexts, size=cfg.batch)
        tokens = world.tokens(cids)
        x0 = world.sample_data(cids, rng)
        t = rng.integers(1, sched.T + 1, size=cfg.batch)
        eps = rng.standard_normal(x0.shape)
        # cosine decay keeps the final model less noisy
        lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * step / cfg.steps))
        graph = Graph(lambda g: denoising_loss(model, x0, tokens, zeros_u, sched,
                                               t=t, eps=eps, graph=g, use_adapter=False))
        losses.append(float(ad.evaluate(graph, model.params)))
        grads = ad.backward(graph)
        ad.adamw_step(model.params, grads, state, AdamWConfig(lr=lr, weight_decay=cfg.weight_decay))
    model.params.set_trainable(lambda n: True)
    return PretrainResult(model, losses)
