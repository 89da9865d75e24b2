"""Reward-judged evaluation: mean scores, win rates, interpolation sweeps, held-out users."""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .diffusion import Denoiser, World, ddim_sample
from .preference import TIE_TOL, RewardSpec, SyntheticUser, eval_reward, user_reward
from .seeding import stream
from .users import FewShotSet, UserEncoder, interpolate_users


class EvaluationError(ValueError):
    pass


class SplitLeakageError(EvaluationError):
    pass


# (tokens (B, n, d_ctx), u (B, k), x_T (B, d)) -> samples (B, d)
Generator = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def model_generator(model: Denoiser, n_steps: int = 30) -> Generator:
    def gen(tokens, u, x_T):
        return ddim_sample(model, tokens, u, n_steps, model.sched, x_T=x_T)
    return gen


def eval_noise(seed: int, context_ids, d: int, replicate: int = 0) -> np.ndarray:
    """Starting noise for each context; shared by every condition using ``seed``."""
    return np.array([stream(seed, "eval-noise", int(c), replicate).standard_normal(d)
                     for c in context_ids])


def _broadcast_u(u, n: int) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    return np.broadcast_to(u, (n, u.shape[-1])) if u.ndim == 1 else u


def binomial_ci(successes: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Two-sided Clopper-Pearson interval."""
    if n == 0:
        return 0.0, 1.0
    ci = stats.binomtest(successes, n).proportion_ci(confidence_level=level, method="exact")
    return float(ci.low), float(ci.high)


# ---------------------------------------------------------------------------
# Mean scores


@dataclass
class EvalReport:
    condition: str
    families: list[str]
    scores: np.ndarray  # (n_samples, n_families)
    seed: int
    digest: str = ""

    @property
    def n(self) -> int:
        return self.scores.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.scores.mean(axis=0)

    @property
    def se(self) -> np.ndarray:
        return self.scores.std(axis=0, ddof=1) / np.sqrt(self.n) if self.n > 1 else np.zeros(len(self.families))

    def rows(self) -> list[tuple]:
        return [(self.condition, f, float(m), float(s), self.n)
                for f, m, s in zip(self.families, self.mean, self.se)]


def score_generations(gen: Generator, world: World, context_ids: Sequence[int], u,
                      specs: Sequence[RewardSpec], n_per_context: int = 1, seed: int = 0,
                      condition: str = "") -> EvalReport:
    if len(context_ids) == 0:
        raise EvaluationError("empty context set")
    if n_per_context < 1:
        raise EvaluationError("n_per_context must be >= 1")
    cids = np.asarray(context_ids, dtype=np.int64)
    tokens = world.tokens(cids)
    uu = _broadcast_u(u, len(cids))
    blocks = []
    for rep in range(n_per_context):
        x = gen(tokens, uu, eval_noise(seed, cids, world.d, rep))
        blocks.append(np.stack([eval_reward(s, tokens, x) for s in specs], axis=1))
    return EvalReport(condition, [s.family for s in specs], np.concatenate(blocks), seed)


def scores_csv(reports: Sequence[EvalReport]) -> str:
    return csv_text(["condition", "family", "mean", "se", "n"],
                [row for r in reports for row in r.rows()])


# ---------------------------------------------------------------------------
# Win rates


@dataclass
class WinRateResult:
    wins: int
    losses: int
    ties: int
    records: list[tuple] = field(default_factory=list)  # (context_id, reward_a, reward_b)

    @property
    def rate(self) -> float:
        decided = self.wins + self.losses
        return self.wins / decided if decided else 0.5

    @property
    def n(self) -> int:
        return self.wins + self.losses

    def ci(self, level: float = 0.95) -> tuple[float, float]:
        return binomial_ci(self.wins, self.n, level)

    def swapped(self) -> "WinRateResult":
        return WinRateResult(self.losses, self.wins, self.ties,
                             [(c, b, a) for c, a, b in self.records])

    def merge(self, other: "WinRateResult") -> "WinRateResult":
        return WinRateResult(self.wins + other.wins, self.losses + other.losses,
                             self.ties + other.ties, self.records + other.records)


def judge_pairs(context_ids, reward_a: np.ndarray, reward_b: np.ndarray) -> WinRateResult:
    diff = reward_a - reward_b
    ties = np.abs(diff) < TIE_TOL
    wins = int(np.sum((diff > 0) & ~ties))
    losses = int(np.sum((diff < 0) & ~ties))
    records = [(int(c), float(a), float(b)) for c, a, b in zip(context_ids, reward_a, reward_b)]
    return WinRateResult(wins, losses, int(ties.sum()), records)


def win_rate(gen_a: Generator, gen_b: Generator, world: World, context_ids: Sequence[int],
             judge: SyntheticUser, specs: Sequence[RewardSpec], u_a, u_b,
             seed: int = 0, seed_b: int | None = None) -> WinRateResult:
    """One sample per context from each side; the higher user reward wins.

    Side B uses ``seed_b`` for its starting noise (default: the same as A, so
    both sides start from identical noise).
    """
    if len(context_ids) == 0:
        raise EvaluationError("empty context set")
    cids = np.asarray(context_ids, dtype=np.int64)
    tokens = world.tokens(cids)
    xa = gen_a(tokens, _broadcast_u(u_a, len(cids)), eval_noise(seed, cids, world.d))
    xb = gen_b(tokens, _broadcast_u(u_b, len(cids)),
               eval_noise(seed if seed_b is None else seed_b, cids, world.d))
    return judge_pairs(cids, user_reward(judge, tokens, xa, specs),
                       user_reward(judge, tokens, xb, specs))


def winrate_csv(results: dict[str, WinRateResult]) -> str:
    return csv_text(["split", "wins", "losses", "ties", "rate"],
                [(k, r.wins, r.losses, r.ties, r.rate) for k, r in results.items()])


# ---------------------------------------------------------------------------
# Interpolation


@dataclass
class InterpolationSweep:
    grid: np.ndarray  # (G, k)
    families: list[str]
    mean: np.ndarray  # (G, F)
    se: np.ndarray
    n: int
    warnings: list[str] = field(default_factory=list)


def edge_grid(i: int, j: int, k: int = 3, points: int = 5) -> np.ndarray:
    """Weights moving linearly from one-hot ``e_i`` to ``e_j``."""
    s = np.linspace(0.0, 1.0, points)
    grid = np.zeros((points, k))
    grid[:, i] = 1.0 - s
    grid[:, j] = s
    return grid


def interpolation_sweep(gen: Generator, world: World, weight_grid, context_ids: Sequence[int],
                        specs: Sequence[RewardSpec], seed: int = 0) -> InterpolationSweep:
    grid = np.asarray(weight_grid, dtype=np.float64)
    k = grid.shape[1]
    notes = []
    for i in range(k):
        e = np.eye(k)[i]
        if not any(np.array_equal(row, e) for row in grid):
            notes.append(f"weight grid lacks the one-hot endpoint e_{i}")
    reports = [score_generations(gen, world, context_ids, interpolate_users(w, k), specs, seed=seed)
               for w in grid]
    return InterpolationSweep(grid, [s.family for s in specs],
                              np.array([r.mean for r in reports]),
                              np.array([r.se for r in reports]), reports[0].n, notes)


def sweep_csv(sweep: InterpolationSweep) -> str:
    rows = []
    for w, means, ses in zip(sweep.grid, sweep.mean, sweep.se):
        for fam, m, s in zip(sweep.families, means, ses):
            rows.append((*[float(x) for x in w], fam, float(m), float(s)))
    header = [f"w{i + 1}" for i in range(sweep.grid.shape[1])] + ["family", "mean", "se"]
    return csv_text(header, rows)


def spearman(x, y) -> float:
    return float(stats.spearmanr(x, y).statistic)


# ---------------------------------------------------------------------------
# Held-out users


@dataclass
class UserSplits:
    """Who and what was used for training versus testing.

    ``train_pairs`` are dataset indices used for fitting (encoder and
    alignment). ``eval_sets`` are the few-shot sets that condition generation
    at test time, per user; ``test_contexts`` are the prompts generated for.
    """

    seen_users: list[int]
    unseen_users: list[int]
    train_pairs: set[int]
    train_contexts: set[int]
    test_contexts: list[int]
    eval_sets: dict[int, list[FewShotSet]]
    eval_pair_ids: dict[int, list[list[int]]]

    def check(self) -> None:
        overlap = set(self.seen_users) & set(self.unseen_users)
        if overlap:
            raise SplitLeakageError(f"users {sorted(overlap)} are both seen and unseen")
        ctx = self.train_contexts & set(self.test_contexts)
        if ctx:
            raise SplitLeakageError(f"test contexts {sorted(ctx)[:5]} also used in training")
        for uid, groups in self.eval_pair_ids.items():
            for group in groups:
                leaked = self.train_pairs & set(group)
                if leaked:
                    raise SplitLeakageError(
                        f"pair(s) {sorted(leaked)} of user {uid} appear in train and test")


def heldout_user_eval(gen_policy: Generator, gen_base: Generator, world: World,
                      encoder: UserEncoder, users: dict[int, SyntheticUser], splits: UserSplits,
                      specs: Sequence[RewardSpec], seed: int = 0,
                      contexts_per_user: int | None = None) -> dict[str, WinRateResult]:
    """Win rate of user-conditioned generation against the zero-conditioned model.

    For every (user, test context) judgment, the user embedding is encoded
    from one of that user's held-out few-shot sets (cycled), and both sides
    start from the same noise.
    """
    splits.check()
    k = encoder.cfg.k
    results = {}
    for split, group in (("seen", splits.seen_users), ("unseen", splits.unseen_users)):
        total = WinRateResult(0, 0, 0)
        for uid in group:
            sets = splits.eval_sets[uid]
            if not sets:
                raise EvaluationError(f"user {uid} has no held-out few-shot set")
            rng = stream(seed, "heldout-contexts", uid)
            cids = np.asarray(splits.test_contexts)
            if contexts_per_user is not None:
                cids = np.sort(rng.choice(cids, size=contexts_per_user, replace=False))
            emb = encoder.encode(sets)
            u = emb[np.arange(len(cids)) % len(sets)]
            res = win_rate(gen_policy, gen_base, world, cids, users[uid], specs, u,
                           np.zeros(k), seed=seed)
            total = total.merge(res)
        results[split] = total
    results["all"] = results["seen"].merge(results["unseen"])
    return results


def config_digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else repr(p).encode("utf-8"))
    return h.hexdigest()


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(x) if isinstance(x, float) else x for x in row])
    return buf.getvalue()
