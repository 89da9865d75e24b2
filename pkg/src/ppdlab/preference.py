"""Analytic rewards, simulated users, Bradley-Terry labels and pair datasets."""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import _sigmoid
from .diffusion import Denoiser, World, ddim_sample
from .seeding import stream

FAMILIES = ("align", "magnitude", "smooth")
TIE_TOL = 1e-12


class PreferenceError(ValueError):
    pass


class DatasetFormatError(PreferenceError):
    pass


# ---------------------------------------------------------------------------
# Rewards


@dataclass(frozen=True)
class RewardSpec:
    """One analytic reward family.

    ``align`` needs ``params["map"]`` (d_ctx x d) and ``params["offset"]`` (d,);
    its target for context ``c`` is ``mean(c.tokens) @ map + offset``.
    Any family may carry ``params["scale"]`` (default 1), a multiplier that puts
    the families on comparable footing inside user mixtures.
    """

    family: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise PreferenceError(f"unknown reward family {self.family!r}")

    def target(self, tokens: np.ndarray) -> np.ndarray:
        return tokens.mean(axis=-2) @ self.params["map"] + self.params["offset"]


def default_reward_specs(world: World, seed: int, offset_scale: float = 0.5,
                         calibrate: bool = False) -> list[RewardSpec]:
    """The three reward families for ``world``.

    The align target is the base data mean shifted by a seeded offset. With
    ``calibrate`` each family is scaled so that reward differences between two
    independent base-distribution draws have unit standard deviation.
    """
    # The seeded shift is kept orthogonal to the magnitude (all-ones) and
    # roughness directions (and the roughness gradient) so the three families pull different ways.
    alt = (-1.0) ** np.arange(world.d)
    diff = np.diff(np.eye(world.d), axis=0)
    basis, _ = np.linalg.qr(np.stack([np.ones(world.d), alt, diff.T @ diff @ alt], axis=1))
    shift = stream(seed, "align-offset").standard_normal(world.d)
    shift -= basis @ (basis.T @ shift)
    shift *= offset_scale * math.sqrt(world.d) / np.linalg.norm(shift)
    offset = world.pattern + shift
    specs = [
        RewardSpec("align", {"map": np.array(world.mean_map), "offset": offset}),
        RewardSpec("magnitude"),
        RewardSpec("smooth"),
    ]
    if not calibrate:
        return specs
    rng = stream(seed, "reward-calibration")
    cids = rng.integers(0, 2**31, size=4096)
    tokens = world.tokens(cids)
    xa, xb = world.sample_data(cids, rng), world.sample_data(cids, rng)
    out = []
    for spec in specs:
        sd = float(np.std(eval_reward(spec, tokens, xa) - eval_reward(spec, tokens, xb)))
        out.append(RewardSpec(spec.family, {**spec.params, "scale": np.array([1.0 / sd])}))
    return out


def _tokens_of(c) -> np.ndarray:
    return np.asarray(getattr(c, "tokens", c), dtype=np.float64)


def eval_reward(spec: RewardSpec, c, x) -> np.ndarray | float:
    """Reward of sample(s) ``x`` under context(s) ``c``.

    ``x`` is (d,) or (B, d); ``c`` is a Context, a token matrix, or a (B, n, d_ctx)
    token batch. Returns a float for a single sample.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    if spec.family == "align":
        target = spec.target(_tokens_of(c))
        target = np.broadcast_to(target, xb.shape) if target.ndim == 1 else target
        if target.shape != xb.shape:
            raise PreferenceError(f"align target {target.shape} vs samples {xb.shape}")
        diff = xb - target
        out = -(diff * diff).sum(axis=1)
    elif spec.family == "magnitude":
        out = xb.mean(axis=1)
    else:
        d = np.diff(xb, axis=1)
        out = -(d * d).sum(axis=1)
    if "scale" in spec.params:
        out = out * float(np.asarray(spec.params["scale"]).reshape(-1)[0])
    return float(out[0]) if single else out


@dataclass(frozen=True)
class SyntheticUser:
    user_id: int
    weights: tuple[float, ...]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise PreferenceError(f"user {self.user_id}: weights must be >= 0 and sum to 1")


def user_reward(user: SyntheticUser, c, x, specs: Sequence[RewardSpec]):
    if len(user.weights) != len(specs):
        raise PreferenceError(
            f"user {user.user_id} has {len(user.weights)} weights for {len(specs)} rewards"
        )
    total = 0.0
    for w, spec in zip(user.weights, specs):
        if w:
            total = total + w * eval_reward(spec, c, x)
    if np.ndim(total) == 0 and np.ndim(x) == 2:
        total = np.zeros(np.shape(x)[0])
    return total


def onehot_users(k: int = 3) -> list[SyntheticUser]:
    return [SyntheticUser(i, tuple(float(i == j) for j in range(k))) for i in range(k)]


def random_users(n: int, k: int, seed: int, concentration: float = 0.5) -> list[SyntheticUser]:
    rng = stream(seed, "users")
    return [SyntheticUser(i, tuple(rng.dirichlet(np.full(k, concentration)))) for i in range(n)]


# ---------------------------------------------------------------------------
# Bradley-Terry


@dataclass(frozen=True)
class BTLabel:
    a_preferred: bool
    p_a: float
    tie: bool = False


def bt_probability(r_a, r_b):
    return _sigmoid(np.atleast_1d(np.asarray(r_a, dtype=np.float64) - r_b))


def bt_label(r_a: float, r_b: float, mode: str = "deterministic",
             rng: np.random.Generator | None = None) -> BTLabel:
    """P(a beats b) = logistic(r_a - r_b), plus the chosen ordering.

    Deterministic mode keeps the input order on (near) ties and flags them.
    """
    if not (math.isfinite(r_a) and math.isfinite(r_b)):
        raise PreferenceError("rewards must be finite")
    p = float(bt_probability(r_a, r_b)[0])
    if mode == "deterministic":
        if abs(r_a - r_b) < TIE_TOL:
            return BTLabel(True, p, tie=True)
        return BTLabel(r_a > r_b, p)
    if mode == "stochastic":
        if rng is None:
            raise PreferenceError("stochastic labelling needs a seeded rng")
        return BTLabel(bool(rng.random() < p), p)
    raise PreferenceError(f"unknown label mode {mode!r}")


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class PreferencePair:
    context_id: int
    x_plus: np.ndarray
    x_minus: np.ndarray
    user_id: int
    reward_plus: float
    reward_minus: float
    tie: bool = False


@dataclass
class PreferenceDataset:
    d: int
    seed: int
    label_mode: str
    specs: list[RewardSpec]
    users: list[SyntheticUser]
    pairs: list[PreferencePair] = field(default_factory=list)

    def __post_init__(self):
        ids = {u.user_id for u in self.users}
        if len(ids) != len(self.users):
            raise PreferenceError("duplicate user ids")
        for p in self.pairs:
            if p.user_id not in ids:
                raise PreferenceError(f"pair references unknown user {p.user_id}")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def user_index(self) -> dict[int, list[int]]:
        index: dict[int, list[int]] = {u.user_id: [] for u in self.users}
        for i, p in enumerate(self.pairs):
            index[p.user_id].append(i)
        return index

    def user(self, user_id: int) -> SyntheticUser:
        for u in self.users:
            if u.user_id == user_id:
                return u
        raise KeyError(user_id)

    def subset(self, indices) -> "PreferenceDataset":
        return PreferenceDataset(self.d, self.seed, self.label_mode, self.specs, self.users,
                                 [self.pairs[i] for i in indices])

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "context_id": np.array([p.context_id for p in self.pairs], dtype=np.int64),
            "user_id": np.array([p.user_id for p in self.pairs], dtype=np.int64),
            "x_plus": np.array([p.x_plus for p in self.pairs]).reshape(-1, self.d),
            "x_minus": np.array([p.x_minus for p in self.pairs]).reshape(-1, self.d),
        }


# Maps (context ids (B,), standard normal draws (B, d)) -> candidate samples (B, d).
CandidateSource = Callable[[np.ndarray, np.ndarray], np.ndarray]


def base_distribution_source(world: World) -> CandidateSource:
    def source(cids, noise):
        return world.data_mean(cids) + world.data_scale * noise
    return source


def model_source(model: Denoiser, world: World, n_steps: int) -> CandidateSource:
    """Candidates drawn with the (text-only) reference model's DDIM sampler."""
    def source(cids, noise):
        u0 = np.zeros((len(cids), model.cfg.k_user))
        return ddim_sample(model, world.tokens(cids), u0, n_steps, model.sched,
                           x_T=noise, use_adapter=False)
    return source


def build_dataset(users: Sequence[SyntheticUser], context_ids: Sequence[int],
                  pairs_per_user: int, source: CandidateSource, world: World,
                  specs: Sequence[RewardSpec], mode: str = "deterministic",
                  seed: int = 0) -> PreferenceDataset:
    """Relabel candidate pairs with each user's reward.

    Pair ``j`` of a user uses context ``context_ids[j % len(context_ids)]``. The
    candidate noise and any Bradley-Terry coin flip for that pair come from the
    stream keyed by ``(seed, user_id, context_id, j)``, so the dataset does not
    depend on evaluation order.
    """
    if not users:
        raise PreferenceError("need at least one user")
    if pairs_per_user < 1:
        raise PreferenceError("pairs_per_user must be >= 1")
    context_ids = np.asarray(context_ids, dtype=np.int64)
    d = world.d

    tasks = []
    for user in users:
        for j in range(pairs_per_user):
            tasks.append((user, int(context_ids[j % len(context_ids)]), j))
    noise = np.empty((len(tasks), 2, d))
    rngs = []
    for i, (user, cid, j) in enumerate(tasks):
        rng = stream(seed, "pair", user.user_id, cid, j)
        noise[i] = rng.standard_normal((2, d))
        rngs.append(rng)

    cids = np.array([cid for _, cid, _ in tasks], dtype=np.int64)
    cand = source(np.repeat(cids, 2), noise.reshape(-1, d)).reshape(len(tasks), 2, d)
    tokens = world.tokens(cids)

    pairs = []
    for i, (user, cid, j) in enumerate(tasks):
        r = user_reward(user, tokens[i], cand[i], specs)
        if np.array_equal(cand[i, 0], cand[i, 1]):
            raise PreferenceError(f"identical candidates for user {user.user_id}, pair {j}")
        label = bt_label(float(r[0]), float(r[1]), mode, rngs[i])
        a, b = (0, 1) if label.a_preferred else (1, 0)
        pairs.append(PreferencePair(cid, cand[i, a].copy(), cand[i, b].copy(), user.user_id,
                                    float(r[a]), float(r[b]), label.tie))
    return PreferenceDataset(d, seed, mode, list(specs), list(users), pairs)


# ---------------------------------------------------------------------------
# Persistence

DATA_MAGIC = b"PPDDATA1"
DATA_VERSION = 1
_MODES = {"deterministic": 0, "stochastic": 1}


def dumps_dataset(ds: PreferenceDataset) -> bytes:
    out = io.BytesIO()
    w = out.write
    w(DATA_MAGIC)
    w(struct.pack("<IIQB", DATA_VERSION, ds.d, ds.seed, _MODES[ds.label_mode]))
    w(struct.pack("<I", len(ds.specs)))
    for spec in ds.specs:
        _write_str(w, spec.family)
        w(struct.pack("<I", len(spec.params)))
        for key in sorted(spec.params):
            value = np.asarray(spec.params[key], dtype="<f8")
            _write_str(w, key)
            w(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
            w(value.tobytes())
    w(struct.pack("<I", len(ds.users)))
    for user in ds.users:
        w(struct.pack("<qI", user.user_id, len(user.weights)))
        w(np.asarray(user.weights, dtype="<f8").tobytes())
    w(struct.pack("<Q", len(ds.pairs)))
    for p in ds.pairs:
        w(struct.pack("<qqB", p.context_id, p.user_id, p.tie))
        w(np.asarray(p.x_plus, dtype="<f8").tobytes())
        w(np.asarray(p.x_minus, dtype="<f8").tobytes())
        w(struct.pack("<dd", p.reward_plus, p.reward_minus))
    return out.getvalue()


def loads_dataset(blob: bytes) -> PreferenceDataset:
    from .checkpoint import _Reader

    r = _Reader(blob, DatasetFormatError)
    if r.take(len(DATA_MAGIC)) != DATA_MAGIC:
        raise DatasetFormatError("bad magic at offset 0: not a dataset file")
    version, d, seed, mode = r.unpack("<IIQB")
    if version != DATA_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    modes = {v: k for k, v in _MODES.items()}
    if mode not in modes:
        raise DatasetFormatError(f"unknown label mode code {mode} at offset {r.pos - 1}")
    specs = []
    for _ in range(r.unpack("<I")[0]):
        family = _read_str(r)
        params = {}
        for _ in range(r.unpack("<I")[0]):
            key = _read_str(r)
            (rank,) = r.unpack("<I")
            dims = r.unpack(f"<{rank}I")
            n = int(np.prod(dims)) if rank else 1
            params[key] = np.frombuffer(r.take(8 * n), "<f8").astype(np.float64).reshape(dims)
        try:
            specs.append(RewardSpec(family, params))
        except PreferenceError as exc:
            raise DatasetFormatError(f"{exc} (before offset {r.pos})") from None
    users = []
    for _ in range(r.unpack("<I")[0]):
        uid, k = r.unpack("<qI")
        users.append(SyntheticUser(uid, tuple(np.frombuffer(r.take(8 * k), "<f8").tolist())))
    pairs = []
    for _ in range(r.unpack("<Q")[0]):
        cid, uid, tie = r.unpack("<qqB")
        xp = np.frombuffer(r.take(8 * d), "<f8").astype(np.float64)
        xm = np.frombuffer(r.take(8 * d), "<f8").astype(np.float64)
        rp, rm = r.unpack("<dd")
        pairs.append(PreferencePair(cid, xp, xm, uid, rp, rm, bool(tie)))
    if r.pos != len(blob):
        raise DatasetFormatError(f"trailing bytes at offset {r.pos}")
    return PreferenceDataset(d, seed, modes[mode], specs, users, pairs)


def save_dataset(ds: PreferenceDataset, path: str | Path) -> None:
    Path(path).write_bytes(dumps_dataset(ds))


def load_dataset(path: str | Path) -> PreferenceDataset:
    return loads_dataset(Path(path).read_bytes())


def dataset_csv(ds: PreferenceDataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["user_id", "context_id", "reward_plus", "reward_minus", "label_mode"])
    for p in ds.pairs:
        writer.writerow([p.user_id, p.context_id, repr(p.reward_plus), repr(p.reward_minus),
                         ds.label_mode])
    return buf.getvalue()


def _write_str(w, s: str) -> None:
    raw = s.encode("utf-8")
    w(struct.pack("<I", len(raw)))
    w(raw)


def _read_str(r) -> str:
    (n,) = r.unpack("<I")
    return r.take(n).decode("utf-8")
