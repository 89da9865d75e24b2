"""Stage runner behind the command line.

A run directory holds the artifacts of one (config, seed) pair plus
``manifest.json``. Each stage has a lineage digest: a hash of the config keys
it reads and of its upstream stages' digests. A stage refuses inputs whose
recorded lineage or content hash disagrees with what the current config
implies, so artifacts from incompatible settings never mix.

Outputs are written to a staging directory first and moved into place only
when the whole stage succeeds; a failed stage leaves its partial files in
``<stage>.quarantine``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from .alignment import OneHotSource, TableSource, TrainConfig, history_csv, train
from .config import ExperimentConfig
from .diffusion import Denoiser, ModelConfig, PretrainConfig, World, build_schedule, pretrain
from .evaluation import (
    EvaluationError,
    UserSplits,
    WinRateResult,
    csv_text,
    edge_grid,
    eval_noise,
    heldout_user_eval,
    interpolation_sweep,
    model_generator,
    score_generations,
    scores_csv,
    spearman,
    sweep_csv,
    win_rate,
    winrate_csv,
)
from .preference import (
    PreferenceDataset,
    build_dataset,
    dataset_csv,
    default_reward_specs,
    dumps_dataset,
    load_dataset,
    model_source,
    onehot_users,
    random_users,
)
from .seeding import stream
from .users import (
    EncoderConfig,
    EncoderTrainConfig,
    UserEncoder,
    few_shot_sets,
    probe_topk_accuracy,
    train_encoder,
)

log = logging.getLogger(__name__)

STAGES = ("pretrain", "gen-data", "train-encoder", "align", "sample", "eval-scores",
          "eval-winrate", "sweep", "probe", "heldout-eval")
MULTIREWARD_STAGES = ("pretrain", "gen-data", "align", "sample", "eval-scores", "eval-winrate",
                      "sweep")
FEWSHOT_STAGES = ("pretrain", "gen-data", "train-encoder", "align", "eval-scores",
                  "eval-winrate", "probe", "heldout-eval")

_WORLD_KEYS = ["seed", "data.d", "data.d_ctx", "data.n_tokens", "data.data_scale",
               "data.roughness"]
_OWN_KEYS = {
    # data.users and encoder.k fix the adapter width stored in the base checkpoint
    "pretrain": _WORLD_KEYS + ["data.users", "encoder.k", "model", "schedule", "pretrain"],
    "gen-data": ["data", "encoder.n_shots"],
    "train-encoder": ["encoder"],
    "align": ["train"],
}


class StageError(RuntimeError):
    pass


class MissingInputError(StageError):
    pass


class DigestMismatchError(StageError):
    pass


class DimensionError(StageError):
    pass


def upstream(cfg: ExperimentConfig, stage: str) -> tuple[str, ...]:
    mixture = cfg.data.users == "mixture"
    enc = ("train-encoder",) if mixture else ()
    return {
        "pretrain": (),
        "gen-data": ("pretrain",),
        "train-encoder": ("gen-data",),
        "align": ("gen-data",) + enc,
        "sample": ("align",) + enc,
        "eval-scores": ("align",) + enc,
        "eval-winrate": ("align",) + enc,
        "sweep": ("align",),
        "probe": ("train-encoder",),
        "heldout-eval": ("align", "train-encoder"),
    }[stage]


def lineage_digest(cfg: ExperimentConfig, stage: str) -> str:
    h = hashlib.sha256(stage.encode())
    h.update(cfg.canonical(_OWN_KEYS.get(stage, ["eval"])).encode())
    for up in upstream(cfg, stage):
        h.update(lineage_digest(cfg, up).encode())
    return h.hexdigest()


def run_dir_for(out: str | Path | None, cfg: ExperimentConfig) -> Path:
    base = Path(out if out is not None else os.environ.get("PPD_OUT_DIR", "runs"))
    return base / f"{cfg.digest()[:12]}-seed{cfg.seed}"


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Shared objects derived from the config


@dataclass
class Lab:
    cfg: ExperimentConfig
    run_dir: Path
    manifest: dict = field(default_factory=dict)

    @cached_property
    def world(self) -> World:
        d = self.cfg.data
        return World(d.d, d.d_ctx, d.n_tokens, d.data_scale, d.roughness, self.cfg.seed)

    @cached_property
    def sched(self):
        return build_schedule(self.cfg.schedule.T, self.cfg.schedule.kind)

    @cached_property
    def specs(self):
        return default_reward_specs(self.world, self.cfg.seed, self.cfg.data.offset_scale,
                                    calibrate=self.cfg.data.calibrate)

    @cached_property
    def users(self):
        d = self.cfg.data
        if d.users == "onehot":
            if d.n_users != len(self.specs):
                raise StageError(f"one-hot users need n_users = {len(self.specs)}, "
                                 f"got {d.n_users}")
            return onehot_users(len(self.specs))
        return random_users(d.n_users, len(self.specs), self.cfg.seed, d.concentration)

    def model_config(self, k_user: int) -> ModelConfig:
        m, d = self.cfg.model, self.cfg.data
        return ModelConfig(d.d, d.d_ctx, k_user, m.n_query, m.d_model, m.d_head, m.hidden,
                           m.t_features)

    def encoder_config(self) -> EncoderConfig:
        e, d = self.cfg.encoder, self.cfg.data
        return EncoderConfig(d.d, d.d_ctx, e.k, e.hidden, e.n_shots, e.temperature)

    def context_feature(self, cids):
        return self.world.tokens(cids).mean(axis=1)

    @property
    def eval_contexts(self) -> np.ndarray:
        e = self.cfg.eval
        return np.arange(e.context_offset, e.context_offset + e.n_contexts)

    # -- inputs ------------------------------------------------------------

    def input_path(self, name: str) -> Path:
        path = self.run_dir / name
        if not path.is_file():
            raise MissingInputError(f"missing input {path}")
        return path

    def verify(self, stage: str) -> None:
        """Check that upstream artifacts belong to this config's lineage."""
        for up in upstream(self.cfg, stage):
            entry = self.manifest.get("stages", {}).get(up)
            if entry is None:
                raise MissingInputError(f"stage {up!r} has not been run in {self.run_dir}")
            want = lineage_digest(self.cfg, up)
            if entry["digest"] != want:
                raise DigestMismatchError(
                    f"{up} artifacts in {self.run_dir} have digest {entry['digest'][:12]}, "
                    f"this config expects {want[:12]}")
            for name, recorded in entry["artifacts"].items():
                actual = sha256_file(self.input_path(name))
                if actual != recorded:
                    raise DigestMismatchError(f"{self.run_dir / name} content hash "
                                              f"{actual[:12]} != manifest {recorded[:12]}")

    def load_base(self) -> Denoiser:
        params = checkpoint.load(self.input_path("base.ckpt"))
        return Denoiser(self.model_config(self.cfg.k_user), params, self.sched)

    def load_policy(self) -> Denoiser:
        params = checkpoint.load(self.input_path("policy.ckpt"))
        return Denoiser(self.model_config(self.cfg.k_user), params, self.sched)

    def load_dataset(self) -> PreferenceDataset:
        return load_dataset(self.input_path("dataset.ppd"))

    def load_splits(self) -> dict:
        raw = json.loads(self.input_path("splits.json").read_text())
        raw["partition"] = {int(k): v for k, v in raw["partition"].items()}
        return raw

    def load_encoder(self) -> UserEncoder:
        params = checkpoint.load(self.input_path("encoder.ckpt"))
        return UserEncoder(self.encoder_config(), params, self.context_feature)

    # -- user embeddings ----------------------------------------------------

    def eval_conditions(self, encoder: UserEncoder | None, ds: PreferenceDataset | None,
                        splits: dict | None) -> dict[str, np.ndarray]:
        """Named user embeddings evaluated by sample / eval-scores."""
        k = self.cfg.k_user
        conds = {"zero": np.zeros(k)}
        if self.cfg.data.users == "onehot":
            for i in range(k):
                conds[f"user{i}"] = np.eye(k)[i]
            conds["uniform"] = np.full(k, 1.0 / k)
            return conds
        for user in self.users:
            sets = self.test_sets(ds, splits, user.user_id)
            conds[f"user{user.user_id}"] = encoder.encode(sets[:1])[0]
        return conds

    def test_sets(self, ds, splits, uid):
        n = self.cfg.encoder.n_shots
        return few_shot_sets(ds, uid, n, splits["partition"][uid]["test"], self.cfg.seed)


# ---------------------------------------------------------------------------
# Stages. Each returns {file name: bytes or str}.


def stage_pretrain(lab: Lab) -> dict:
    cfg = lab.cfg
    model = Denoiser.create(lab.model_config(cfg.k_user), lab.sched, cfg.seed)
    p = cfg.pretrain
    res = pretrain(model, lab.world, lab.sched,
                   PretrainConfig(steps=p.steps, batch=p.batch, lr=p.lr, seed=cfg.seed))
    return {"base.ckpt": checkpoint.dumps(res.model.params),
            "pretrain_loss.csv": csv_text(["step", "loss"], list(enumerate(res.losses)))}


def _partition(lab: Lab, ds: PreferenceDataset) -> dict:
    d, n = lab.cfg.data, lab.cfg.encoder.n_shots
    ids = [u.user_id for u in lab.users]
    if d.users == "onehot":
        return {"seen": ids, "unseen": [],
                "partition": {u: {"train": idx, "probe": [], "test": []}
                              for u, idx in ds.user_index.items()}}
    need = d.train_pairs + (d.probe_sets + d.test_sets) * n
    if d.pairs_per_user < need:
        raise StageError(f"pairs_per_user = {d.pairs_per_user} is below train_pairs + "
                         f"(probe_sets + test_sets) * n_shots = {need}")
    if not 0 < d.n_unseen < len(ids):
        raise StageError(f"n_unseen must lie in [1, {len(ids) - 1}], got {d.n_unseen}")
    order = stream(lab.cfg.seed, "user-split").permutation(len(ids))
    unseen = sorted(int(ids[i]) for i in order[: d.n_unseen])
    seen = [u for u in ids if u not in unseen]
    part = {}
    for uid, idx in ds.user_index.items():
        idx = np.asarray(idx)[stream(lab.cfg.seed, "pair-split", uid).permutation(len(idx))]
        a, b = d.train_pairs, d.train_pairs + d.probe_sets * n
        part[uid] = {"train": sorted(map(int, idx[:a])), "probe": sorted(map(int, idx[a:b])),
                     "test": sorted(map(int, idx[b:b + d.test_sets * n]))}
    return {"seen": seen, "unseen": unseen, "partition": part}


def stage_gen_data(lab: Lab) -> dict:
    cfg, d = lab.cfg, lab.cfg.data
    base = lab.load_base()
    lab.verify("gen-data")
    ds = build_dataset(lab.users, np.arange(d.n_contexts), d.pairs_per_user,
                       model_source(base, lab.world, d.candidate_steps), lab.world, lab.specs,
                       d.label_mode, cfg.seed)
    splits = _partition(lab, ds)
    return {"dataset.ppd": dumps_dataset(ds), "dataset.csv": dataset_csv(ds),
            "splits.json": json.dumps(splits, sort_keys=True, indent=1) + "\n"}


def _mixture_only(lab: Lab, stage: str) -> None:
    if lab.cfg.data.users != "mixture":
        raise StageError(f"{stage} needs data.users = mixture")


def stage_train_encoder(lab: Lab) -> dict:
    _mixture_only(lab, "train-encoder")
    cfg, e = lab.cfg, lab.cfg.encoder
    ds, splits = lab.load_dataset(), lab.load_splits()
    lab.verify("train-encoder")
    enc = UserEncoder.create(lab.encoder_config(), lab.context_feature, cfg.seed)
    res = train_encoder(enc, ds, EncoderTrainConfig(e.steps, e.lr, e.users_per_batch, cfg.seed),
                        splits["seen"], {u: splits["partition"][u]["train"]
                                         for u in splits["seen"]})
    return {"encoder.ckpt": checkpoint.dumps(enc.params),
            "encoder_loss.csv": csv_text(["step", "loss"], list(enumerate(res.losses)))}


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(beta=t.beta, lr=t.lr, weight_decay=t.weight_decay,
                       batch_pairs=t.batch_pairs, epochs=t.epochs,
                       max_steps=t.max_steps or None, user_dropout_p=t.user_dropout_p,
                       seed=cfg.seed, trainable_set=t.trainable_set, objective=t.objective)


def stage_align(lab: Lab) -> dict:
    cfg = lab.cfg
    base, ds = lab.load_base(), lab.load_dataset()
    if ds.d != base.cfg.d:
        raise DimensionError(f"dataset dimension {ds.d} != model dimension {base.cfg.d}")
    splits = lab.load_splits()
    lab.verify("align")
    train_ids = [i for u in splits["seen"] for i in splits["partition"][u]["train"]]
    if cfg.data.users == "onehot":
        source = OneHotSource(cfg.k_user)
    else:
        enc = lab.load_encoder()
        n = cfg.encoder.n_shots
        source = TableSource({u: enc.encode(few_shot_sets(ds, u, n, splits["partition"][u]["train"],
                                                          cfg.seed))
                              for u in splits["seen"]})
    res = train(base, ds.subset(sorted(train_ids)), source, lab.world, train_config(cfg))
    return {"policy.ckpt": checkpoint.dumps(res.model.params),
            "history.csv": history_csv(res.history)}


def _eval_inputs(lab: Lab):
    policy = lab.load_policy()
    enc = ds = splits = None
    if lab.cfg.data.users == "mixture":
        enc, ds, splits = lab.load_encoder(), lab.load_dataset(), lab.load_splits()
    return policy, enc, ds, splits


def stage_sample(lab: Lab) -> dict:
    policy, enc, ds, splits = _eval_inputs(lab)
    lab.verify("sample")
    gen = model_generator(policy, lab.cfg.eval.sample_steps)
    cids = lab.eval_contexts
    tokens = lab.world.tokens(cids)
    rows = []
    for name, u in lab.eval_conditions(enc, ds, splits).items():
        x = gen(tokens, np.broadcast_to(u, (len(cids), len(u))),
                eval_noise(lab.cfg.seed, cids, lab.world.d))
        rows += [(name, int(c), *map(float, xi)) for c, xi in zip(cids, x)]
    header = ["condition", "context_id"] + [f"x{i + 1}" for i in range(lab.world.d)]
    return {"samples.csv": csv_text(header, rows)}


def stage_eval_scores(lab: Lab) -> dict:
    policy, enc, ds, splits = _eval_inputs(lab)
    lab.verify("eval-scores")
    e = lab.cfg.eval
    gen = model_generator(policy, e.sample_steps)
    reports = [score_generations(gen, lab.world, lab.eval_contexts, u, lab.specs,
                                 e.n_per_context, lab.cfg.seed, condition=name)
               for name, u in lab.eval_conditions(enc, ds, splits).items()]
    return {"scores.csv": scores_csv(reports)}


def stage_eval_winrate(lab: Lab) -> dict:
    policy, enc, ds, splits = _eval_inputs(lab)
    lab.verify("eval-winrate")
    gen = model_generator(policy, lab.cfg.eval.sample_steps)
    cids = lab.eval_contexts
    k = lab.cfg.k_user
    results = {}
    for user in lab.users:
        if lab.cfg.data.users == "onehot":
            u = np.eye(k)[user.user_id]
        else:
            emb = enc.encode(lab.test_sets(ds, splits, user.user_id))
            u = emb[np.arange(len(cids)) % len(emb)]
        results[f"user{user.user_id}"] = win_rate(gen, gen, lab.world, cids, user, lab.specs,
                                                   u, np.zeros(k), seed=lab.cfg.seed)
    return {"winrate.csv": winrate_csv(results)}


def stage_sweep(lab: Lab) -> dict:
    if lab.cfg.data.users != "onehot":
        raise StageError("sweep needs data.users = onehot")
    policy = lab.load_policy()
    lab.verify("sweep")
    e = lab.cfg.eval
    gen = model_generator(policy, e.sample_steps)
    cids = lab.eval_contexts[: e.sweep_contexts]
    k = lab.cfg.k_user
    parts, rho_rows = [], []
    for i in range(k):
        for j in range(i + 1, k):
            sw = interpolation_sweep(gen, lab.world, edge_grid(i, j, k, e.sweep_points), cids,
                                     lab.specs, seed=lab.cfg.seed)
            body = sweep_csv(sw)
            parts.append(body if not parts else body.split("\n", 1)[1])
            for f in (i, j):
                rho_rows.append((i, j, sw.families[f], spearman(sw.grid[:, f], sw.mean[:, f])))
    return {"sweep.csv": "".join(parts),
            "sweep_spearman.csv": csv_text(["from", "to", "family", "spearman"], rho_rows)}


def stage_probe(lab: Lab) -> dict:
    _mixture_only(lab, "probe")
    enc, ds, splits = lab.load_encoder(), lab.load_dataset(), lab.load_splits()
    lab.verify("probe")
    n, seed = lab.cfg.encoder.n_shots, lab.cfg.seed
    ids = [u.user_id for u in lab.users]
    train_sets = [s for u in ids
                  for s in few_shot_sets(ds, u, n, splits["partition"][u]["probe"], seed)]
    test_sets = [s for u in ids for s in lab.test_sets(ds, splits, u)]
    res = probe_topk_accuracy(enc, train_sets, test_sets, ids, lab.cfg.eval.probe_ks, seed,
                              lab.cfg.eval.probe_steps)
    rows = [(k, acc, res.n_users, res.n_sets) for k, acc in sorted(res.accuracy.items())]
    return {"probe.csv": csv_text(["k", "accuracy", "n_users", "n_sets"], rows)}


def stage_heldout_eval(lab: Lab) -> dict:
    _mixture_only(lab, "heldout-eval")
    policy, enc, ds, splits = _eval_inputs(lab)
    lab.verify("heldout-eval")
    part = splits["partition"]
    n = lab.cfg.encoder.n_shots
    eval_sets = {u: lab.test_sets(ds, splits, u) for u in part}
    groups = {u: [sorted(part[u]["test"])[s: s + n] for s in range(0, len(part[u]["test"]), n)]
              for u in part}
    train_pairs = {i for u in splits["seen"] for i in part[u]["train"]}
    ctx = ds.arrays()["context_id"]
    us = UserSplits(splits["seen"], splits["unseen"], train_pairs,
                    {int(ctx[i]) for i in train_pairs}, [int(c) for c in lab.eval_contexts],
                    eval_sets, groups)
    gen = model_generator(policy, lab.cfg.eval.sample_steps)
    res = heldout_user_eval(gen, gen, lab.world, enc, {u.user_id: u for u in lab.users}, us,
                            lab.specs, seed=lab.cfg.seed,
                            contexts_per_user=lab.cfg.eval.heldout_contexts_per_user)
    return {"heldout.csv": winrate_csv(res)}


STAGE_FUNCS: dict[str, Callable[[Lab], dict]] = {
    "pretrain": stage_pretrain,
    "gen-data": stage_gen_data,
    "train-encoder": stage_train_encoder,
    "align": stage_align,
    "sample": stage_sample,
    "eval-scores": stage_eval_scores,
    "eval-winrate": stage_eval_winrate,
    "sweep": stage_sweep,
    "probe": stage_probe,
    "heldout-eval": stage_heldout_eval,
}


# ---------------------------------------------------------------------------
# Execution


def read_manifest(run_dir: Path) -> dict:
    path = run_dir / "manifest.json"
    return json.loads(path.read_text()) if path.is_file() else {}


def _write_manifest(run_dir: Path, manifest: dict) -> None:
    tmp = run_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    os.replace(tmp, run_dir / "manifest.json")


def run_stage(stage: str, cfg: ExperimentConfig, run_dir: str | Path) -> dict[str, Path]:
    if stage not in STAGE_FUNCS:
        raise StageError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(run_dir)
    if manifest and manifest.get("seed") != cfg.seed:
        raise DigestMismatchError(f"{run_dir} holds seed {manifest.get('seed')}, "
                                  f"not {cfg.seed}")
    lab = Lab(cfg, run_dir, manifest)
    log.info("stage %s -> %s", stage, run_dir)
    staging = run_dir / f".staging-{stage}"
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir()
    try:
        outputs = STAGE_FUNCS[stage](lab)
        for name, content in outputs.items():
            data = content.encode("utf-8") if isinstance(content, str) else content
            (staging / name).write_bytes(data)
    except BaseException:
        quarantine = run_dir / f"{stage}.quarantine"
        if quarantine.exists():
            shutil.rmtree(quarantine)
        staging.rename(quarantine)
        raise
    written = {}
    for name in outputs:
        os.replace(staging / name, run_dir / name)
        written[name] = run_dir / name
    staging.rmdir()
    manifest.setdefault("stages", {})[stage] = {
        "digest": lineage_digest(cfg, stage),
        "artifacts": {name: sha256_file(p) for name, p in sorted(written.items())},
    }
    manifest["seed"] = cfg.seed
    _write_manifest(run_dir, manifest)
    return written


def run_pipeline(cfg: ExperimentConfig, run_dir: str | Path,
                 stages: tuple[str, ...] | None = None) -> Path:
    if stages is None:
        stages = MULTIREWARD_STAGES if cfg.data.users == "onehot" else FEWSHOT_STAGES
    for stage in stages:
        run_stage(stage, cfg, run_dir)
    return Path(run_dir)


# ---------------------------------------------------------------------------
# Reading results back


def read_csv(path: str | Path) -> list[dict[str, str]]:
    import csv
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def winrate_rows(path: str | Path) -> dict[str, WinRateResult]:
    return {r["split"]: WinRateResult(int(r["wins"]), int(r["losses"]), int(r["ties"]))
            for r in read_csv(path)}


__all__ = [
    "STAGES", "MULTIREWARD_STAGES", "FEWSHOT_STAGES", "StageError", "MissingInputError",
    "DigestMismatchError", "DimensionError", "EvaluationError", "Lab", "lineage_digest",
    "run_dir_for", "run_stage", "run_pipeline", "read_manifest", "read_csv", "winrate_rows",
    "train_config",
]
