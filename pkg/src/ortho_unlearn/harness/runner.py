"""Sequential class-unlearning protocol.

For every strategy the adapters are trained once per task; each lambda in
the sweep only changes how the adapters are fused at evaluation time, so one
training pass yields one :class:`UnlearnRun` per lambda.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import dataset as ds
from .. import unlearn as ul
from ..errors import ConfigError, UnlearnError
from ..model import Backbone, FrozenHead, accuracy, features, load_checkpoint, logits, save_checkpoint, \
    to_float32, train_head, train_mlp
from ..router import moe_forward, train_gate
from .config import ExperimentConfig

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "baseline.oulm"


@dataclass
class TaskRecord:
    task_index: int
    class_id: int
    retain_acc: float
    forget_acc_cum: float
    forget_acc_task: float
    free_dims: int
    effective_rank: int
    wall_ms: float
    retain_acc_baseline: float = float("nan")
    final_loss: float = float("nan")


@dataclass
class UnlearnRun:
    strategy: str
    lam: float
    baseline_retain_acc: float
    baseline: TaskRecord
    records: list = field(default_factory=list)
    events: list = field(default_factory=list)
    split_hashes: list = field(default_factory=list)
    seeds: list = field(default_factory=list)


@dataclass
class Prepared:
    """Frozen model plus held-out splits, with features precomputed."""

    backbone: Backbone
    head: FrozenHead
    train: ds.LabeledSet  # backbone features
    test: ds.LabeledSet
    baseline_retain_acc: float


class PartialRunError(UnlearnError):
    """A task failed; ``runs`` holds the trajectory completed so far."""

    def __init__(self, cause, runs):
        self.cause = cause
        self.runs = runs
        self.exit_code = getattr(cause, "exit_code", 1)
        super().__init__(f"run aborted: {cause}")


def load_dataset(cfg: ExperimentConfig) -> ds.LabeledSet:
    if cfg.dataset == "mnist":
        return ds.load_idx(cfg.images, cfg.labels)
    if cfg.dataset == "features":
        return ds.load_features(cfg.features_path)
    return ds.synth_clusters(cfg.n_classes, cfg.d_in, cfg.per_class, cfg.spread, cfg.data_seed)


def checkpoint_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.output_dir) / CHECKPOINT_NAME


def _final_retain(data, cfg):
    return data.subset(np.flatnonzero(~np.isin(data.labels, cfg.forget_classes)))


def _fit(cfg, train):
    if cfg.dataset == "features":
        head = train_head(train.features, train.labels, train.n_classes, epochs=cfg.head_epochs,
                          lr=cfg.head_lr, batch_size=cfg.head_batch, seed=cfg.seed)
        return to_float32(Backbone(), head)
    backbone, head = train_mlp(train.features, train.labels, train.n_classes, hidden=cfg.hidden,
                               epochs=cfg.pretrain_epochs, lr=cfg.pretrain_lr,
                               batch_size=cfg.pretrain_batch, seed=cfg.seed)
    return to_float32(backbone, head)


def pretrain_baseline(cfg: ExperimentConfig, data=None, save=True):
    """Train and freeze the baseline; returns (backbone, head, held-out retain accuracy).

    Weights are rounded to float32 before use so the persisted checkpoint
    reproduces them exactly.
    """
    data = load_dataset(cfg) if data is None else data
    ds.check_split(data, ds.SplitSpec(cfg.forget_classes, cfg.seed))
    train, test = ds.holdout(data, cfg.seed, 1.0 - cfg.holdout_frac)
    backbone, head = _fit(cfg, train)
    if save:
        path = checkpoint_path(cfg)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, backbone, head)
    retain = _final_retain(test, cfg)
    acc = accuracy(head, backbone, None, retain) if len(retain) else float("nan")
    return backbone, head, acc


def prepare(cfg: ExperimentConfig, data=None, model=None) -> Prepared:
    """Load data, obtain the frozen baseline (checkpoint if present) and split."""
    data = load_dataset(cfg) if data is None else data
    ds.check_split(data, ds.SplitSpec(cfg.forget_classes, cfg.seed))
    if model is None:
        path = checkpoint_path(cfg)
        if path.exists():
            model = load_checkpoint(path)
        else:
            backbone, head, _ = pretrain_baseline(cfg, data)
            model = (backbone, head)
    backbone, head = model
    train, test = ds.holdout(data, cfg.seed, 1.0 - cfg.holdout_frac)
    train_f = ds.LabeledSet(features(backbone, train.features), train.labels, train.n_classes)
    test_f = ds.LabeledSet(features(backbone, test.features), test.labels, test.n_classes)
    if train_f.d_in != head.d_in:
        raise ConfigError(f"feature dimension {train_f.d_in} does not match checkpoint head d_in {head.d_in}")
    retain = _final_retain(test_f, cfg)
    base = accuracy(head, Backbone(), None, retain) if len(retain) else float("nan")
    return Prepared(backbone, head, train_f, test_f, base)


def task_seed(seed, k) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def _split_hash(forget_k, retain) -> str:
    return hashlib.sha256((forget_k.digest() + retain.digest()).encode()).hexdigest()[:16]


def _acc(z, data):
    return float(np.mean(np.argmax(z, axis=1) == data.labels)) if len(data) else float("nan")


class _Evaluator:
    """Accuracy of the fused (or routed) model on the held-out splits."""

    def __init__(self, prep: Prepared, strategy):
        self.head = prep.head
        self.strategy = strategy

    def logits(self, adapters, lam, gate, feats):
        if self.strategy == "moe":
            return moe_forward(self.head, adapters, gate, feats, lam)
        return logits(self.head, feats, ul.summed_delta(adapters, lam))


def baseline_record(prep: Prepared, cfg: ExperimentConfig) -> TaskRecord:
    test = prep.test
    forget_all = test.of_classes(cfg.forget_classes)
    z = logits(prep.head, forget_all.features) if len(forget_all) else None
    fa = _acc(z, forget_all) if z is not None else float("nan")
    first = test.of_classes(cfg.forget_classes[:1])
    ft = _acc(logits(prep.head, first.features), first) if len(first) else float("nan")
    return TaskRecord(0, -1, prep.baseline_retain_acc, fa, ft, prep.head.d_in, 0, 0.0,
                      prep.baseline_retain_acc, float("nan"))


def _train_task(strategy, prep, state, forget_k, cfg, k, task_cfg):
    losses = []

    def track(epoch, lg):
        losses.append(lg.loss)

    common = dict(rank=cfg.rank, task=k + 1, on_step=track)
    if strategy in ("static", "moe"):
        ad = ul.train_unconstrained(prep.head, Backbone(), forget_k, task_cfg, **common)
        basis = ul.effective_basis(ad, cfg.sv_threshold)
        return ad, state, basis, losses[-1]
    if strategy == "posthoc":
        ad = ul.train_posthoc(prep.head, Backbone(), state, forget_k, task_cfg, **common)
    else:
        ad = ul.train_constrained(prep.head, Backbone(), state, forget_k, task_cfg, **common)
    basis = ul.extract_task_basis(state, ad)
    return ad, ul.update_projection(state, basis), basis, losses[-1]


def run_strategy(prep: Prepared, cfg: ExperimentConfig, strategy: str, results=None):
    """Run the whole task sequence for one strategy; one UnlearnRun per lambda.

    ``results``, if given, collects (TaskResult) per task for archiving.
    """
    head = prep.head
    spec = ds.SplitSpec(cfg.forget_classes, cfg.seed)
    runs = [UnlearnRun(strategy, float(lam), prep.baseline_retain_acc, baseline_record(prep, cfg))
            for lam in cfg.lambdas]
    state = ul.ProjectionState.initial(head.d_in, cfg.sv_threshold)
    ev = _Evaluator(prep, strategy)
    adapters, forget_sets = [], []
    gate = None
    saturated = False

    for k, cls in enumerate(spec.forget_classes):
        forget_k, retain_tr, _ = ds.split(prep.train, spec, k)
        _, retain_te, forgotten_te = ds.split(prep.test, spec, k)
        forget_te = prep.test.of_classes([cls])
        seed_k = task_seed(cfg.seed, k)
        task_cfg = ul.TrainConfig(cfg.epochs, cfg.learning_rate, cfg.batch_size, seed_k, cfg.init_scale)

        t0 = time.perf_counter()
        try:
            ad, state, basis, loss = _train_task(strategy, prep, state, forget_k, cfg, k, task_cfg)
            adapters.append(ad)
            forget_sets.append(forget_k)
            if strategy == "moe":
                gate = train_gate(head, Backbone(), adapters, forget_sets,
                                  _gate_retain(retain_tr, cfg), cfg.gate_train)
        except UnlearnError as exc:
            raise PartialRunError(exc, runs) from exc
        elapsed = (time.perf_counter() - t0) * 1000.0

        if results is not None:
            results.append(ul.TaskResult(ad, basis.shape[1], float("nan"), loss, basis))
        free = ul.free_subspace_dim(state)
        event = None
        if strategy in ("posthoc", "in_training") and free == 0 and not saturated:
            saturated = True
            event = f"{strategy} task {k + 1}: free subspace exhausted, later adapters have zero delta"
            log.warning(event)

        base_retain = _acc(logits(head, retain_te.features), retain_te)
        for run in runs:
            z_r = ev.logits(adapters, run.lam, gate, retain_te.features)
            z_f = ev.logits(adapters, run.lam, gate, forgotten_te.features)
            z_t = ev.logits(adapters, run.lam, gate, forget_te.features)
            run.records.append(TaskRecord(
                task_index=k + 1,
                class_id=int(cls),
                retain_acc=_acc(z_r, retain_te),
                forget_acc_cum=_acc(z_f, forgotten_te),
                forget_acc_task=_acc(z_t, forget_te),
                free_dims=free,
                effective_rank=int(basis.shape[1]),
                wall_ms=round(elapsed, 3) if cfg.record_timing else 0.0,
                retain_acc_baseline=base_retain,
                final_loss=float(loss),
            ))
            run.split_hashes.append(_split_hash(forget_k, retain_tr))
            run.seeds.append(seed_k)
            if event:
                run.events.append(event)
    return runs, gate


def _gate_retain(retain, cfg):
    """First ``gate_retain_per_class`` rows of each retain class (all rows when 0)."""
    cap = cfg.gate_retain_per_class
    if cap <= 0:
        return retain
    rows = []
    for c in np.unique(retain.labels):
        rows.extend(np.flatnonzero(retain.labels == c)[:cap])
    return retain.subset(np.sort(np.asarray(rows, dtype=np.int64)))


def run_sequence(cfg: ExperimentConfig, prep: Prepared = None, archive_dir=None):
    """All configured strategies over the shared splits and seeds."""
    prep = prepare(cfg) if prep is None else prep
    all_runs = []
    for strategy in cfg.strategy:
        results = [] if archive_dir is not None else None
        try:
            runs, gate = run_strategy(prep, cfg, strategy, results)
        except PartialRunError as exc:
            raise PartialRunError(exc.cause, all_runs + exc.runs) from exc
        all_runs.extend(runs)
        if archive_dir is not None:
            Path(archive_dir).mkdir(parents=True, exist_ok=True)
            ul.save_archive(Path(archive_dir) / f"adapters_{strategy}.oula", results,
                            prep.head.d_in, prep.head.d_out, cfg.rank, gate=gate)
    return all_runs
