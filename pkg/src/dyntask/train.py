"""The staged training protocol.

Stage 1 pretrains trunk + identity branch on the verification loss. Stage 2
transfers the bottleneck into the expression branch and trains trunk +
expression branch alone. The multi-task stages restart from the stage-1
checkpoint (with the same transfer applied), then optimize the weighted sum
of both losses: dynamically via the weighting unit, or with fixed constants
as the comparison baseline.

Runs are pure functions of (inputs, config, seed); per-step records land in a
RunLog whose CSV columns are ``step,lr,l1,l2,l3,w1,w2,seconds``.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import data as datamod
from . import losses as lossmod
from . import model as modelmod
from .errors import ConfigError
from .losses import CenterBank, LossConfig
from .model import ModelState
from .optim import OptimConfig, RmspropState, rmsprop_step, lr_schedule

log = logging.getLogger("dyntask")

STAGES = ("pretrain", "single-expr", "multi-dynamic", "multi-static")


@dataclass
class StageConfig:
    stage: str
    steps: int = 2000
    eval_every: int = 200
    batch_size: int = 32
    stratify: bool = True
    static_w1: Optional[float] = None
    static_w2: Optional[float] = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.stage == "multi-static":
            if self.static_w1 is None or self.static_w2 is None:
                raise ConfigError("multi-static stage requires static_w1 and static_w2")
            if self.static_w1 < 0 or self.static_w2 < 0:
                raise ConfigError("static weights must be >= 0")


@dataclass
class RunRecord:
    step: int
    lr: float
    l1: Optional[float] = None
    l2: Optional[float] = None
    l3: Optional[float] = None
    w1: Optional[float] = None
    w2: Optional[float] = None
    seconds: float = 0.0


@dataclass
class RunLog:
    meta: dict
    records: list = field(default_factory=list)

    CSV_HEADER = ("step", "lr", "l1", "l2", "l3", "w1", "w2", "seconds")

    def append(self, record: RunRecord):
        if self.records and record.step <= self.records[-1].step:
            raise ConfigError("run log steps must be strictly increasing")
        self.records.append(record)

    def write_csv(self, path) -> None:
        def fmt(v):
            return "" if v is None else repr(float(v))

        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.CSV_HEADER)
            for r in self.records:
                writer.writerow([r.step, fmt(r.lr), fmt(r.l1), fmt(r.l2), fmt(r.l3),
                                 fmt(r.w1), fmt(r.w2), fmt(r.seconds)])


@dataclass
class TrainResult:
    state: ModelState
    log: RunLog
    bank: Optional[CenterBank] = None
    dwu_grad_norms: Optional[np.ndarray] = None


def seed_centers(state: ModelState, bank: CenterBank,
                 handle: datamod.DatasetHandle, batch_size: int = 256) -> None:
    """One eval-mode pass over the dataset so every identity's center exists
    before the first optimization step needs it."""
    n = len(handle)
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        tape = ad.Tape()
        lifted = modelmod.lift_params(state, tape)
        shared = modelmod.forward_shared(state, lifted, handle.batch_images(idx), "eval")
        emb, _ = modelmod.forward_branch1(state, lifted, shared, "eval")
        lossmod.update_centers(bank, emb.data, handle.identities[idx])


def _loop(state: ModelState, handle: datamod.DatasetHandle, optim_cfg: OptimConfig,
          loss_cfg: LossConfig, stage_cfg: StageConfig, seed: int,
          trainable_prefixes: tuple, use_bank: bool, step_fn) -> TrainResult:
    """Shared driver: batches, the optimizer, logging, stage isolation."""
    trainable = state.names(*trainable_prefixes)
    params = {n: state.params[n] for n in trainable}
    decayed = state.decayed_names() & set(trainable)
    opt_state = RmspropState()
    drop_rng = np.random.default_rng([seed, 21])

    bank = None
    if use_bank:
        bank = CenterBank(loss_cfg.k_id, state.config.embedding_dim,
                          rate=loss_cfg.center_rate)
        seed_centers(state, bank, handle)

    run_log = RunLog(meta={"stage": stage_cfg.stage, "seed": seed})
    dwu_norms = []
    batches = datamod.make_batches(handle, stage_cfg.batch_size, seed,
                                   stratify=stage_cfg.stratify)
    started = time.perf_counter()
    for step, batch in zip(range(stage_cfg.steps), batches):
        tape = ad.Tape()
        lifted = modelmod.lift_params(state, tape)
        record, loss_node, emb = step_fn(step, tape, lifted, batch, bank, drop_rng)
        grads = ad.backward(loss_node)
        if stage_cfg.stage == "multi-dynamic":
            dwu_norms.append(float(np.linalg.norm(grads.of(lifted["dwu.w"]))
                                   + np.linalg.norm(grads.of(lifted["dwu.b"]))))
        rmsprop_step(params, {n: grads.of(lifted[n]) for n in trainable},
                     opt_state, optim_cfg, step, decayed)
        if use_bank:
            lossmod.update_centers(bank, emb.data, handle.identities[batch])
        record.step = step
        record.lr = lr_schedule(optim_cfg, step)
        record.seconds = time.perf_counter() - started
        run_log.append(record)
        if stage_cfg.eval_every and (step + 1) % stage_cfg.eval_every == 0:
            log.info("stage=%s step=%d lr=%g l1=%s l2=%s l3=%s",
                     stage_cfg.stage, step, record.lr, record.l1, record.l2, record.l3)
    return TrainResult(state=state, log=run_log, bank=bank,
                       dwu_grad_norms=np.array(dwu_norms) if dwu_norms else None)


def train_pretrain_verif(state: ModelState, handle: datamod.DatasetHandle,
                         optim_cfg: OptimConfig, loss_cfg: LossConfig,
                         stage_cfg: StageConfig, seed: int) -> TrainResult:
    """Stage 1: trunk + identity branch under the verification loss."""
    state = state.clone()
    ids = handle.identities

    def step_fn(step, tape, lifted, batch, bank, drop_rng):
        shared = modelmod.forward_shared(state, lifted, handle.batch_images(batch), "train")
        emb, logits = modelmod.forward_branch1(state, lifted, shared, "train", drop_rng)
        l1 = lossmod.verification_loss(logits, ids[batch], emb, bank, loss_cfg)
        return RunRecord(step=step, lr=0.0, l1=l1.item()), l1, emb

    return _loop(state, handle, optim_cfg, loss_cfg, stage_cfg, seed,
                 ("trunk.", "branch1."), use_bank=True, step_fn=step_fn)


def train_single_expr(pretrained: ModelState, handle: datamod.DatasetHandle,
                      optim_cfg: OptimConfig, loss_cfg: LossConfig,
                      stage_cfg: StageConfig, seed: int) -> TrainResult:
    """Stage 2: transfer the bottleneck into the expression branch, then train
    trunk + expression branch under the expression loss alone."""
    state = modelmod.transfer_branch1_to_branch2(pretrained, seed)
    exprs = handle.expressions

    def step_fn(step, tape, lifted, batch, bank, drop_rng):
        shared = modelmod.forward_shared(state, lifted, handle.batch_images(batch), "train")
        logits = modelmod.forward_branch2(state, lifted, shared, "train", drop_rng)
        l2 = lossmod.expression_loss(logits, exprs[batch])
        return RunRecord(step=step, lr=0.0, l2=l2.item()), l2, None

    return _loop(state, handle, optim_cfg, loss_cfg, stage_cfg, seed,
                 ("trunk.", "branch2."), use_bank=False, step_fn=step_fn)


def _multi_step_fn(state, handle, loss_cfg, weights_of):
    ids = handle.identities
    exprs = handle.expressions

    def step_fn(step, tape, lifted, batch, bank, drop_rng):
        shared = modelmod.forward_shared(state, lifted, handle.batch_images(batch), "train")
        emb, id_logits = modelmod.forward_branch1(state, lifted, shared, "train", drop_rng)
        expr_logits = modelmod.forward_branch2(state, lifted, shared, "train", drop_rng)
        l1 = lossmod.verification_loss(id_logits, ids[batch], emb, bank, loss_cfg)
        l2 = lossmod.expression_loss(expr_logits, exprs[batch])
        w1, w2 = weights_of(tape, lifted, shared)
        l3 = lossmod.overall_loss(l1, l2, w1, w2)
        record = RunRecord(step=step, lr=0.0, l1=l1.item(), l2=l2.item(),
                           l3=l3.item(), w1=w1.item(), w2=w2.item())
        return record, l3, emb

    return step_fn


def train_multi_dynamic(pretrained: ModelState, handle: datamod.DatasetHandle,
                        optim_cfg: OptimConfig, loss_cfg: LossConfig,
                        stage_cfg: StageConfig, seed: int) -> TrainResult:
    """Joint stage: both branches plus the weighting unit, all parameters
    optimized against the dynamically weighted loss."""
    state = modelmod.transfer_branch1_to_branch2(pretrained, seed)

    def weights_of(tape, lifted, shared):
        return modelmod.dynamic_weights(state, lifted, shared)

    step_fn = _multi_step_fn(state, handle, loss_cfg, weights_of)
    return _loop(state, handle, optim_cfg, loss_cfg, stage_cfg, seed,
                 ("trunk.", "branch1.", "branch2.", "dwu."), use_bank=True,
                 step_fn=step_fn)


def train_multi_static(pretrained: ModelState, handle: datamod.DatasetHandle,
                       optim_cfg: OptimConfig, loss_cfg: LossConfig,
                       stage_cfg: StageConfig, seed: int) -> TrainResult:
    """The fixed-weight baseline: the identical loop with constant weight
    nodes; the weighting unit is neither used nor trained."""
    state = modelmod.transfer_branch1_to_branch2(pretrained, seed)
    w1_const = float(stage_cfg.static_w1)
    w2_const = float(stage_cfg.static_w2)

    def weights_of(tape, lifted, shared):
        return tape.leaf(np.asarray(w1_const)), tape.leaf(np.asarray(w2_const))

    step_fn = _multi_step_fn(state, handle, loss_cfg, weights_of)
    return _loop(state, handle, optim_cfg, loss_cfg, stage_cfg, seed,
                 ("trunk.", "branch1.", "branch2."), use_bank=True,
                 step_fn=step_fn)
