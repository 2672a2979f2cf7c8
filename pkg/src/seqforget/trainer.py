"""AdamW and the three-phase regime: positive, negative, stabilization.

Phase semantics:

* positive: minimize CE on the retain data, all parameters trainable.
* negative: minimize L_neg = -alpha * CE on the forget data with the freeze
  policy applied, i.e. gradient ascent on CE restricted to the unfrozen
  tail of the network. Gradients are computed for CE and scaled by -alpha
  at the leaves; that is the same gradient with a friendlier float
  evaluation order, so the sign law holds bitwise.
* stabilize: more positive epochs with early stopping on retain validation
  loss; the best-validation parameter snapshot is restored on exit.
"""

from __future__ import annotations

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import evaluation, kernels
from .autograd import Tape, TensorNode
from .data import collate
from .errors import ConfigError, ContractError, DataError
from .model import FreezePolicy, TransformerModel, select_trainable

log = logging.getLogger(__name__)

PHASES = ("positive", "negative", "stabilize")


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Per-parameter AdamW moments plus the shared step counter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, TensorNode], lr: float,
                   weight_decay: float = 0.01, **kw) -> "OptimizerState":
        state = cls(lr=lr, weight_decay=weight_decay, **kw)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        return state


def adamw_step(params: dict[str, TensorNode], state: OptimizerState) -> None:
    """One decoupled-weight-decay Adam step over the given (trainable) params.

    The step counter advances once per call; parameters outside ``params``
    are untouched and accrue no state.
    """
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"adamw_step: missing gradient for {name}")
        if name not in state.m:
            raise ContractError(f"adamw_step: no optimizer state for {name}")
    state.t += 1
    for name, p in params.items():
        kernels.adamw_update(p.values, p.grad, state.m[name], state.v[name],
                             lr=state.lr, beta1=state.beta1, beta2=state.beta2,
                             eps=state.eps, weight_decay=state.weight_decay,
                             t=state.t)


# ---------------------------------------------------------------------------
# Phase configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EarlyStop:
    patience: int = 2
    min_delta: float = 1e-3

    def __post_init__(self):
        if not isinstance(self.patience, int) or self.patience < 1:
            raise ConfigError(f"early-stop patience must be >= 1, got {self.patience!r}")
        if self.min_delta < 0:
            raise ConfigError(f"early-stop min_delta must be >= 0, got {self.min_delta}")


@dataclass(frozen=True)
class PhaseConfig:
    phase: str
    lr: float
    epochs: int
    batch_size: int
    freeze_policy: FreezePolicy
    alpha: float = 0.0
    early_stop: EarlyStop | None = None
    seed: int = 0
    weight_decay: float = 0.0
    grad_clip: float | None = None
    mask_prompt: bool = True
    max_in: int = 64
    max_out: int = 32

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not isinstance(self.epochs, int) or self.epochs < 0:
            # 0 epochs means "skip this phase" and is legal in a pipeline
            raise ConfigError(f"epochs must be an integer >= 0, got {self.epochs!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size!r}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.phase != "negative" and self.alpha != 0.0:
            raise ConfigError("alpha only applies to the negative phase")
        if self.phase in ("positive", "stabilize") \
                and self.freeze_policy.variant != "all_trainable":
            raise ConfigError(f"{self.phase} phase requires the all_trainable policy")
        if self.phase == "stabilize" and self.early_stop is None:
            object.__setattr__(self, "early_stop", EarlyStop())
        if self.phase != "stabilize" and self.early_stop is not None:
            raise ConfigError("early_stop only applies to the stabilize phase")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive, got {self.grad_clip}")
        if self.max_in < 1 or self.max_out < 1:
            raise ConfigError("max_in and max_out must be >= 1")


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    train_loss: float
    val_loss: float | None
    wall_time: float
    batch_losses: list[float] = field(default_factory=list)


@dataclass
class PhaseSummary:
    phase: str
    epochs_run: int
    final_train_loss: float | None
    best_val_loss: float | None
    stopped_early: bool
    wall_time: float
    extra: dict = field(default_factory=dict)


@dataclass
class RunReport:
    records: list[EpochRecord] = field(default_factory=list)
    summaries: list[PhaseSummary] = field(default_factory=list)
    status: str = "completed"
    snapshots: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    evals: dict = field(default_factory=dict)

    def merge(self, other: "RunReport") -> "RunReport":
        self.records.extend(other.records)
        self.summaries.extend(other.summaries)
        return self


def snapshot_params(model: TransformerModel) -> dict[str, np.ndarray]:
    return {name: p.values.copy() for name, p in model.params.items()}


def restore_params(model: TransformerModel, snapshot: dict[str, np.ndarray]) -> None:
    if set(snapshot) != set(model.params):
        raise ContractError("snapshot parameter names do not match the model")
    for name, vals in snapshot.items():
        model.params[name].values[...] = vals


# ---------------------------------------------------------------------------
# Shared training loop pieces
# ---------------------------------------------------------------------------


@contextmanager
def _train_scope(model: TransformerModel, trainable: set[str]):
    """Restrict requires_grad to the trainable set for the duration."""
    saved = {name: p.requires_grad for name, p in model.params.items()}
    for name, p in model.params.items():
        p.requires_grad = name in trainable
    try:
        yield
    finally:
        for name, p in model.params.items():
            p.requires_grad = saved[name]


def _batch_ce(model: TransformerModel, examples, cfg: PhaseConfig,
              tape: Tape | None):
    batch = collate(examples, cfg.max_in, cfg.max_out, cfg.mask_prompt)
    logits = model.forward(batch.input_ids, tape)
    b, t, v = logits.shape
    flat = ag.reshape(logits, (b * t, v), tape)
    return ag.cross_entropy_masked(flat, batch.labels.reshape(-1), tape)


def _backward_phase_grads(model: TransformerModel, examples, cfg: PhaseConfig,
                          trainable: set[str]) -> float:
    """Populate leaf grads for one batch under the phase's loss; returns CE."""
    ag.reset_grads(model.params)
    tape = Tape()
    ce = _batch_ce(model, examples, cfg, tape)
    ag.backward(ce, tape)
    if cfg.phase == "negative":
        # d(-alpha * CE)/dw == -alpha * dCE/dw; scaling the finished leaf
        # grads keeps the sign law exact elementwise
        factor = model.dtype.type(-cfg.alpha)
        for name in trainable:
            g = model.params[name].grad
            if g is not None:
                g *= factor
    if cfg.grad_clip is not None:
        total = 0.0
        for name in trainable:
            g = model.params[name].grad
            if g is not None:
                total += float((g.astype(np.float64) ** 2).sum())
        norm = total ** 0.5
        if norm > cfg.grad_clip:
            shrink = model.dtype.type(cfg.grad_clip / norm)
            for name in trainable:
                g = model.params[name].grad
                if g is not None:
                    g *= shrink
    return float(ce.values)


def phase_gradients(model: TransformerModel, examples, cfg: PhaseConfig
                    ) -> dict[str, np.ndarray]:
    """The exact per-parameter gradients one optimizer step would apply.

    Read-only: parameters and grads are left untouched. Useful for
    verifying the freeze and sign contracts against the production path.
    """
    trainable = select_trainable(model, cfg.freeze_policy)
    with _train_scope(model, trainable):
        _backward_phase_grads(model, examples, cfg, trainable)
        grads = {name: model.params[name].grad.copy()
                 for name in sorted(trainable)
                 if model.params[name].grad is not None}
    ag.reset_grads(model.params)
    return grads


def _train_epochs(model: TransformerModel, corpus, cfg: PhaseConfig,
                  n_epochs: int, rng, state: OptimizerState,
                  trainable_params: dict[str, TensorNode],
                  on_epoch_end=None) -> list[EpochRecord]:
    records = []
    trainable = set(trainable_params)
    with _train_scope(model, trainable):
        for epoch in range(1, n_epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(corpus))
            batch_losses = []
            for lo in range(0, len(corpus), cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                examples = [corpus[i] for i in idx]
                ce = _backward_phase_grads(model, examples, cfg, trainable)
                adamw_step(trainable_params, state)
                ag.reset_grads(model.params)
                batch_losses.append(ce)
            rec = EpochRecord(
                phase=cfg.phase, epoch=epoch,
                train_loss=float(np.mean(batch_losses)),
                val_loss=None, wall_time=time.perf_counter() - t0,
                batch_losses=batch_losses)
            records.append(rec)
            log.info("%s epoch %d: train loss %.4f (%.1fs)",
                     cfg.phase, epoch, rec.train_loss, rec.wall_time)
            if on_epoch_end is not None and on_epoch_end(rec):
                break
    return records


def _phase_prologue(model, corpus, cfg, expected_phase):
    if cfg.phase != expected_phase:
        raise ConfigError(f"expected a {expected_phase} PhaseConfig, got {cfg.phase}")
    if not corpus:
        raise DataError(f"{expected_phase} phase needs a non-empty corpus")
    trainable = select_trainable(model, cfg.freeze_policy)
    params = {name: model.params[name] for name in model.params if name in trainable}
    state = OptimizerState.for_params(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    return params, state


def _observe(on_epoch):
    # observers see each finished record but never influence the loop
    if on_epoch is None:
        return None

    def cb(rec: EpochRecord) -> bool:
        on_epoch(rec)
        return False

    return cb


# ---------------------------------------------------------------------------
# Phases
# ---------------------------------------------------------------------------


def run_positive_phase(model: TransformerModel, retain_train,
                       cfg: PhaseConfig, on_epoch=None) -> RunReport:
    """Descent on CE over the retain corpus, everything trainable.

    ``on_epoch``, when given, is called with each finished EpochRecord so
    callers can stream metrics out as training runs.
    """
    params, state = _phase_prologue(model, retain_train, cfg, "positive")
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    records = _train_epochs(model, retain_train, cfg, cfg.epochs, rng, state,
                            params, on_epoch_end=_observe(on_epoch))
    if records:
        model.phases_done.append("positive")
    summary = PhaseSummary(
        phase="positive", epochs_run=len(records),
        final_train_loss=records[-1].train_loss if records else None,
        best_val_loss=None, stopped_early=False,
        wall_time=time.perf_counter() - t0)
    return RunReport(records=records, summaries=[summary])


def run_negative_phase(model: TransformerModel, forget_corpus,
                       cfg: PhaseConfig, on_epoch=None) -> RunReport:
    """Ascent on forget-set CE, restricted to the policy's unfrozen tail."""
    params, state = _phase_prologue(model, forget_corpus, cfg, "negative")
    t0 = time.perf_counter()
    eval_kw = dict(max_in=cfg.max_in, max_out=cfg.max_out,
                   mask_prompt=cfg.mask_prompt, batch_size=cfg.batch_size)
    ce_before = evaluation.mean_nll(model, forget_corpus, **eval_kw)
    rng = np.random.default_rng(cfg.seed)
    records = _train_epochs(model, forget_corpus, cfg, cfg.epochs, rng, state,
                            params, on_epoch_end=_observe(on_epoch))
    ce_after = evaluation.mean_nll(model, forget_corpus, **eval_kw)
    if records:
        model.phases_done.append("negative")
    summary = PhaseSummary(
        phase="negative", epochs_run=len(records),
        final_train_loss=records[-1].train_loss if records else None,
        best_val_loss=None, stopped_early=False,
        wall_time=time.perf_counter() - t0,
        extra={"forget_ce_before": ce_before, "forget_ce_after": ce_after})
    log.info("negative phase: forget CE %.4f -> %.4f", ce_before, ce_after)
    return RunReport(records=records, summaries=[summary])


def run_stabilization(model: TransformerModel, retain_train, retain_val,
                      cfg: PhaseConfig, on_epoch=None) -> RunReport:
    """Retain-set recovery with early stopping; restores the best-val state."""
    if not retain_val:
        raise DataError("stabilize phase needs a non-empty validation split")
    params, state = _phase_prologue(model, retain_train, cfg, "stabilize")
    es = cfg.early_stop
    t0 = time.perf_counter()
    eval_kw = dict(max_in=cfg.max_in, max_out=cfg.max_out,
                   mask_prompt=cfg.mask_prompt, batch_size=cfg.batch_size)
    best_val = evaluation.mean_nll(model, retain_val, **eval_kw)
    best_snap = snapshot_params(model)
    state_box = {"bad": 0, "stopped": False, "best": best_val}

    def on_epoch_end(rec: EpochRecord) -> bool:
        val = evaluation.mean_nll(model, retain_val, **eval_kw)
        rec.val_loss = val
        if on_epoch is not None:
            on_epoch(rec)
        if val < state_box["best"] - es.min_delta:
            state_box["best"] = val
            state_box["bad"] = 0
            best_snap.update(snapshot_params(model))
        else:
            state_box["bad"] += 1
            if state_box["bad"] >= es.patience:
                state_box["stopped"] = True
                return True
        return False

    rng = np.random.default_rng(cfg.seed)
    records = _train_epochs(model, retain_train, cfg, cfg.epochs, rng, state,
                            params, on_epoch_end=on_epoch_end)
    restore_params(model, best_snap)
    if records:
        model.phases_done.append("stabilize")
    summary = PhaseSummary(
        phase="stabilize", epochs_run=len(records),
        final_train_loss=records[-1].train_loss if records else None,
        best_val_loss=state_box["best"], stopped_early=state_box["stopped"],
        wall_time=time.perf_counter() - t0)
    log.info("stabilize: best val %.4f, stopped_early=%s",
             state_box["best"], state_box["stopped"])
    return RunReport(records=records, summaries=[summary])


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def run_pipeline(model: TransformerModel, retain_train, retain_val, forget_corpus,
                 pos_cfg: PhaseConfig, neg_cfg: PhaseConfig, stab_cfg: PhaseConfig,
                 probe_suite=None, include_forget_in_positive: bool = True,
                 on_epoch=None) -> RunReport:
    """positive -> negative -> stabilize, with snapshots and probe evals.

    The positive phase trains on retain plus forget by default: the model
    must actually hold the sensitive content before unlearning it (this
    stands in for pretraining exposure). Snapshots are taken at init,
    post_p1, post_p2 and final; probe evaluations run at the last three.
    """
    for cfg, want in ((pos_cfg, "positive"), (neg_cfg, "negative"),
                      (stab_cfg, "stabilize")):
        if cfg.phase != want:
            raise ConfigError(f"pipeline config order must be positive, negative, "
                              f"stabilize; got {cfg.phase} where {want} expected")
    report = RunReport()
    report.snapshots["init"] = snapshot_params(model)

    def maybe_eval(tag: str):
        if probe_suite is not None:
            report.evals[tag] = evaluation.evaluate_model(
                model, retain_val, forget_corpus, probe_suite,
                max_in=pos_cfg.max_in, max_out=pos_cfg.max_out,
                mask_prompt=pos_cfg.mask_prompt)

    p1_corpus = list(retain_train) + (list(forget_corpus)
                                      if include_forget_in_positive else [])
    report.merge(run_positive_phase(model, p1_corpus, pos_cfg, on_epoch=on_epoch))
    report.snapshots["post_p1"] = snapshot_params(model)
    maybe_eval("post_p1")

    report.merge(run_negative_phase(model, forget_corpus, neg_cfg,
                                    on_epoch=on_epoch))
    report.snapshots["post_p2"] = snapshot_params(model)
    maybe_eval("post_p2")

    report.merge(run_stabilization(model, retain_train, retain_val, stab_cfg,
                                   on_epoch=on_epoch))
    report.snapshots["final"] = snapshot_params(model)
    maybe_eval("final")

    report.status = "completed"
    return report


def run_joint_baseline(model: TransformerModel, retain_train, forget_corpus,
                       cfg: PhaseConfig, alpha: float,
                       on_epoch=None) -> RunReport:
    """Single-phase joint objective CE(retain) - alpha * CE(forget).

    Comparison baseline only; the supported path is the sequential
    pipeline. All parameters train; each step pairs one retain batch with
    one forget batch cycled round-robin.
    """
    if cfg.phase != "positive":
        raise ConfigError("joint baseline reuses a positive-phase config")
    if alpha < 0:
        raise ConfigError(f"alpha must be >= 0, got {alpha}")
    params, state = _phase_prologue(model, retain_train, cfg, "positive")
    if not forget_corpus:
        raise DataError("joint baseline needs a non-empty forget corpus")
    rng = np.random.default_rng(cfg.seed)
    records = []
    t0 = time.perf_counter()
    trainable = set(params)
    with _train_scope(model, trainable):
        for epoch in range(1, cfg.epochs + 1):
            te = time.perf_counter()
            order = rng.permutation(len(retain_train))
            f_order = rng.permutation(len(forget_corpus))
            losses = []
            f_pos = 0
            for lo in range(0, len(retain_train), cfg.batch_size):
                r_examples = [retain_train[i] for i in order[lo:lo + cfg.batch_size]]
                f_examples = [forget_corpus[f_order[(f_pos + j) % len(forget_corpus)]]
                              for j in range(cfg.batch_size)]
                f_pos += cfg.batch_size
                ag.reset_grads(model.params)
                tape = Tape()
                ce_r = _batch_ce(model, r_examples, cfg, tape)
                ce_f = _batch_ce(model, f_examples, cfg, tape)
                loss = ag.add(ce_r, ag.scale(ce_f, -alpha, tape), tape)
                ag.backward(loss, tape)
                adamw_step(params, state)
                ag.reset_grads(model.params)
                losses.append(float(ce_r.values))
            records.append(EpochRecord(
                phase="positive", epoch=epoch, train_loss=float(np.mean(losses)),
                val_loss=None, wall_time=time.perf_counter() - te,
                batch_losses=losses))
            if on_epoch is not None:
                on_epoch(records[-1])
    summary = PhaseSummary(
        phase="positive", epochs_run=len(records),
        final_train_loss=records[-1].train_loss if records else None,
        best_val_loss=None, stopped_early=False,
        wall_time=time.perf_counter() - t0, extra={"objective": "joint", "alpha": alpha})
    return RunReport(records=records, summaries=[summary])
