"""Losses, curriculum schedule, optimizer, and the training loop.

Each step runs two forwards over the batch with shared parameters: a
sparse pass (trimmers active, Gumbel-sampled soft gates) and a full pass
(no gates). The objective is

    L = task(sparse) + lambda_sd * [task(full) + KL(sparse || full.detach)]
        + lambda_cost * mean_batch[(beta_t - gamma_t)^2 + (beta_h - gamma_h)^2]

with the budgets gamma annealed linearly from 1.0 to their targets over
`curriculum_fraction` of the steps. Teacher logits are detached inside the
KL term so distillation only pulls the sparse pass toward the full one;
the full pass still trains through its own task term.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig, TrainConfig
from .data import GridDataset
from .rng import RngStream
from .runtime import AdaptiveModel
from .tensor import Tensor, exp, log_softmax


def single_thread_blas():
    """BLAS thread-pool limiter; the desk-scale GEMMs run faster unthreaded."""
    try:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(limits=1, user_api="blas")
    except ImportError:
        return contextlib.nullcontext()


# -- losses -----------------------------------------------------------------


def task_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy, log-sum-exp stabilized."""
    labels = np.asarray(labels)
    if labels.ndim == 0:
        labels = labels[None]
    n_classes = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"label out of range [0, {n_classes}): {labels}")
    ls = log_softmax(logits, axis=-1)
    picked = ls[np.arange(labels.shape[0]), labels]
    return -picked.mean()


def kl_divergence(logits_p: Tensor, logits_q: Tensor) -> Tensor:
    """Mean KL(softmax(p) || softmax(q)) over the batch; q is detached."""
    ls_p = log_softmax(logits_p, axis=-1)
    ls_q = log_softmax(logits_q.detach(), axis=-1)
    return (exp(ls_p) * (ls_p - ls_q)).sum(axis=-1).mean()


def self_distillation_loss(logits_sparse: Tensor, logits_full: Tensor,
                           labels: np.ndarray) -> Tensor:
    """Full-pass task loss plus alignment of the sparse pass to it."""
    return task_loss(logits_full, labels) + kl_divergence(logits_sparse, logits_full)


def cost_loss(beta_t: Tensor, beta_h: Tensor, gamma_t: float, gamma_h: float) -> Tensor:
    """Squared budget gaps, averaged over the batch."""
    return ((beta_t - gamma_t) ** 2 + (beta_h - gamma_h) ** 2).mean()


def curriculum_gamma(step: int, total_steps: int, fraction: float, target: float) -> float:
    """Linear 1.0 -> target over `fraction` of the steps, then constant."""
    if not (0 <= step <= total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    horizon = fraction * total_steps
    progress = min(step / horizon, 1.0) if horizon > 0 else 1.0
    return 1.0 - (1.0 - target) * progress


def tau_at(cfg: TrainConfig, step: int) -> float:
    """Fixed tau, or a linear anneal to tau_final when it is set (> 0)."""
    if cfg.tau_final <= 0.0 or cfg.steps <= 1:
        return cfg.tau
    frac = step / (cfg.steps - 1)
    return cfg.tau + (cfg.tau_final - cfg.tau) * min(frac, 1.0)


# -- optimizer -----------------------------------------------------------------


class AdaptiveMomentOptimizer:
    """Second-moment adaptive update with bias correction and linear warmup.

    theta <- theta - lr_t * m_hat / (sqrt(v_hat) + eps), where v is the
    beta2-EMA of g^2 and m is the beta1-EMA of g (beta1=0 reduces m_hat to
    the raw gradient: the momentum-free default).
    """

    def __init__(self, params: dict, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.warmup_steps = max(1, int(cfg.warmup_fraction * cfg.steps))
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.m = ({k: np.zeros_like(p.data) for k, p in params.items()}
                  if cfg.beta1 > 0 else None)

    def lr_at(self, t: int) -> float:
        lr = self.cfg.learning_rate
        if t <= self.warmup_steps:
            return lr * t / self.warmup_steps
        return lr

    def step(self) -> None:
        self.t += 1
        cfg = self.cfg
        lr = self.lr_at(self.t)
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            v = self.v[k]
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            v_hat = v / (1.0 - cfg.beta2 ** self.t)
            if self.m is not None:
                m = self.m[k]
                m *= cfg.beta1
                m += (1.0 - cfg.beta1) * g
                m_hat = m / (1.0 - cfg.beta1 ** self.t)
            else:
                m_hat = g
            p.data -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -- training loop ------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    loss_task: float
    loss_sd: float
    loss_cost: float
    beta_t: float
    beta_h: float
    gamma_t: float
    gamma_h: float
    accuracy: float

    def row(self) -> str:
        return "\t".join([
            str(self.step), repr(self.loss_task), repr(self.loss_sd),
            repr(self.loss_cost), repr(self.beta_t), repr(self.beta_h),
            repr(self.gamma_t), repr(self.gamma_h), repr(self.accuracy),
        ])

    @staticmethod
    def header() -> str:
        return "step\tloss_task\tloss_sd\tloss_cost\tbeta_t\tbeta_h\tgamma_t\tgamma_h\taccuracy"


@dataclass
class TrainResult:
    model: AdaptiveModel
    records: list = field(default_factory=list)


def train_step(model: AdaptiveModel, batch, cfg: TrainConfig,
               optimizer: AdaptiveMomentOptimizer, step: int,
               rng: RngStream) -> StepRecord:
    """One optimization step over (text, patches, labels)."""
    text, patches, labels = batch
    gamma_t = curriculum_gamma(step, cfg.steps, cfg.curriculum_fraction, cfg.gamma_t_target)
    gamma_h = curriculum_gamma(step, cfg.steps, cfg.curriculum_fraction, cfg.gamma_h_target)

    fwd = model.forward_train(text, patches, tau=tau_at(cfg, step), rng=rng,
                              straight=cfg.straight_through,
                              with_full_pass=cfg.lambda_sd != 0.0)
    l_task = task_loss(fwd.logits, labels)
    total = l_task
    if cfg.lambda_sd != 0.0:
        l_sd = self_distillation_loss(fwd.logits, fwd.logits_full, labels)
        total = total + cfg.lambda_sd * l_sd
    else:
        l_sd = Tensor(np.zeros(()))
    l_cost = cost_loss(fwd.beta_t, fwd.beta_h, gamma_t, gamma_h)
    if cfg.lambda_cost != 0.0:
        total = total + cfg.lambda_cost * l_cost

    if not np.isfinite(total.data):
        raise RuntimeError(
            f"non-finite loss at step {step}: task={l_task.data}, "
            f"sd={l_sd.data}, cost={l_cost.data}"
        )

    optimizer.zero_grad()
    total.backward()
    optimizer.step()

    acc = float(np.mean(np.argmax(fwd.logits.data, axis=-1) == labels))
    return StepRecord(step, l_task.item(), l_sd.item(), l_cost.item(),
                      float(fwd.beta_t.data.mean()), float(fwd.beta_h.data.mean()),
                      gamma_t, gamma_h, acc)


def train(run_cfg: RunConfig, progress=None) -> TrainResult:
    """Full loop: deterministic given the config (seed included)."""
    cfg = run_cfg.train
    dataset = GridDataset(run_cfg.data, run_cfg.model)
    root = RngStream(cfg.seed)
    model = AdaptiveModel(run_cfg.model, root.child("init"))
    optimizer = AdaptiveMomentOptimizer(model.params(), cfg)

    records = []
    with single_thread_blas():
        for step in range(cfg.steps):
            batch = dataset.batch(root.child("batch", step), cfg.batch_size)
            rec = train_step(model, batch, cfg, optimizer, step, root.child("gumbel", step))
            records.append(rec)
            if progress is not None and (step + 1) % max(1, cfg.steps // 20) == 0:
                progress(rec)
    return TrainResult(model, records)
