"""AdamW with decoupled weight decay, warmup-cosine schedule, and the
train-step phase contract.

One step runs, in order: (1) forward with activation tracing, (2) task loss
plus any loss-mode regularizer term, (3) backward, (4) the decoupled pair
decay on current weights, (5) the optimizer update with the budgeted weight
decay. The pair decay therefore sees pre-optimizer weights and the optimizer
sees post-decay weights.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import pairs as pairs_mod, regularizers as reg
from .model import TransformerModel, _forward, backprop_from_cache, is_decayable, softmax_cross_entropy

REG_MODES = ("none", "cd_decay", "cd_loss", "tweo")


@dataclass
class OptimizerConfig:
    lr_peak: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_wd: float = 0.05
    warmup_steps: int = 100
    total_steps: int = 2000
    schedule: str = "cosine"  # cosine | constant

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must be in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, model: TransformerModel) -> "OptimizerState":
        return cls(
            m={k: np.zeros_like(p) for k, p in model.params.items()},
            v={k: np.zeros_like(p) for k, p in model.params.items()},
        )


def lr_at(step: int, cfg: OptimizerConfig) -> float:
    """Linear 1-indexed ramp to lr_peak over warmup_steps, then cosine to 0
    at total_steps (or flat lr_peak under the constant schedule)."""
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps:
        if cfg.warmup_steps == 0:
            ramp = 1.0
        else:
            ramp = step / cfg.warmup_steps
        return cfg.lr_peak * ramp
    if cfg.schedule == "constant":
        return cfg.lr_peak
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_peak * 0.5 * (1.0 + np.cos(np.pi * progress))


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimizerState, cfg: OptimizerConfig, lr: float,
               lambda_wd: float | None = None) -> None:
    """Bias-corrected Adam update with multiplicative decoupled decay.

    Decay applies to projection weight matrices only (is_decayable); LN
    parameters, biases, and the class/positional tokens are exempt.
    """
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    wd = cfg.lambda_wd if lambda_wd is None else lambda_wd
    state.t += 1
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if wd != 0.0 and is_decayable(name):
            p *= 1.0 - lr * wd
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


@dataclass
class RegState:
    """Previous-step loss magnitudes for ratio-stabilized loss terms."""

    prev_task_loss: float | None = None
    prev_raw_term: float | None = None

    def stabilizer(self) -> float:
        if self.prev_task_loss is None or self.prev_raw_term is None:
            return 1.0
        if self.prev_raw_term == 0.0:
            return 1.0
        return self.prev_task_loss / self.prev_raw_term


@dataclass
class StepMetrics:
    step: int
    lr: float
    task_loss: float
    reg_term: float
    total_loss: float
    grad_norm: float
    pair_energy_total: float
    max_act_module: float
    max_act_block: float
    lambda_wd: float
    timings: dict[str, float] = field(default_factory=dict)
    cd_updates: list | None = None

    def to_json_dict(self, include_timings: bool = False) -> dict:
        d = {
            "step": self.step,
            "lr": self.lr,
            "task_loss": self.task_loss,
            "reg_term": self.reg_term,
            "total_loss": self.total_loss,
            "grad_norm": self.grad_norm,
            "pair_energy_total": self.pair_energy_total,
            "max_act_module": self.max_act_module,
            "max_act_block": self.max_act_block,
            "lambda_wd": self.lambda_wd,
        }
        if self.cd_updates is not None:
            d["cd_updates"] = [
                {
                    "pair": u.pair,
                    "target": u.target,
                    "lambda": u.lam,
                    "direction_norm": u.direction_norm,
                    "energy_after": u.energy_after,
                }
                for u in self.cd_updates
            ]
        if include_timings:
            d["timings_ms"] = self.timings
        return d


def train_step(model: TransformerModel, batch, reg_mode: str, opt_cfg: OptimizerConfig,
               opt_state: OptimizerState, step: int, lambda_wd: float,
               cd_cfg: reg.CdConfig | None = None, tweo_cfg: reg.TweoConfig | None = None,
               pair_list=None, reg_state: RegState | None = None,
               phase_hook=None) -> StepMetrics:
    """One optimization step under the selected regularization mode.

    lambda_wd is the effective (budgeted) weight decay for this run; the
    caller computes it once from the baseline budget.
    """
    if reg_mode not in REG_MODES:
        raise ValueError(f"unknown reg_mode {reg_mode!r}")
    if reg_mode in ("cd_decay", "cd_loss") and (cd_cfg is None or pair_list is None):
        raise ValueError(f"{reg_mode} requires cd_cfg and pair_list")
    if reg_mode == "tweo" and tweo_cfg is None:
        raise ValueError("tweo requires tweo_cfg")
    timings: dict[str, float] = {}

    def hook(phase: str):
        if phase_hook is not None:
            phase_hook(phase, model)

    t0 = time.perf_counter()
    logits, trace, cache = _forward(model, batch.images, trace_mode="maxima", want_cache=True)
    timings["forward"] = (time.perf_counter() - t0) * 1e3
    hook("forward")

    task_loss, dlogits = softmax_cross_entropy(logits, batch.labels)
    reg_term = 0.0
    raw_term = None
    extra_block_grads = None
    loss_grads = None
    if reg_mode == "cd_loss":
        stab = reg_state.stabilizer() if (reg_state and cd_cfg.stabilize_loss) else 1.0
        reg_term, raw_term, loss_grads = reg.cd_loss(model, pair_list, cd_cfg, stabilizer=stab)
    elif reg_mode == "tweo":
        stab = reg_state.stabilizer() if (reg_state and tweo_cfg.rescale_to_task_loss) else 1.0
        weight = tweo_cfg.weight_at(step, opt_cfg.total_steps) * stab
        fn = reg.make_tweo_grad_fn(tweo_cfg, weight)
        block_outputs = [bc["y"] for bc in cache["blocks"]]
        raw_term = reg.tweo_value(block_outputs, tweo_cfg)
        reg_term, extra_block_grads = fn(block_outputs)
    hook("loss")

    t0 = time.perf_counter()
    grads = backprop_from_cache(model, cache, dlogits, extra_block_grads)
    if loss_grads is not None:
        for name, g in loss_grads.items():
            grads[name] = grads[name] + g
    timings["backward"] = (time.perf_counter() - t0) * 1e3
    hook("backward")

    lr = lr_at(step, opt_cfg)
    cd_updates = None
    t0 = time.perf_counter()
    if reg_mode == "cd_decay" and lr > 0:
        cd_updates = reg.apply_cd_update(model, pair_list, lr, cd_cfg)
    timings["cd"] = (time.perf_counter() - t0) * 1e3
    hook("cd")

    t0 = time.perf_counter()
    adamw_step(model.params, grads, opt_state, opt_cfg, lr, lambda_wd=lambda_wd)
    timings["optimizer"] = (time.perf_counter() - t0) * 1e3
    hook("optimizer")

    if reg_state is not None:
        reg_state.prev_task_loss = task_loss
        if raw_term is not None:
            reg_state.prev_raw_term = raw_term

    energy_set = cd_cfg.pair_set if cd_cfg is not None else pairs_mod.DEFAULT_PAIR_SET
    energy_pairs = pair_list if pair_list is not None else pairs_mod.enumerate_pairs(model, energy_set)
    pair_energy_total = pairs_mod.total_energy(model, energy_pairs)

    grad_norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    return StepMetrics(
        step=step,
        lr=float(lr),
        task_loss=task_loss,
        reg_term=float(reg_term),
        total_loss=task_loss + float(reg_term),
        grad_norm=grad_norm,
        pair_energy_total=float(pair_energy_total),
        max_act_module=trace.overall_module_max(),
        max_act_block=trace.overall_block_max(),
        lambda_wd=float(lambda_wd),
        timings=timings,
        cd_updates=cd_updates,
    )
