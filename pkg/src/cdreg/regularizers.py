"""Colinearity decay on matrix pairs, its loss-form ablation, the
block-output activation penalty baseline, and the regularization budget.

The pairwise energy ||W2 W1||_F^2 has matrix gradients

    d/dW1 = 2 W2^T W2 W1        d/dW2 = 2 W2 W1 W1^T

and the decoupled update applies W2 <- W2 - eta * lambda * W2 W1 W1^T, the
analytic factor 2 being absorbed into lambda. The loss-form variant keeps
the exact derivative (no absorption), so its W2 gradient equals twice the
decoupled direction; that bookkeeping is unit-tested.

The normalized objective rescales the upstream to W1 / (||W1||_F /
sqrt(d_out(W1))); the normalizer is treated as a constant of the current
step (no gradient flows through it).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal

import numpy as np

from . import linalg, pairs as pairs_mod
from .model import ActivationTrace, TransformerModel


@dataclass
class CdConfig:
    lambda_cd: float = 0.005
    normalized: bool = True
    pair_set: str = pairs_mod.DEFAULT_PAIR_SET
    # Per-target overrides keyed by the pair reference string (e.g. a
    # fine-tuning recipe that doubles the coefficient on the second FFN
    # matrix). Overrides take precedence over lambda_cd.
    per_matrix_overrides: dict[str, float] = field(default_factory=dict)
    stabilize_loss: bool = False  # loss mode only: previous-step ratio rescale

    def __post_init__(self):
        if self.lambda_cd < 0:
            raise ValueError("lambda_cd must be nonnegative")
        for key, lam in self.per_matrix_overrides.items():
            if lam < 0:
                raise ValueError(f"override for {key} must be nonnegative")

    def lam_for(self, ref: str) -> float:
        return self.per_matrix_overrides.get(ref, self.lambda_cd)


@dataclass
class TweoConfig:
    tau: float = 3.0
    p: int = 4
    epsilon: float = 1e-6
    lambda_base: float = 0.01
    lambda_schedule: str = "constant"  # constant | cosine
    rescale_to_task_loss: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.p < 1:
            raise ValueError("p must be a positive integer")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.lambda_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lambda_schedule {self.lambda_schedule!r}")

    def weight_at(self, step: int, total_steps: int) -> float:
        if self.lambda_schedule == "constant":
            return self.lambda_base
        frac = min(max(step / max(total_steps, 1), 0.0), 1.0)
        return self.lambda_base * 0.5 * (1.0 + np.cos(np.pi * frac))


def cd_gradient_w2(w1, w2) -> np.ndarray:
    """Exact gradient of ||W2 W1||_F^2 with respect to W2: 2 W2 W1 W1^T."""
    w1 = linalg.as_matrix(w1, "w1")
    w2 = linalg.as_matrix(w2, "w2")
    if w2.shape[1] != w1.shape[0]:
        raise ValueError(f"shape mismatch: W2 {w2.shape} x W1 {w1.shape}")
    return 2.0 * (w2 @ _sym(w1 @ w1.T))


def cd_gradient_w1(w1, w2) -> np.ndarray:
    """Exact gradient with respect to W1: 2 W2^T W2 W1."""
    w1 = linalg.as_matrix(w1, "w1")
    w2 = linalg.as_matrix(w2, "w2")
    if w2.shape[1] != w1.shape[0]:
        raise ValueError(f"shape mismatch: W2 {w2.shape} x W1 {w1.shape}")
    return 2.0 * (_sym(w2.T @ w2) @ w1)


def cd_row_gradient(w1, w2_row) -> np.ndarray:
    """Row form of the W2 gradient via the SVD of W1: 2 w^T U S^2 U^T.

    Equals the corresponding row of cd_gradient_w2; the SVD route makes the
    shrinkage along high-singular-value directions explicit.
    """
    w1 = linalg.as_matrix(w1, "w1")
    row = np.asarray(w2_row, dtype=np.float64).reshape(-1)
    if row.shape[0] != w1.shape[0]:
        raise ValueError(f"row length {row.shape[0]} != upstream rows {w1.shape[0]}")
    dec = linalg.svd(w1)
    proj = row @ dec.u
    return 2.0 * (proj * dec.s**2) @ dec.u.T


def _sym(g: np.ndarray) -> np.ndarray:
    return (g + g.T) / 2.0


# Training-loop hot paths use the BLAS product; agreement with the
# fixed-order kernel is pinned by the gradient and energy oracles.

def _direction(w1: np.ndarray, w2: np.ndarray, normalized: bool) -> np.ndarray:
    d = w2 @ _sym(w1 @ w1.T)
    if normalized:
        d *= pairs_mod.upstream_normalizer(w1)
    return d


def _direction_upstream(w1: np.ndarray, w2: np.ndarray, normalized: bool) -> np.ndarray:
    d = _sym(w2.T @ w2) @ w1
    if normalized:
        d *= pairs_mod.upstream_normalizer(w1)
    return d


def normalized_cd_direction(w1, w2) -> np.ndarray:
    """Applied decay direction (d_out(W1) / ||W1||_F^2) W2 W1 W1^T.

    The analytic factor 2 is absorbed into the decay coefficient, and the
    direction is exactly invariant to positive rescaling of W1.
    """
    w1 = linalg.as_matrix(w1, "w1")
    w2 = linalg.as_matrix(w2, "w2")
    return _direction(w1, w2, normalized=True)


@dataclass
class PairUpdate:
    pair: str
    kind: str
    target: str
    lam: float
    direction_norm: float
    energy_after: float = float("nan")


def apply_cd_update(model: TransformerModel, pair_list, eta: float, cfg: CdConfig) -> list[PairUpdate]:
    """Decoupled decay step W <- W - eta * lambda * direction on every decay
    target, reading all upstream matrices at their pre-update values.

    Returns per-pair applied-update statistics.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    staged: list[tuple[pairs_mod.MatrixPair, str, str, float, np.ndarray, np.ndarray]] = []
    for pair in pair_list:
        w1, w2 = pairs_mod.canonical_matrices(pair, model)
        for role in pair.decay_targets:
            ref = pair.downstream if role == "downstream" else pair.upstream
            lam = cfg.lam_for(ref)
            if lam == 0.0:
                staged.append((pair, role, ref, lam, None, None))
                continue
            # overflow here is handled by the explicit finiteness check
            with np.errstate(over="ignore", invalid="ignore"):
                if role == "downstream":
                    direction = _direction(w1, w2, cfg.normalized)
                    current = w2
                else:
                    direction = _direction_upstream(w1, w2, cfg.normalized)
                    current = w1
                update = current - eta * lam * direction
            if not np.all(np.isfinite(update)):
                raise FloatingPointError(f"non-finite CD update for pair {pair.name}")
            staged.append((pair, role, ref, lam, direction, update))
    report = []
    for pair, role, ref, lam, direction, update in staged:
        if update is not None:
            pairs_mod.write_canonical(model, ref, update)
        report.append(
            PairUpdate(
                pair=pair.name,
                kind=pair.kind,
                target=ref,
                lam=lam,
                direction_norm=0.0 if direction is None else float(
                    np.sqrt(linalg.frobenius_norm_sq(direction))
                ),
            )
        )
    for pair, entry in zip(pair_list, _group_first(report, pair_list)):
        entry.energy_after = pairs_mod.pair_energy(pair, model, normalized=cfg.normalized)
    return report


def _group_first(report: list[PairUpdate], pair_list) -> list[PairUpdate]:
    # One energy probe per pair: attach it to the pair's first report entry.
    out, i = [], 0
    for pair in pair_list:
        out.append(report[i])
        i += len(pair.decay_targets)
    return out


def cd_loss(model: TransformerModel, pair_list, cfg: CdConfig, stabilizer: float = 1.0):
    """Loss-form ablation: lambda * stabilizer * sum of pair energies.

    Gradients flow to both matrices of every pair (exact derivatives, the
    factor 2 is not absorbed); the normalizer of each upstream is frozen.
    Returns (scaled_value, raw_term, grads keyed by stored ParamId).
    """
    raw_term = 0.0
    weighted = 0.0
    grads: dict[str, np.ndarray] = {}

    def accumulate(ref: str, canonical_grad: np.ndarray):
        if pairs_mod._is_ln_scale(ref):
            _add(grads, ref, np.diag(canonical_grad).copy())
            return
        stored = canonical_grad.T
        for pid, chunk in zip(pairs_mod.resolve_param_ids(ref), _split_qkv(ref, stored, model)):
            _add(grads, pid, chunk)

    for pair in pair_list:
        w1, w2 = pairs_mod.canonical_matrices(pair, model)
        lam = cfg.lam_for(pair.downstream)
        factor = pairs_mod.upstream_normalizer(w1) if cfg.normalized else 1.0
        energy = factor * linalg.frobenius_norm_sq(w2 @ w1)
        raw_term += energy
        weighted += lam * energy
        coeff = lam * stabilizer
        accumulate(pair.downstream, coeff * factor * cd_gradient_w2(w1, w2))
        accumulate(pair.upstream, coeff * factor * cd_gradient_w1(w1, w2))
    return stabilizer * weighted, raw_term, grads


def _split_qkv(ref: str, stored_grad: np.ndarray, model: TransformerModel):
    ids = pairs_mod.resolve_param_ids(ref)
    if len(ids) == 1:
        return [stored_grad]
    d = model.params[ids[0]].shape[1]
    return [stored_grad[:, j * d : (j + 1) * d].copy() for j in range(len(ids))]


def _add(grads: dict, pid: str, value: np.ndarray):
    if pid in grads:
        grads[pid] = grads[pid] + value
    else:
        grads[pid] = value


def tweo_loss(trace: ActivationTrace, cfg: TweoConfig) -> float:
    """Mean over blocks of mean((|A| / (tau + eps))^p) on block outputs."""
    if trace.block_outputs is None:
        raise ValueError("trace does not retain block outputs; run forward in full mode")
    return tweo_value(trace.block_outputs, cfg)


def tweo_value(block_outputs, cfg: TweoConfig) -> float:
    if not block_outputs:
        return 0.0
    denom = cfg.tau + cfg.epsilon
    total = 0.0
    for a in block_outputs:
        total += float(np.mean((np.abs(a) / denom) ** cfg.p))
    return total / len(block_outputs)


def make_tweo_grad_fn(cfg: TweoConfig, weight: float):
    """Block-output gradient injector for the training loop.

    Returns fn(block_outputs) -> (weight * value, [d(weight * value)/dA_l]).
    """

    def fn(block_outputs):
        n_blocks = len(block_outputs)
        denom = cfg.tau + cfg.epsilon
        value = tweo_value(block_outputs, cfg)
        grads = []
        for a in block_outputs:
            scaled = np.abs(a) / denom
            g = (cfg.p / denom) * np.sign(a) * scaled ** (cfg.p - 1)
            grads.append(weight * g / (n_blocks * a.size))
        return weight * value, grads

    return fn


def budget_split(lambda_base_wd: float, ratio: float) -> tuple[float, float]:
    """Split a baseline weight-decay budget into (lambda_wd, lambda_cd) with
    lambda_cd = ratio * base and lambda_wd = base - lambda_cd.

    Computed in decimal so that decimal-friendly inputs give the decimal
    answers configs are written with (0.05 at ratio 0.1 -> exactly
    (0.045, 0.005)); the sum is conserved to machine precision.
    """
    if lambda_base_wd < 0 or ratio < 0:
        raise ValueError("budget inputs must be nonnegative")
    if ratio >= 1:
        raise ValueError("ratio must be below 1")
    base = Decimal(repr(float(lambda_base_wd)))
    lam_cd = float(base * Decimal(repr(float(ratio))))
    lam_wd = float(base - Decimal(repr(lam_cd)))
    return lam_wd, lam_cd


def effective_weight_decay(lambda_base_wd: float, lambda_cd: float) -> float:
    """Weight decay left in the budget after reserving lambda_cd."""
    if lambda_cd < 0 or lambda_base_wd < 0:
        raise ValueError("budget inputs must be nonnegative")
    if lambda_cd > lambda_base_wd:
        raise ValueError("lambda_cd exceeds the weight-decay budget")
    return float(Decimal(repr(float(lambda_base_wd))) - Decimal(repr(float(lambda_cd))))
