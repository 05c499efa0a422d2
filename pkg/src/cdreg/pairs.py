"""Ordered matrix pairs inside transformer blocks.

A pair is (upstream W1, downstream W2) such that the composed map W2 @ W1
acts on column vectors. Composable pairs are exact local products
(normalization scale into the following projection); functional pairs are
separated by a nonlinearity or the attention operator (value into output
projection, first FFN matrix into the second) but still form an
amplification route.

Storage convention: the model stores weights as (in_features, out_features)
acting on row vectors. The canonical column-vector form of a stored tensor
is therefore its transpose, and this module is the only place that adapter
lives. LN-scale upstreams are diagonal and self-transpose; the three
attention projections act as one concatenated downstream matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .model import TransformerModel

PAIR_SETS = ("A", "B", "C", "A+B")
DEFAULT_PAIR_SET = "A+B"


@dataclass(frozen=True)
class MatrixPair:
    kind: str  # composable | functional
    upstream: str  # ParamId of an LN scale vector or a weight tensor
    downstream: str  # ParamId or the concatenated-QKV pseudo id
    decay_targets: tuple[str, ...] = ("downstream",)

    @property
    def name(self) -> str:
        return f"{self.upstream}->{self.downstream}"


def _is_ln_scale(ref: str) -> bool:
    return ref.endswith(".ln1.g") or ref.endswith(".ln2.g")


def _is_qkv(ref: str) -> bool:
    return ref.endswith(".attn.qkv")


def resolve_param_ids(ref: str) -> tuple[str, ...]:
    """Underlying stored tensors behind a pair reference."""
    if _is_qkv(ref):
        stem = ref[: -len(".qkv")]
        return (f"{stem}.wq", f"{stem}.wk", f"{stem}.wv")
    return (ref,)


def canonical_matrix(model: TransformerModel, ref: str) -> np.ndarray:
    """Fetch a pair reference in canonical column-vector form."""
    p = model.params
    if _is_ln_scale(ref):
        return np.diag(p[ref])
    if _is_qkv(ref):
        ids = resolve_param_ids(ref)
        return np.hstack([p[i] for i in ids]).T.copy()
    return p[ref].T.copy()


def write_canonical(model: TransformerModel, ref: str, value: np.ndarray) -> None:
    """Write a canonical-form matrix back through the transpose adapter."""
    if _is_ln_scale(ref):
        raise ValueError(f"{ref}: LN scales are never written through the adapter")
    stored = np.ascontiguousarray(value.T)
    if _is_qkv(ref):
        ids = resolve_param_ids(ref)
        d = model.params[ids[0]].shape[1]
        for j, pid in enumerate(ids):
            model.params[pid] = stored[:, j * d : (j + 1) * d].copy()
        return
    if stored.shape != model.params[ref].shape:
        raise ValueError(
            f"{ref}: write-back shaped {stored.shape}, stored is {model.params[ref].shape}"
        )
    model.params[ref] = stored


def canonical_matrices(pair: MatrixPair, model: TransformerModel) -> tuple[np.ndarray, np.ndarray]:
    """(W1, W2) in canonical form; the composed map is W2 @ W1."""
    w1 = canonical_matrix(model, pair.upstream)
    w2 = canonical_matrix(model, pair.downstream)
    if w2.shape[1] != w1.shape[0]:
        raise ValueError(
            f"pair {pair.name}: canonical shapes {w2.shape} x {w1.shape} incompatible"
        )
    return w1, w2


def enumerate_pairs(model: TransformerModel, pair_set: str = DEFAULT_PAIR_SET) -> list[MatrixPair]:
    """All pairs of the selected set, block by block, composables first.

    Set A decays the second matrix of each composable pair, B the second of
    each functional pair, C both matrices of each functional pair, and A+B
    (the default) unions A and B with downstream-only targets.
    """
    if pair_set not in PAIR_SETS:
        raise ValueError(f"unknown pair set {pair_set!r}, expected one of {PAIR_SETS}")
    out: list[MatrixPair] = []
    func_targets = ("downstream", "upstream") if pair_set == "C" else ("downstream",)
    for i in range(model.config.depth):
        b = f"blocks.{i}"
        composable = [
            MatrixPair("composable", f"{b}.ln1.g", f"{b}.attn.qkv"),
            MatrixPair("composable", f"{b}.ln2.g", f"{b}.ffn.w1"),
        ]
        functional = [
            MatrixPair("functional", f"{b}.attn.wv", f"{b}.attn.wo", func_targets),
            MatrixPair("functional", f"{b}.ffn.w1", f"{b}.ffn.w2", func_targets),
        ]
        if pair_set == "A":
            out.extend(composable)
        elif pair_set in ("B", "C"):
            out.extend(functional)
        else:
            out.extend(composable + functional)
    _assert_disjoint_targets(out)
    return out


def _assert_disjoint_targets(pairs: list[MatrixPair]) -> None:
    # No stored tensor may be decayed through two pair roles.
    seen: set[str] = set()
    for pair in pairs:
        for role in pair.decay_targets:
            ref = pair.downstream if role == "downstream" else pair.upstream
            for pid in resolve_param_ids(ref):
                if pid in seen:
                    raise AssertionError(f"tensor {pid} is a decay target twice")
                seen.add(pid)


def upstream_normalizer(w1: np.ndarray) -> float:
    """d_out(W1) / ||W1||_F^2, the factor that normalizes the upstream matrix
    to root-mean-square row scale 1. Raises on a zero upstream."""
    n_sq = linalg.frobenius_norm_sq(w1)
    if n_sq == 0.0:
        raise ValueError("upstream matrix has zero Frobenius norm; normalization undefined")
    return w1.shape[0] / n_sq


def pair_energy(pair: MatrixPair, model: TransformerModel, normalized: bool = True) -> float:
    """||W2 W1||_F^2, optionally with the upstream scale-normalized.

    Uses the BLAS product for speed; equality with the fixed-order kernel is
    covered by the composition-identity tests.
    """
    w1, w2 = canonical_matrices(pair, model)
    raw = linalg.frobenius_norm_sq(w2 @ w1)
    if not normalized:
        return raw
    return upstream_normalizer(w1) * raw


def total_energy(model: TransformerModel, pair_list, normalized: bool = True) -> float:
    """Sum of pair energies; pairs with zero raw energy contribute exactly 0
    (their normalizer is never evaluated, so zeroed-out blocks are fine)."""
    total = 0.0
    # energies on a diverging model may overflow to inf; report them as-is
    with np.errstate(over="ignore", invalid="ignore"):
        for pair in pair_list:
            w1, w2 = canonical_matrices(pair, model)
            raw = linalg.frobenius_norm_sq(w2 @ w1)
            if raw == 0.0:
                continue
            total += upstream_normalizer(w1) * raw if normalized else raw
    return total


def pair_info(pair: MatrixPair, model: TransformerModel, normalized: bool = True) -> dict:
    """JSON-friendly pair description used by the CLI dump."""
    w1, w2 = canonical_matrices(pair, model)
    return {
        "kind": pair.kind,
        "upstream": pair.upstream,
        "downstream": pair.downstream,
        "decay_targets": list(pair.decay_targets),
        "upstream_shape": list(w1.shape),
        "downstream_shape": list(w2.shape),
        "energy": pair_energy(pair, model, normalized=normalized),
    }
