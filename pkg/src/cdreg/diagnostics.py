"""Measurement machinery: activation maxima, pair energies, alignment of
downstream rows with upstream singular directions, the direction-zeroing
intervention, and agreement between the FFN branch and its linear surrogate.

Everything here is read-only on the model; the intervention returns a
modified copy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod, linalg, pairs as pairs_mod
from .model import TransformerModel, _activation, _forward, _layer_norm, ffn_surrogate


@dataclass
class MaxActReport:
    module_max: float
    block_max: float
    per_block: list[dict]

    def to_json_dict(self) -> dict:
        return {
            "module_max": self.module_max,
            "block_max": self.block_max,
            "per_block": self.per_block,
        }


def max_activation(model: TransformerModel, dataset: data_mod.Dataset,
                   batch_size: int = 256) -> MaxActReport:
    """Max-abs activations over the whole dataset, split into the six
    module-internal points and the two block-output points per block."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    per_block: list[dict] | None = None
    for start in range(0, len(dataset), batch_size):
        images = dataset.images[start : start + batch_size]
        _, trace, _ = _forward(model, images, trace_mode="maxima")
        if per_block is None:
            per_block = [
                {"module": dict(mm), "block": dict(bm)}
                for mm, bm in zip(trace.module_max, trace.block_max)
            ]
        else:
            for entry, mm, bm in zip(per_block, trace.module_max, trace.block_max):
                for k, v in mm.items():
                    entry["module"][k] = max(entry["module"][k], v)
                for k, v in bm.items():
                    entry["block"][k] = max(entry["block"][k], v)
    module_max = max((max(e["module"].values()) for e in per_block), default=0.0)
    block_max = max((max(e["block"].values()) for e in per_block), default=0.0)
    return MaxActReport(module_max=module_max, block_max=block_max, per_block=per_block)


@dataclass
class AlignmentEntry:
    """Alignment of one pair: alpha[i, j] = |w2_row_j_normalized . u_i|."""

    alpha: np.ndarray  # (r, n_rows)
    s: np.ndarray  # (r,)
    per_direction_max: np.ndarray  # (r,)
    per_direction_sumsq: np.ndarray  # (r,)


def alignment_scores(w1, w2) -> AlignmentEntry:
    """Alignment between left singular directions of W1 and L2-normalized
    rows of W2. Rows with zero norm score 0 by convention."""
    w1 = linalg.as_matrix(w1, "w1")
    w2 = linalg.as_matrix(w2, "w2")
    dec = linalg.svd(w1)
    norms = np.sqrt(np.sum(w2 * w2, axis=1, keepdims=True))
    safe = np.where(norms > 0.0, norms, 1.0)
    w2_hat = np.where(norms > 0.0, w2 / safe, 0.0)
    alpha = np.abs(w2_hat @ dec.u).T  # (r, n_rows)
    return AlignmentEntry(
        alpha=alpha,
        s=dec.s.copy(),
        per_direction_max=alpha.max(axis=1) if alpha.size else np.zeros(0),
        per_direction_sumsq=np.sum(alpha**2, axis=1) if alpha.size else np.zeros(0),
    )


def ffn_pairs(model: TransformerModel, blocks=None) -> list[pairs_mod.MatrixPair]:
    """The (W_F1, W_F2) functional pair of each selected block."""
    sel = range(model.config.depth) if blocks is None else blocks
    return [
        pairs_mod.MatrixPair("functional", f"blocks.{i}.ffn.w1", f"blocks.{i}.ffn.w2")
        for i in sel
    ]


@dataclass
class RankedDirection:
    block: int
    index: int  # singular index within the block's upstream
    score: float
    s: float


@dataclass
class InterventionReport:
    directions: list[RankedDirection]
    energy_before: dict[int, float]  # unnormalized pair energy per block
    energy_after: dict[int, float]

    def to_json_dict(self) -> dict:
        return {
            "directions": [
                {"block": d.block, "index": d.index, "score": d.score, "s": d.s}
                for d in self.directions
            ],
            "energy_before": {str(k): v for k, v in self.energy_before.items()},
            "energy_after": {str(k): v for k, v in self.energy_after.items()},
        }


def rank_aligned_directions(model: TransformerModel, blocks=None,
                            rank_by: str = "max") -> list[RankedDirection]:
    """All (block, singular index) candidates sorted by alignment score,
    ties broken by larger singular value, then lower block index."""
    if rank_by not in ("max", "sumsq"):
        raise ValueError(f"rank_by must be max or sumsq, got {rank_by!r}")
    ranked: list[RankedDirection] = []
    for pair in ffn_pairs(model, blocks):
        block = int(pair.upstream.split(".")[1])
        w1, w2 = pairs_mod.canonical_matrices(pair, model)
        entry = alignment_scores(w1, w2)
        scores = entry.per_direction_max if rank_by == "max" else entry.per_direction_sumsq
        for i in range(entry.s.shape[0]):
            ranked.append(RankedDirection(block=block, index=i,
                                          score=float(scores[i]), s=float(entry.s[i])))
    ranked.sort(key=lambda d: (-d.score, -d.s, d.block, d.index))
    return ranked


def zero_top_aligned_directions(model: TransformerModel, k: int, blocks=None,
                                rank_by: str = "max"):
    """Zero the k most-aligned upstream singular directions of the FFN pairs.

    Each selected direction's singular value is set to zero and the upstream
    matrix rebuilt from its SVD. Returns (modified model copy,
    InterventionReport); energies reported are unnormalized.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = rank_aligned_directions(model, blocks, rank_by)
    if k > len(ranked):
        raise ValueError(f"k={k} exceeds the {len(ranked)} available directions")
    chosen = ranked[:k]
    out = model.copy()
    target_blocks = sorted({d.block for d in chosen})
    energy_before: dict[int, float] = {}
    energy_after: dict[int, float] = {}
    for pair in ffn_pairs(model, target_blocks):
        block = int(pair.upstream.split(".")[1])
        energy_before[block] = pairs_mod.pair_energy(pair, model, normalized=False)
        w1 = pairs_mod.canonical_matrix(model, pair.upstream)
        dec = linalg.svd(w1)
        s_new = dec.s.copy()
        for d in chosen:
            if d.block == block:
                s_new[d.index] = 0.0
        w1_new = linalg.matmul(dec.u * s_new, dec.v.T)
        pairs_mod.write_canonical(out, pair.upstream, w1_new)
        energy_after[block] = pairs_mod.pair_energy(pair, out, normalized=False)
    return out, InterventionReport(directions=chosen, energy_before=energy_before,
                                   energy_after=energy_after)


def surrogate_agreement(model: TransformerModel, block: int, probe_batch) -> dict:
    """Pearson correlation between the true FFN branch output and the
    no-activation surrogate over a probe batch, plus both maxima.

    Report-only; sets undefined=True when either side has zero variance.
    """
    images = getattr(probe_batch, "images", probe_batch)
    if images.shape[0] == 0:
        raise ValueError("empty probe batch")
    _, _, cache = _forward(model, images, want_cache=True)
    bc = cache["blocks"][block]
    p = model.params
    pre = f"blocks.{block}"
    ln2_out, _, _ = _layer_norm(bc["x_attn"], p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
    h_pre = ln2_out @ p[f"{pre}.ffn.w1"] + p[f"{pre}.ffn.b1"]
    real = _activation(model.config.activation, h_pre) @ p[f"{pre}.ffn.w2"] + p[f"{pre}.ffn.b2"]
    flat_in = ln2_out.reshape(-1, model.config.d_model)
    surrogate = ffn_surrogate(model, block, flat_in)
    x = real.reshape(-1)
    y = surrogate.reshape(-1)
    out = {
        "max_real": float(np.max(np.abs(x))),
        "max_surrogate": float(np.max(np.abs(y))),
        "pearson_r": None,
        "undefined": False,
    }
    if np.std(x) == 0.0 or np.std(y) == 0.0:
        out["undefined"] = True
        return out
    out["pearson_r"] = float(np.corrcoef(x, y)[0, 1])
    return out


def total_pair_energy(model: TransformerModel, pair_set: str = pairs_mod.DEFAULT_PAIR_SET,
                      normalized: bool = True) -> float:
    """Sum of pair energies over every block's pairs in the selected set.

    Pairs whose raw energy is exactly zero contribute zero even when their
    upstream norm is zero (all-zero blocks report zero total energy)."""
    return float(
        pairs_mod.total_energy(model, pairs_mod.enumerate_pairs(model, pair_set), normalized)
    )
