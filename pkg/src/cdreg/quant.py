"""Uniform affine fake quantization for low-bit (W4A4) evaluation.

Weights are quantized symmetrically per output channel; the inputs of each
quantized linear layer are quantized per tensor with an asymmetric unsigned
grid calibrated by min-max or percentile clipping. Layer norms, softmax, and
residual adds stay in full precision. Fake quantization keeps everything in
float64: quantize, clamp, dequantize.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from .model import TransformerModel, _forward

SCALE_FLOOR = 1e-12


class CalibrationError(RuntimeError):
    pass


@dataclass
class QuantConfig:
    weight_bits: int = 4
    act_bits: int = 4
    weight_granularity: str = "per_channel"  # per_channel | per_tensor, symmetric
    act_granularity: str = "per_tensor"  # asymmetric
    calibration: str = "minmax"  # minmax | percentile (activations)
    percentile_q: float = 99.99
    calib_batches: int = 8
    calib_batch_size: int = 128

    def __post_init__(self):
        # 16-bit is allowed as a near-lossless sanity setting.
        for bits in (self.weight_bits, self.act_bits):
            if not 2 <= bits <= 16:
                raise ValueError(f"bit width {bits} outside [2, 16]")
        if not 0 < self.percentile_q <= 100:
            raise ValueError("percentile_q must be in (0, 100]")
        if self.weight_granularity not in ("per_channel", "per_tensor"):
            raise ValueError(f"unknown weight granularity {self.weight_granularity!r}")
        if self.calibration not in ("minmax", "percentile"):
            raise ValueError(f"unknown calibration {self.calibration!r}")


@dataclass
class QuantParams:
    scale: np.ndarray | float  # positive; per tensor or per output channel
    zero_point: np.ndarray | int  # 0 for symmetric grids
    qmin: int
    qmax: int
    clip: float | None = None  # percentile clipping threshold, when used

    def to_json_dict(self) -> dict:
        scale = self.scale
        zp = self.zero_point
        return {
            "scale": scale.tolist() if isinstance(scale, np.ndarray) else scale,
            "zero_point": zp.tolist() if isinstance(zp, np.ndarray) else int(zp),
            "qmin": self.qmin,
            "qmax": self.qmax,
            "clip": self.clip,
        }


def _signed_range(bits: int) -> tuple[int, int]:
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


def _unsigned_range(bits: int) -> tuple[int, int]:
    return 0, 2**bits - 1


def calibrate_minmax(samples, bits: int, symmetric: bool = False) -> QuantParams:
    """Min-max quantization parameters for one tensor.

    Symmetric: signed grid, scale = max|x| / qmax. Asymmetric: unsigned grid
    over [min, max] extended to include zero, so that zero (and any constant
    sample value) is exactly representable; all-zero samples fall back to the
    scale floor with a centered zero point.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot calibrate from empty samples")
    if symmetric:
        qmin, qmax = _signed_range(bits)
        amax = float(np.max(np.abs(x)))
        scale = amax / qmax if amax > 0.0 else SCALE_FLOOR
        return QuantParams(scale=scale, zero_point=0, qmin=qmin, qmax=qmax)
    qmin, qmax = _unsigned_range(bits)
    lo = min(float(np.min(x)), 0.0)
    hi = max(float(np.max(x)), 0.0)
    if hi == lo:
        return QuantParams(scale=SCALE_FLOOR, zero_point=(qmin + qmax) // 2,
                           qmin=qmin, qmax=qmax)
    scale = (hi - lo) / (qmax - qmin)
    zp = int(np.clip(np.rint(-lo / scale), qmin, qmax))
    return QuantParams(scale=scale, zero_point=zp, qmin=qmin, qmax=qmax)


def nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    """q-th percentile by the nearest-rank rule on sorted values."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("empty values")
    k = int(np.ceil(q / 100.0 * v.size))
    return float(v[max(k, 1) - 1])


def calibrate_percentile(samples, q: float, bits: int, symmetric: bool = False) -> QuantParams:
    """Clip the range at the q-th nearest-rank percentile of |x|, then apply
    the min-max formulas to the clamped samples. q = 100 reproduces min-max
    exactly."""
    if not 0 < q <= 100:
        raise ValueError("q must be in (0, 100]")
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot calibrate from empty samples")
    clip = nearest_rank_percentile(np.abs(x), q)
    params = calibrate_minmax(np.clip(x, -clip, clip), bits, symmetric=symmetric)
    params.clip = clip
    return params


def calibrate_weight_per_channel(w: np.ndarray, bits: int) -> QuantParams:
    """Symmetric per-output-channel parameters for a stored (in, out) weight."""
    qmin, qmax = _signed_range(bits)
    amax = np.max(np.abs(w), axis=0)
    scale = np.where(amax > 0.0, amax / qmax, SCALE_FLOOR)
    return QuantParams(scale=scale, zero_point=0, qmin=qmin, qmax=qmax)


def fake_quantize(x, params: QuantParams) -> np.ndarray:
    """Quantize-clamp-dequantize with round-half-to-even.

    Idempotent bit-exactly: grid points map to themselves.
    """
    x = np.asarray(x, dtype=np.float64)
    q = np.clip(np.rint(x / params.scale) + params.zero_point, params.qmin, params.qmax)
    return (q - params.zero_point) * params.scale


QUANTIZED_BLOCK_WEIGHTS = ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.w1", "ffn.w2")


def quantized_weight_ids(model: TransformerModel) -> list[str]:
    ids = ["patch.w"]
    for i in range(model.config.depth):
        ids.extend(f"blocks.{i}.{w}" for w in QUANTIZED_BLOCK_WEIGHTS)
    ids.append("head.w")
    return ids


def observation_points(model: TransformerModel) -> list[str]:
    pts = ["patch.w"]
    for i in range(model.config.depth):
        pts.extend(f"blocks.{i}.{k}" for k in ("attn.qkv", "attn.wo", "ffn.w1", "ffn.w2"))
    pts.append("head.w")
    return pts


@dataclass
class QuantizedEvalModel:
    """Model copy with fake-quantized weights plus activation grids applied
    at every quantized linear layer's input during the forward pass."""

    model: TransformerModel
    act_params: dict[str, QuantParams]
    weight_params: dict[str, QuantParams]
    config: QuantConfig
    calib_counts: dict[str, int] = field(default_factory=dict)

    def logits(self, images: np.ndarray) -> np.ndarray:
        def hook(point: str, x: np.ndarray) -> np.ndarray:
            return fake_quantize(x, self.act_params[point])

        out, _, _ = _forward(self.model, images, input_hook=hook)
        return out


def quantize_model_w4a4(model: TransformerModel, calib_data: data_mod.Dataset,
                        cfg: QuantConfig, calib_seed: int = 0) -> QuantizedEvalModel:
    """Fake-quantize all linear projections and calibrate their input grids.

    Weights: symmetric min-max, per output channel by default. Activations:
    per-tensor asymmetric, min-max or percentile per cfg.calibration, using
    the first cfg.calib_batches batches of calib_data under calib_seed.
    """
    qmodel = model.copy()
    weight_params: dict[str, QuantParams] = {}
    for wid in quantized_weight_ids(qmodel):
        w = qmodel.params[wid]
        if cfg.weight_granularity == "per_channel":
            params = calibrate_weight_per_channel(w, cfg.weight_bits)
        else:
            params = calibrate_minmax(w, cfg.weight_bits, symmetric=True)
        qmodel.params[wid] = fake_quantize(w, params)
        weight_params[wid] = params

    collected: dict[str, list[np.ndarray]] = {}
    seen = 0
    for batch in data_mod.batches(calib_data, cfg.calib_batch_size, seed=calib_seed, epoch=0):
        _, trace, _ = _forward(model, batch.images, trace_mode="full")
        for point, arr in trace.linear_inputs.items():
            collected.setdefault(point, []).append(arr)
        seen += 1
        if seen >= cfg.calib_batches:
            break

    act_params: dict[str, QuantParams] = {}
    counts: dict[str, int] = {}
    for point in observation_points(model):
        if point not in collected or not collected[point]:
            raise CalibrationError(f"no calibration samples at observation point {point!r}")
        samples = np.concatenate(collected[point], axis=0)
        counts[point] = int(samples.size)
        if cfg.calibration == "percentile":
            act_params[point] = calibrate_percentile(samples, cfg.percentile_q, cfg.act_bits)
        else:
            act_params[point] = calibrate_minmax(samples, cfg.act_bits)
    return QuantizedEvalModel(model=qmodel, act_params=act_params,
                              weight_params=weight_params, config=cfg,
                              calib_counts=counts)


def evaluate(model_or_quantized, dataset: data_mod.Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy over the dataset, deterministic in-order evaluation."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    for start in range(0, len(dataset), batch_size):
        images = dataset.images[start : start + batch_size]
        labels = dataset.labels[start : start + batch_size]
        if isinstance(model_or_quantized, QuantizedEvalModel):
            logits = model_or_quantized.logits(images)
        else:
            logits, _, _ = _forward(model_or_quantized, images)
        correct += int(np.sum(np.argmax(logits, axis=-1) == labels))
    return correct / len(dataset)


def quantization_report(qm: QuantizedEvalModel, fp_accuracy: float, quant_accuracy: float) -> dict:
    """JSON report: per-layer grids, calibration counts, and the FP/quantized
    accuracy pair."""
    return {
        "config": {
            "weight_bits": qm.config.weight_bits,
            "act_bits": qm.config.act_bits,
            "weight_granularity": qm.config.weight_granularity,
            "act_granularity": qm.config.act_granularity,
            "calibration": qm.config.calibration,
            "percentile_q": qm.config.percentile_q,
            "calib_batches": qm.config.calib_batches,
        },
        "weights": {k: v.to_json_dict() for k, v in qm.weight_params.items()},
        "activations": {k: v.to_json_dict() for k, v in qm.act_params.items()},
        "calibration_sample_counts": qm.calib_counts,
        "fp_accuracy": fp_accuracy,
        "quant_accuracy": quant_accuracy,
        "acc_drop": fp_accuracy - quant_accuracy,
    }
