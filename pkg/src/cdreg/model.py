"""Tiny pre-norm ViT classifier with exact reverse-mode gradients in numpy.

The block wiring is the standard pre-norm form

    X' = X + Attn(LN1(X))        Y = X' + FFN(LN2(X'))

with softmax attention scaled by 1/sqrt(d_head), a class token, learned
positional embeddings, and a classifier head on the class token. Everything
runs in float64 and is deterministic for a fixed seed.

Parameters live in a flat dict keyed by ParamId strings:

    patch.w, patch.b, cls, pos,
    blocks.{i}.ln1.g/.b, blocks.{i}.attn.wq/.bq/.wk/.bk/.wv/.bv/.wo/.bo,
    blocks.{i}.ln2.g/.b, blocks.{i}.ffn.w1/.b1/.w2/.b2,
    final_ln.g, final_ln.b, head.w, head.b

Weights are stored as (in_features, out_features) acting on row vectors,
y = x @ W. The pairs module owns the adapter to column-vector convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .checkpoint import load_tensors, save_tensors

LN_EPS = 1e-12
INIT_STD = 0.02

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class NonFiniteActivationError(FloatingPointError):
    def __init__(self, block: str, tensor: str):
        self.block = block
        self.tensor = tensor
        super().__init__(f"non-finite activation in {block}, tensor {tensor!r}")


@dataclass
class ModelConfig:
    image_side: int = 16
    patch_side: int = 4
    channels: int = 1
    d_model: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    classes: int = 10
    activation: str = "gelu"  # gelu | relu | identity (identity is a diagnostic hook)
    seed: int = 0

    def __post_init__(self):
        if self.image_side % self.patch_side != 0:
            raise ValueError("image_side must be divisible by patch_side")
        if self.d_model % self.heads != 0:
            raise ValueError("d_model must be divisible by heads")
        if self.activation not in ("gelu", "relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    @property
    def d_ff(self) -> int:
        return int(round(self.mlp_ratio * self.d_model))

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch_side) ** 2

    @property
    def seq_len(self) -> int:
        return self.n_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_side * self.patch_side


@dataclass
class ActivationTrace:
    """Per-forward record of activation extrema.

    module_max[l] holds max-abs over the six module-internal outputs of block
    l (q, k, v, attn_out, ffn_hidden, ffn_out); block_max[l] holds max-abs of
    the two block outputs (attn_residual = X', output = Y). In "full" mode
    linear_inputs retains the flattened input of every quantizable linear
    layer and block_outputs retains each block's Y tensor.
    """

    module_max: list[dict[str, float]] = field(default_factory=list)
    block_max: list[dict[str, float]] = field(default_factory=list)
    linear_inputs: dict[str, np.ndarray] | None = None
    block_outputs: list[np.ndarray] | None = None

    def overall_module_max(self) -> float:
        return max((max(d.values()) for d in self.module_max), default=0.0)

    def overall_block_max(self) -> float:
        return max((max(d.values()) for d in self.block_max), default=0.0)


@dataclass
class TransformerModel:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def copy(self) -> "TransformerModel":
        return TransformerModel(self.config, {k: v.copy() for k, v in self.params.items()})


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, t, c = cfg.d_model, cfg.d_ff, cfg.seq_len, cfg.classes
    shapes: dict[str, tuple[int, ...]] = {
        "patch.w": (cfg.patch_dim, d),
        "patch.b": (d,),
        "cls": (d,),
        "pos": (t, d),
    }
    for i in range(cfg.depth):
        p = f"blocks.{i}"
        shapes[f"{p}.ln1.g"] = (d,)
        shapes[f"{p}.ln1.b"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"{p}.attn.{w}"] = (d, d)
        for b in ("bq", "bk", "bv", "bo"):
            shapes[f"{p}.attn.{b}"] = (d,)
        shapes[f"{p}.ln2.g"] = (d,)
        shapes[f"{p}.ln2.b"] = (d,)
        shapes[f"{p}.ffn.w1"] = (d, f)
        shapes[f"{p}.ffn.b1"] = (f,)
        shapes[f"{p}.ffn.w2"] = (f, d)
        shapes[f"{p}.ffn.b2"] = (d,)
    shapes["final_ln.g"] = (d,)
    shapes["final_ln.b"] = (d,)
    shapes["head.w"] = (d, c)
    shapes["head.b"] = (c,)
    return shapes


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    # Resample values beyond 2 standard deviations.
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2.0 * std
    while np.any(bad):
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2.0 * std
    return x


def build_model(cfg: ModelConfig) -> TransformerModel:
    """LN scales start at 1, biases at 0; projections, the class token, and
    the positional embedding draw from a truncated normal (std 0.02)."""
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.split(".")[-1]
        if leaf == "g":
            params[name] = np.ones(shape)
        elif leaf[0] == "b" and leaf in ("b", "b1", "b2", "bq", "bk", "bv", "bo"):
            params[name] = np.zeros(shape)
        else:
            params[name] = _trunc_normal(rng, shape, INIT_STD)
    return TransformerModel(cfg, params)


def is_decayable(name: str) -> bool:
    """Weight-decay targets: projection/linear weight matrices only.

    LN scales and biases, all bias vectors, the class token, and the
    positional embedding are excluded, following common ViT practice.
    """
    return name.split(".")[-1] in ("wq", "wk", "wv", "wo") or name in (
        "patch.w",
        "head.w",
    ) or name.split(".")[-1] in ("w1", "w2")


def patchify(images: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(B, C, S, S) -> (B, n_patches, patch_dim) with row-major patch order
    and channel-first flattening inside each patch."""
    b, c, s, _ = images.shape
    p = cfg.patch_side
    g = s // p
    x = images.reshape(b, c, g, p, g, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)  # (B, gy, gx, C, p, p)
    return x.reshape(b, g * g, c * p * p)


def _unpatchify_grad(dpatches: np.ndarray, cfg: ModelConfig, image_shape) -> np.ndarray:
    b, c, s, _ = image_shape
    p = cfg.patch_side
    g = s // p
    x = dpatches.reshape(b, g, g, c, p, p)
    return x.transpose(0, 3, 1, 4, 2, 5).reshape(b, c, s, s)


def _activation(name: str, x: np.ndarray) -> np.ndarray:
    if name == "gelu":
        return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))
    if name == "relu":
        return np.maximum(x, 0.0)
    return x


def _activation_grad(name: str, x: np.ndarray) -> np.ndarray:
    if name == "gelu":
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return cdf + x * pdf
    if name == "relu":
        return (x > 0.0).astype(np.float64)
    return np.ones_like(x)


def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mean) * ivar
    return xhat * g + b, xhat, ivar


def _layer_norm_backward(dout, xhat, ivar, g):
    dg = np.sum(dout * xhat, axis=tuple(range(dout.ndim - 1)))
    db = np.sum(dout, axis=tuple(range(dout.ndim - 1)))
    dxhat = dout * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = ivar * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward(model: TransformerModel, images: np.ndarray, trace_mode: str = "off",
             input_hook=None, want_cache: bool = False):
    """Shared forward pass.

    input_hook(point_id, x) -> x may replace the input of any quantizable
    linear layer (used by fake-quantized evaluation). Returns
    (logits, trace, cache); cache is None unless want_cache is set.
    Overflow on a diverging model surfaces through the explicit finiteness
    checks rather than numpy warnings.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        return _forward_impl(model, images, trace_mode, input_hook, want_cache)


def _forward_impl(model, images, trace_mode, input_hook, want_cache):
    if trace_mode not in ("off", "maxima", "full"):
        raise ValueError(f"unknown trace_mode {trace_mode!r}")
    cfg = model.config
    p = model.params
    images = np.asarray(images, dtype=np.float64)
    if images.shape[1:] != (cfg.channels, cfg.image_side, cfg.image_side):
        raise ValueError(
            f"batch images shaped {images.shape}, config expects "
            f"(B, {cfg.channels}, {cfg.image_side}, {cfg.image_side})"
        )
    tracing = trace_mode in ("maxima", "full")
    full = trace_mode == "full"
    trace = ActivationTrace() if tracing else None
    if full:
        trace.linear_inputs = {}
        trace.block_outputs = []

    def tap(point: str, x: np.ndarray) -> np.ndarray:
        if full:
            trace.linear_inputs[point] = x.reshape(-1, x.shape[-1]).copy()
        if input_hook is not None:
            return input_hook(point, x)
        return x

    def check(block: str, tensor: str, value: float):
        if not np.isfinite(value):
            raise NonFiniteActivationError(block, tensor)

    cache = {"image_shape": images.shape} if want_cache else None

    patches = patchify(images, cfg)
    patches = tap("patch.w", patches)
    x = patches @ p["patch.w"] + p["patch.b"]
    bsz = x.shape[0]
    tokens = np.concatenate(
        [np.broadcast_to(p["cls"], (bsz, 1, cfg.d_model)), x], axis=1
    ) + p["pos"]
    if want_cache:
        cache["patches"] = patches

    h = cfg.heads
    scale = 1.0 / np.sqrt(cfg.d_head)
    blocks_cache = []
    for i in range(cfg.depth):
        pre = f"blocks.{i}"
        x_in = tokens
        ln1_out, xhat1, ivar1 = _layer_norm(x_in, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        qkv_in = tap(f"{pre}.attn.qkv", ln1_out)
        q = qkv_in @ p[f"{pre}.attn.wq"] + p[f"{pre}.attn.bq"]
        k = qkv_in @ p[f"{pre}.attn.wk"] + p[f"{pre}.attn.bk"]
        v = qkv_in @ p[f"{pre}.attn.wv"] + p[f"{pre}.attn.bv"]
        qh, kh, vh = _split_heads(q, h), _split_heads(k, h), _split_heads(v, h)
        attn = _softmax(qh @ kh.transpose(0, 1, 3, 2) * scale)
        ctx = _merge_heads(attn @ vh)
        ctx_in = tap(f"{pre}.attn.wo", ctx)
        attn_out = ctx_in @ p[f"{pre}.attn.wo"] + p[f"{pre}.attn.bo"]
        x_attn = x_in + attn_out

        ln2_out, xhat2, ivar2 = _layer_norm(x_attn, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
        ffn_in = tap(f"{pre}.ffn.w1", ln2_out)
        h_pre = ffn_in @ p[f"{pre}.ffn.w1"] + p[f"{pre}.ffn.b1"]
        h_act = _activation(cfg.activation, h_pre)
        h_act_in = tap(f"{pre}.ffn.w2", h_act)
        ffn_out = h_act_in @ p[f"{pre}.ffn.w2"] + p[f"{pre}.ffn.b2"]
        y = x_attn + ffn_out

        if tracing:
            mm = {
                "q": float(np.max(np.abs(q))),
                "k": float(np.max(np.abs(k))),
                "v": float(np.max(np.abs(v))),
                "attn_out": float(np.max(np.abs(attn_out))),
                "ffn_hidden": float(np.max(np.abs(h_pre))),
                "ffn_out": float(np.max(np.abs(ffn_out))),
            }
            bm = {
                "attn_residual": float(np.max(np.abs(x_attn))),
                "output": float(np.max(np.abs(y))),
            }
            for tensor, val in list(mm.items()) + list(bm.items()):
                check(pre, tensor, val)
            trace.module_max.append(mm)
            trace.block_max.append(bm)
        if full:
            trace.block_outputs.append(y)
        if want_cache:
            blocks_cache.append(
                dict(x_in=x_in, xhat1=xhat1, ivar1=ivar1, qkv_in=qkv_in,
                     qh=qh, kh=kh, vh=vh, attn=attn, ctx_in=ctx_in,
                     x_attn=x_attn, xhat2=xhat2, ivar2=ivar2, ffn_in=ffn_in,
                     h_pre=h_pre, h_act_in=h_act_in, y=y)
            )
        tokens = y

    final_out, xhatf, ivarf = _layer_norm(tokens, p["final_ln.g"], p["final_ln.b"])
    cls_vec = final_out[:, 0, :]
    cls_in = tap("head.w", cls_vec)
    logits = cls_in @ p["head.w"] + p["head.b"]
    if not np.all(np.isfinite(logits)):
        raise NonFiniteActivationError("head", "logits")
    if want_cache:
        cache.update(blocks=blocks_cache, xhatf=xhatf, ivarf=ivarf,
                     cls_in=cls_in, logits=logits, final_tokens=tokens)
    return logits, trace, cache


def forward(model: TransformerModel, batch, trace_mode: str = "off"):
    """Run the classifier; returns (logits, ActivationTrace or None)."""
    images = getattr(batch, "images", batch)
    logits, trace, _ = _forward(model, images, trace_mode=trace_mode)
    return logits, trace


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its exact logits gradient."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    probs = np.exp(logp)
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def backprop_from_cache(model: TransformerModel, cache: dict, dlogits: np.ndarray,
                        extra_block_grads=None) -> dict[str, np.ndarray]:
    """Reverse pass from a _forward cache.

    extra_block_grads, when given, is one array per block added to the loss
    gradient at that block's output Y (used by activation regularizers).
    Returns one gradient tensor per trainable tensor.
    """
    cfg = model.config
    p = model.params
    extra_grads = extra_block_grads
    grads = {name: np.zeros_like(arr) for name, arr in p.items()}

    grads["head.w"] = cache["cls_in"].T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    dcls = dlogits @ p["head.w"].T
    dfinal = np.zeros_like(cache["final_tokens"])
    dfinal[:, 0, :] = dcls
    dtokens, dg, db = _layer_norm_backward(dfinal, cache["xhatf"], cache["ivarf"], p["final_ln.g"])
    grads["final_ln.g"] = dg
    grads["final_ln.b"] = db

    h = cfg.heads
    scale = 1.0 / np.sqrt(cfg.d_head)
    for i in reversed(range(cfg.depth)):
        pre = f"blocks.{i}"
        bc = cache["blocks"][i]
        dy = dtokens
        if extra_grads is not None:
            dy = dy + extra_grads[i]

        # FFN branch
        dffn_out = dy
        flat_h = bc["h_act_in"].reshape(-1, cfg.d_ff)
        flat_dffn = dffn_out.reshape(-1, cfg.d_model)
        grads[f"{pre}.ffn.w2"] = flat_h.T @ flat_dffn
        grads[f"{pre}.ffn.b2"] = flat_dffn.sum(axis=0)
        dh_act = dffn_out @ p[f"{pre}.ffn.w2"].T
        dh_pre = dh_act * _activation_grad(cfg.activation, bc["h_pre"])
        flat_ffn_in = bc["ffn_in"].reshape(-1, cfg.d_model)
        flat_dh_pre = dh_pre.reshape(-1, cfg.d_ff)
        grads[f"{pre}.ffn.w1"] = flat_ffn_in.T @ flat_dh_pre
        grads[f"{pre}.ffn.b1"] = flat_dh_pre.sum(axis=0)
        dln2_out = dh_pre @ p[f"{pre}.ffn.w1"].T
        dx_attn_ln, dg2, db2 = _layer_norm_backward(dln2_out, bc["xhat2"], bc["ivar2"], p[f"{pre}.ln2.g"])
        grads[f"{pre}.ln2.g"] = dg2
        grads[f"{pre}.ln2.b"] = db2
        dx_attn = dy + dx_attn_ln

        # attention branch
        dattn_out = dx_attn
        flat_ctx = bc["ctx_in"].reshape(-1, cfg.d_model)
        flat_dattn = dattn_out.reshape(-1, cfg.d_model)
        grads[f"{pre}.attn.wo"] = flat_ctx.T @ flat_dattn
        grads[f"{pre}.attn.bo"] = flat_dattn.sum(axis=0)
        dctx = _split_heads(dattn_out @ p[f"{pre}.attn.wo"].T, h)
        dattn = dctx @ bc["vh"].transpose(0, 1, 3, 2)
        dvh = bc["attn"].transpose(0, 1, 3, 2) @ dctx
        a = bc["attn"]
        dscores = a * (dattn - np.sum(dattn * a, axis=-1, keepdims=True))
        dqh = dscores @ bc["kh"] * scale
        dkh = dscores.transpose(0, 1, 3, 2) @ bc["qh"] * scale
        dq, dk, dv = _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)
        flat_qkv_in = bc["qkv_in"].reshape(-1, cfg.d_model)
        dln1_out = np.zeros_like(bc["qkv_in"])
        for wname, dmat in (("wq", dq), ("wk", dk), ("wv", dv)):
            flat_d = dmat.reshape(-1, cfg.d_model)
            grads[f"{pre}.attn.{wname}"] = flat_qkv_in.T @ flat_d
            grads[f"{pre}.attn.b{wname[1]}"] = flat_d.sum(axis=0)
            dln1_out += dmat @ p[f"{pre}.attn.{wname}"].T
        dx_in_ln, dg1, db1 = _layer_norm_backward(dln1_out, bc["xhat1"], bc["ivar1"], p[f"{pre}.ln1.g"])
        grads[f"{pre}.ln1.g"] = dg1
        grads[f"{pre}.ln1.b"] = db1
        dtokens = dx_attn + dx_in_ln

    grads["pos"] = dtokens.sum(axis=0)
    grads["cls"] = dtokens[:, 0, :].sum(axis=0)
    dpatch_proj = dtokens[:, 1:, :]
    flat_patches = cache["patches"].reshape(-1, cfg.patch_dim)
    flat_dproj = dpatch_proj.reshape(-1, cfg.d_model)
    grads["patch.w"] = flat_patches.T @ flat_dproj
    grads["patch.b"] = flat_dproj.sum(axis=0)
    return grads


def loss_and_grads(model: TransformerModel, batch, labels=None, trace_mode: str = "off",
                   block_output_grad_fn=None):
    """Task loss plus exact gradients for every trainable tensor.

    block_output_grad_fn(block_outputs) -> (extra_value, extra_grads) lets an
    activation regularizer contribute a term that differentiates through the
    per-block outputs Y. Returns (loss, logits, grads, trace).
    """
    images = getattr(batch, "images", batch)
    if labels is None:
        labels = batch.labels
    labels = np.asarray(labels)
    logits, trace, cache = _forward(model, images, trace_mode=trace_mode, want_cache=True)
    loss, dlogits = softmax_cross_entropy(logits, labels)

    extra_grads = None
    if block_output_grad_fn is not None:
        extra_value, extra_grads = block_output_grad_fn([bc["y"] for bc in cache["blocks"]])
        loss = loss + float(extra_value)

    grads = backprop_from_cache(model, cache, dlogits, extra_grads)
    return loss, logits, grads, trace


def backward(model: TransformerModel, batch, labels=None) -> dict[str, np.ndarray]:
    """Exact gradients of the mean cross-entropy task loss."""
    _, _, grads, _ = loss_and_grads(model, batch, labels)
    return grads


def ln_scale_matrix(model: TransformerModel, block: int, which: str) -> np.ndarray:
    """Diagonal matrix built from a block's LN scale vector (bias excluded)."""
    if which not in ("ln1", "ln2"):
        raise ValueError(f"which must be ln1 or ln2, got {which!r}")
    return np.diag(model.params[f"blocks.{block}.{which}.g"])


def ffn_surrogate(model: TransformerModel, block: int, x: np.ndarray) -> np.ndarray:
    """FFN branch with the nonlinearity and biases dropped: x -> x W1 W2.

    Accepts a single vector or a stack of row vectors.
    """
    p = model.params
    return (np.asarray(x, dtype=np.float64) @ p[f"blocks.{block}.ffn.w1"]) @ p[f"blocks.{block}.ffn.w2"]


def save_model(directory, model: TransformerModel) -> None:
    from dataclasses import asdict

    save_tensors(directory, model.params, meta={"model_config": asdict(model.config)})


def load_model(directory) -> TransformerModel:
    tensors, meta = load_tensors(directory)
    cfg = ModelConfig(**meta["model_config"])
    expected = param_shapes(cfg)
    for name, shape in expected.items():
        if name not in tensors:
            raise KeyError(f"checkpoint missing tensor {name}")
        if tuple(tensors[name].shape) != shape:
            raise ValueError(
                f"tensor {name} shaped {tensors[name].shape}, config expects {shape}"
            )
    return TransformerModel(cfg, {name: tensors[name] for name in expected})
