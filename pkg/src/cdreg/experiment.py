"""Experiment runner: config schema, training loop, quantized evaluation,
diagnostics bundle, gradient checking, and sweeps.

Configs are JSON with a schema_version field. Validation is fail-closed:
unknown keys anywhere are rejected with the offending field path, so a typo
in a coefficient name cannot silently fall back to a default.

A run directory is self-describing: it holds the resolved config, the seed,
the code version, deterministic step metrics (metrics.jsonl), wall-clock
phase timings (timings.jsonl, kept separate so the metrics stream is
bit-reproducible), the final checkpoint, and summary.json.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod, diagnostics, pairs as pairs_mod, quant as quant_mod, regularizers as reg
from .model import ModelConfig, TransformerModel, build_model, load_model, loss_and_grads, save_model
from .optimizer import OptimizerConfig, OptimizerState, RegState, train_step

SCHEMA_VERSION = 1
QUANT_SCHEMES = ("minmax", "percentile")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class TrainNumericError(FloatingPointError):
    pass


@dataclass
class IdxPaths:
    train_images: str
    train_labels: str
    eval_images: str
    eval_labels: str


@dataclass
class ExperimentConfig:
    model: ModelConfig
    data_synth: data_mod.SynthConfig | None
    data_idx: IdxPaths | None
    optimizer: OptimizerConfig
    reg_mode: str = "none"
    cd: reg.CdConfig = field(default_factory=reg.CdConfig)
    tweo: reg.TweoConfig = field(default_factory=reg.TweoConfig)
    quant: quant_mod.QuantConfig = field(default_factory=quant_mod.QuantConfig)
    seeds: tuple[int, ...] = (0,)
    batch_size: int = 64
    eval_batch_size: int = 256
    run_dir: str | None = None

    @property
    def data_seed(self) -> int:
        return self.data_synth.seed if self.data_synth is not None else 0


def _check_keys(d: dict, allowed, path: str) -> None:
    for key in d:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")


def _build_section(cls, d: dict, path: str, **extra):
    names = {f.name for f in dataclasses.fields(cls)}
    _check_keys(d, names - set(extra), path)
    try:
        return cls(**{**d, **extra})
    except (TypeError, ValueError) as e:
        raise ConfigError(path, str(e)) from e


def parse_experiment_config(raw: dict, path: str = "") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError(path or "<root>", "config must be a JSON object")
    allowed = {
        "schema_version", "seeds", "batch_size", "eval_batch_size", "reg_mode",
        "model", "data", "optimizer", "cd", "tweo", "quant", "run_dir",
    }
    _check_keys(raw, allowed, path)
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"must be {SCHEMA_VERSION}")

    reg_mode = raw.get("reg_mode", "none")
    if reg_mode not in ("none", "cd_decay", "cd_loss", "tweo"):
        raise ConfigError("reg_mode", f"unknown mode {reg_mode!r}")
    if reg_mode in ("cd_decay", "cd_loss") and "cd" not in raw:
        raise ConfigError("cd", f"section required for reg_mode={reg_mode}")
    if reg_mode == "tweo" and "tweo" not in raw:
        raise ConfigError("tweo", "section required for reg_mode=tweo")

    data_raw = raw.get("data")
    if not isinstance(data_raw, dict) or len(data_raw) != 1 or next(iter(data_raw)) not in ("synth", "idx"):
        raise ConfigError("data", "exactly one data source required: 'synth' or 'idx'")
    data_synth = data_idx = None
    if "synth" in data_raw:
        data_synth = _build_section(data_mod.SynthConfig, data_raw["synth"], "data.synth")
    else:
        data_idx = _build_section(IdxPaths, data_raw["idx"], "data.idx")

    # model seed is injected per run from the experiment seed list
    model_cfg = _build_section(ModelConfig, raw.get("model", {}), "model", seed=0)
    opt_cfg = _build_section(OptimizerConfig, raw.get("optimizer", {}), "optimizer")
    cd_raw = dict(raw.get("cd", {}))
    if "per_matrix_overrides" in cd_raw and not isinstance(cd_raw["per_matrix_overrides"], dict):
        raise ConfigError("cd.per_matrix_overrides", "must be an object")
    cd_cfg = _build_section(reg.CdConfig, cd_raw, "cd")
    tweo_cfg = _build_section(reg.TweoConfig, raw.get("tweo", {}), "tweo")
    quant_cfg = _build_section(quant_mod.QuantConfig, raw.get("quant", {}), "quant")

    if data_synth is not None:
        for field_name in ("classes", "image_side", "channels"):
            if getattr(data_synth, field_name) != getattr(model_cfg, field_name):
                raise ConfigError(
                    f"data.synth.{field_name}",
                    f"{getattr(data_synth, field_name)} does not match "
                    f"model.{field_name}={getattr(model_cfg, field_name)}",
                )

    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds", "must be a nonempty list of integers")
    batch_size = raw.get("batch_size", 64)
    if not isinstance(batch_size, int) or batch_size < 1:
        raise ConfigError("batch_size", "must be a positive integer")
    if reg_mode in ("cd_decay", "cd_loss") and cd_cfg.lambda_cd > opt_cfg.lambda_wd:
        raise ConfigError("cd.lambda_cd", "exceeds the optimizer.lambda_wd budget")

    return ExperimentConfig(
        model=model_cfg, data_synth=data_synth, data_idx=data_idx, optimizer=opt_cfg,
        reg_mode=reg_mode, cd=cd_cfg, tweo=tweo_cfg, quant=quant_cfg,
        seeds=tuple(seeds), batch_size=batch_size,
        eval_batch_size=raw.get("eval_batch_size", 256), run_dir=raw.get("run_dir"),
    )


def load_config_file(path) -> tuple[ExperimentConfig, dict]:
    raw = json.loads(Path(path).read_text())
    return parse_experiment_config(raw), raw


def load_datasets(cfg: ExperimentConfig) -> tuple[data_mod.Dataset, data_mod.Dataset]:
    if cfg.data_synth is not None:
        return data_mod.synth_generate(cfg.data_synth)
    idx = cfg.data_idx
    return (
        data_mod.load_idx(idx.train_images, idx.train_labels),
        data_mod.load_idx(idx.eval_images, idx.eval_labels),
    )


def effective_lambda_wd(cfg: ExperimentConfig) -> float:
    """Budgeted weight decay: CD runs give up lambda_cd out of the baseline."""
    if cfg.reg_mode in ("cd_decay", "cd_loss"):
        return reg.effective_weight_decay(cfg.optimizer.lambda_wd, cfg.cd.lambda_cd)
    return cfg.optimizer.lambda_wd


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except Exception:
        pass
    return "unknown"


def config_hash(raw: dict) -> str:
    return hashlib.sha256(json.dumps(raw, sort_keys=True).encode()).hexdigest()[:16]


def _epoch_batches(train: data_mod.Dataset, batch_size: int, seed: int):
    epoch = 0
    while True:
        yield from data_mod.batches(train, batch_size, seed=seed, epoch=epoch)
        epoch += 1


def run_train(cfg: ExperimentConfig, run_dir, raw_config: dict | None = None,
              seed: int | None = None) -> dict:
    """Train one run; writes metrics, timings, checkpoint, and summary.json."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    seed = cfg.seeds[0] if seed is None else seed

    train_ds, eval_ds = load_datasets(cfg)
    model = build_model(dataclasses.replace(cfg.model, seed=seed))
    lambda_wd = effective_lambda_wd(cfg)
    pair_list = pairs_mod.enumerate_pairs(model, cfg.cd.pair_set)
    opt_state = OptimizerState.init(model)
    reg_state = RegState()

    phase_totals: dict[str, float] = {}
    batch_iter = _epoch_batches(train_ds, cfg.batch_size, seed)
    metrics_path = run_dir / "metrics.jsonl"
    timings_path = run_dir / "timings.jsonl"
    with open(metrics_path, "w") as mf, open(timings_path, "w") as tf:
        for step in range(1, cfg.optimizer.total_steps + 1):
            batch = next(batch_iter)
            try:
                metrics = train_step(
                    model, batch, cfg.reg_mode, cfg.optimizer, opt_state, step,
                    lambda_wd=lambda_wd, cd_cfg=cfg.cd, tweo_cfg=cfg.tweo,
                    pair_list=pair_list, reg_state=reg_state,
                )
            except FloatingPointError as e:
                raise TrainNumericError(f"step {step}: {e}") from e
            mf.write(json.dumps(metrics.to_json_dict(), sort_keys=True) + "\n")
            tf.write(json.dumps({"step": step, "timings_ms": metrics.timings}) + "\n")
            for k, v in metrics.timings.items():
                phase_totals[k] = phase_totals.get(k, 0.0) + v

    save_model(run_dir / "checkpoint", model)
    summary = summarize_run(cfg, model, train_ds, eval_ds, seed=seed)
    summary["steps"] = cfg.optimizer.total_steps
    summary["phase_ms_mean"] = {
        k: v / cfg.optimizer.total_steps for k, v in phase_totals.items()
    }
    summary["git_describe"] = git_describe()
    if raw_config is not None:
        summary["config_hash"] = config_hash(raw_config)
        (run_dir / "config.json").write_text(json.dumps(raw_config, indent=1, sort_keys=True))
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


def summarize_run(cfg: ExperimentConfig, model: TransformerModel,
                  train_ds: data_mod.Dataset, eval_ds: data_mod.Dataset,
                  seed: int) -> dict:
    """FP and quantized accuracy (both schemes), activation maxima, pair
    energy, and the regularization-budget bookkeeping."""
    fp_acc = quant_mod.evaluate(model, eval_ds, cfg.eval_batch_size)
    quant_acc: dict[str, float] = {}
    for scheme in QUANT_SCHEMES:
        qcfg = dataclasses.replace(cfg.quant, calibration=scheme)
        qm = quant_mod.quantize_model_w4a4(model, train_ds, qcfg, calib_seed=cfg.data_seed)
        quant_acc[scheme] = quant_mod.evaluate(qm, eval_ds, cfg.eval_batch_size)
    max_act = diagnostics.max_activation(model, eval_ds, cfg.eval_batch_size)
    lambda_wd = effective_lambda_wd(cfg)
    summary = {
        "seed": seed,
        "reg_mode": cfg.reg_mode,
        "fp_accuracy": fp_acc,
        "quant_accuracy": quant_acc,
        # positive = degradation; rendered with a leading minus in tables
        "acc_drop": {k: fp_acc - v for k, v in quant_acc.items()},
        "max_act_module": max_act.module_max,
        "max_act_block": max_act.block_max,
        "total_pair_energy": diagnostics.total_pair_energy(model, cfg.cd.pair_set),
        "lambda_wd_effective": lambda_wd,
        "lambda_cd": cfg.cd.lambda_cd if cfg.reg_mode in ("cd_decay", "cd_loss") else 0.0,
        "budget_sum": lambda_wd + (cfg.cd.lambda_cd if cfg.reg_mode in ("cd_decay", "cd_loss") else 0.0),
        "budget_baseline": cfg.optimizer.lambda_wd,
    }
    return summary


def run_eval(checkpoint_dir, cfg: ExperimentConfig) -> dict:
    model = load_model(checkpoint_dir)
    _, eval_ds = load_datasets(cfg)
    return {"accuracy": quant_mod.evaluate(model, eval_ds, cfg.eval_batch_size)}


def run_quantize(checkpoint_dir, cfg: ExperimentConfig, scheme: str | None = None,
                 out_path=None) -> dict:
    model = load_model(checkpoint_dir)
    train_ds, eval_ds = load_datasets(cfg)
    qcfg = cfg.quant if scheme is None else dataclasses.replace(cfg.quant, calibration=scheme)
    qm = quant_mod.quantize_model_w4a4(model, train_ds, qcfg, calib_seed=cfg.data_seed)
    fp_acc = quant_mod.evaluate(model, eval_ds, cfg.eval_batch_size)
    q_acc = quant_mod.evaluate(qm, eval_ds, cfg.eval_batch_size)
    report = quant_mod.quantization_report(qm, fp_acc, q_acc)
    if out_path is not None:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(json.dumps(report, indent=1, sort_keys=True))
    return report


def run_diagnose(checkpoint_dir, cfg: ExperimentConfig, out_dir, zero_top_k: int = 0,
                 scheme: str | None = None) -> dict:
    """Full diagnostics bundle; with zero_top_k > 0 also the sequential
    direction-removal table, re-evaluated in FP and quantized form."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = load_model(checkpoint_dir)
    train_ds, eval_ds = load_datasets(cfg)
    qcfg = cfg.quant if scheme is None else dataclasses.replace(cfg.quant, calibration=scheme)

    pair_listing = [
        pairs_mod.pair_info(p, model)
        for p in pairs_mod.enumerate_pairs(model, cfg.cd.pair_set)
    ]
    (out_dir / "pairs.json").write_text(json.dumps(pair_listing, indent=1))

    max_act = diagnostics.max_activation(model, eval_ds, cfg.eval_batch_size)
    (out_dir / "max_act.json").write_text(json.dumps(max_act.to_json_dict(), indent=1))

    align_rows = []
    for pair in diagnostics.ffn_pairs(model):
        block = int(pair.upstream.split(".")[1])
        w1, w2 = pairs_mod.canonical_matrices(pair, model)
        entry = diagnostics.alignment_scores(w1, w2)
        for i in range(entry.s.shape[0]):
            align_rows.append(
                {
                    "block": block,
                    "direction": i,
                    "s": float(entry.s[i]),
                    "max_alpha": float(entry.per_direction_max[i]),
                    "sumsq_alpha": float(entry.per_direction_sumsq[i]),
                }
            )
    (out_dir / "alignment.json").write_text(json.dumps(align_rows, indent=1))

    probe = data_mod.Batch(eval_ds.images[:64], eval_ds.labels[:64])
    surrogate = []
    with open(out_dir / "surrogate.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["block", "real", "surrogate"])
        for block in range(model.config.depth):
            agreement = diagnostics.surrogate_agreement(model, block, probe)
            surrogate.append({"block": block, **agreement})
            for x, y in _surrogate_scatter(model, block, probe):
                writer.writerow([block, float(x), float(y)])
    (out_dir / "surrogate.json").write_text(json.dumps(surrogate, indent=1))

    result = {
        "pairs": pair_listing,
        "max_act": max_act.to_json_dict(),
        "surrogate": surrogate,
        "total_pair_energy": diagnostics.total_pair_energy(model, cfg.cd.pair_set),
    }

    if zero_top_k > 0:
        rows = []
        for k in range(zero_top_k + 1):
            if k == 0:
                candidate, report = model, None
            else:
                candidate, report = diagnostics.zero_top_aligned_directions(model, k)
            fp_acc = quant_mod.evaluate(candidate, eval_ds, cfg.eval_batch_size)
            qm = quant_mod.quantize_model_w4a4(candidate, train_ds, qcfg, calib_seed=cfg.data_seed)
            q_acc = quant_mod.evaluate(qm, eval_ds, cfg.eval_batch_size)
            act = diagnostics.max_activation(candidate, eval_ds, cfg.eval_batch_size)
            rows.append(
                {
                    "k": k,
                    "max_act_module": act.module_max,
                    "max_act_block": act.block_max,
                    "fp_acc": fp_acc,
                    "quant_acc": q_acc,
                    "pair_energy_total": diagnostics.total_pair_energy(candidate, cfg.cd.pair_set),
                }
            )
            if report is not None:
                result["intervention"] = report.to_json_dict()
        with open(out_dir / "intervention.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
        result["intervention_rows"] = rows
        (out_dir / "intervention.json").write_text(
            json.dumps(result.get("intervention", {}), indent=1)
        )
    return result


def _surrogate_scatter(model: TransformerModel, block: int, probe, limit: int = 512):
    from .model import _forward, _layer_norm, _activation, ffn_surrogate

    _, _, cache = _forward(model, probe.images, want_cache=True)
    bc = cache["blocks"][block]
    p = model.params
    pre = f"blocks.{block}"
    ln2_out, _, _ = _layer_norm(bc["x_attn"], p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
    h_pre = ln2_out @ p[f"{pre}.ffn.w1"] + p[f"{pre}.ffn.b1"]
    real = (_activation(model.config.activation, h_pre) @ p[f"{pre}.ffn.w2"] + p[f"{pre}.ffn.b2"]).reshape(-1)
    sur = ffn_surrogate(model, block, ln2_out.reshape(-1, model.config.d_model)).reshape(-1)
    step = max(1, real.size // limit)
    return list(zip(real[::step], sur[::step]))


GRADCHECK_MODEL_TOL = 1e-4
GRADCHECK_CD_TOL = 1e-6
GRADCHECK_ABSORB_TOL = 1e-10


def run_gradcheck(cfg: ExperimentConfig, perturb_param: str | None = None) -> dict:
    """Finite-difference verification of the model backward and the pair
    decay gradients, plus the factor-2 bookkeeping check.

    perturb_param deliberately corrupts one gradient tensor (test hook) to
    prove failures are detected and named.
    """
    if cfg.model.d_model > 8:
        raise ConfigError("model.d_model", "gradcheck requires a tiny config (d_model <= 8)")
    seed = cfg.seeds[0]
    model = build_model(dataclasses.replace(cfg.model, seed=seed))
    train_ds, _ = load_datasets(cfg)
    batch = data_mod.Batch(train_ds.images[:4], train_ds.labels[:4])

    _, _, grads, _ = loss_and_grads(model, batch)
    if perturb_param is not None:
        grads[perturb_param] = grads[perturb_param] + 1e-3

    h = 1e-5
    floor = 1e-5
    param_results = []
    failures = []
    for name, arr in model.params.items():
        flat = arr.reshape(-1)
        gflat = grads[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp, _, _, _ = loss_and_grads(model, batch)
            flat[i] = orig - h
            lm, _, _, _ = loss_and_grads(model, batch)
            flat[i] = orig
            fd = (lp - lm) / (2.0 * h)
            rel = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), floor)
            worst = max(worst, rel)
        ok = bool(worst <= GRADCHECK_MODEL_TOL)
        param_results.append({"param": name, "max_rel_err": float(worst), "ok": ok})
        if not ok:
            failures.append(name)

    rng = np.random.default_rng(seed)
    cd_worst = 0.0
    for _ in range(10):
        m, k, n = rng.integers(2, 7, size=3)
        w1 = rng.normal(size=(k, m))
        w2 = rng.normal(size=(n, k))
        cd_worst = max(cd_worst, _cd_fd_error(w1, w2))
    cd_ok = bool(cd_worst <= GRADCHECK_CD_TOL)

    w1 = rng.normal(size=(5, 4))
    w2 = rng.normal(size=(3, 5))
    direction = reg.normalized_cd_direction(w1, w2)
    factor = pairs_mod.upstream_normalizer(w1)
    loss_grad = factor * reg.cd_gradient_w2(w1, w2)
    absorb_err = float(np.max(np.abs(loss_grad - 2.0 * direction)))
    absorb_ok = bool(absorb_err <= GRADCHECK_ABSORB_TOL)

    return {
        "model": {
            "tolerance": GRADCHECK_MODEL_TOL,
            "params": param_results,
            "failures": failures,
            "ok": not failures,
        },
        "cd_gradients": {"tolerance": GRADCHECK_CD_TOL, "max_rel_err": float(cd_worst), "ok": cd_ok},
        "absorb_factor": {"tolerance": GRADCHECK_ABSORB_TOL, "max_abs_err": absorb_err, "ok": absorb_ok},
        "ok": (not failures) and cd_ok and absorb_ok,
    }


def _cd_fd_error(w1: np.ndarray, w2: np.ndarray, h: float = 1e-6) -> float:
    def energy(a, b):
        return float(np.sum((b @ a) ** 2))

    g1 = reg.cd_gradient_w1(w1, w2)
    g2 = reg.cd_gradient_w2(w1, w2)
    worst = 0.0
    for mat, grad in ((w1, g1), (w2, g2)):
        flat = mat.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            ep = energy(w1, w2)
            flat[i] = orig - h
            em = energy(w1, w2)
            flat[i] = orig
            fd = (ep - em) / (2.0 * h)
            rel = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-8)
            worst = max(worst, rel)
    return worst


def _merge(base: dict, overrides: dict) -> dict:
    out = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


SWEEP_CSV_COLUMNS = [
    "config_id", "seed", "status", "fp_acc", "quant_acc_minmax", "quant_acc_percentile",
    "acc_drop_minmax", "acc_drop_percentile", "max_act_module", "max_act_block",
    "total_pair_energy",
]


def parse_sweep_config(raw: dict) -> tuple[dict, list[dict], list[int]]:
    _check_keys(raw, {"schema_version", "base", "conditions", "seeds", "run_dir"}, "")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"must be {SCHEMA_VERSION}")
    base = raw.get("base")
    if not isinstance(base, dict):
        raise ConfigError("base", "must be an experiment config object")
    conditions = raw.get("conditions", [])
    if not isinstance(conditions, list):
        raise ConfigError("conditions", "must be a list")
    for i, cond in enumerate(conditions):
        if not isinstance(cond, dict) or "id" not in cond:
            raise ConfigError(f"conditions[{i}]", "must be an object with an 'id'")
        _check_keys(cond, {"id", "overrides"}, f"conditions[{i}]")
    seeds = raw.get("seeds", base.get("seeds", [0]))
    return base, conditions, seeds


def run_sweep(raw_sweep: dict, run_dir) -> list[dict]:
    """Run the condition x seed grid sequentially; member failures are
    recorded and the sweep continues. Writes sweep.csv and returns its rows.

    All conditions share the base config's data section (and therefore the
    data and calibration seeds), so comparisons are matched."""
    base, conditions, seeds = parse_sweep_config(raw_sweep)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    errors: dict[str, str] = {}
    for cond in conditions:
        merged = _merge(base, cond.get("overrides", {}))
        for seed in seeds:
            row = {c: "" for c in SWEEP_CSV_COLUMNS}
            row.update(config_id=cond["id"], seed=seed)
            try:
                cfg = parse_experiment_config(merged)
                member_dir = run_dir / f"{cond['id']}_s{seed}"
                summary = run_train(cfg, member_dir, raw_config=merged, seed=seed)
                row.update(
                    status="ok",
                    fp_acc=summary["fp_accuracy"],
                    quant_acc_minmax=summary["quant_accuracy"]["minmax"],
                    quant_acc_percentile=summary["quant_accuracy"]["percentile"],
                    acc_drop_minmax=summary["acc_drop"]["minmax"],
                    acc_drop_percentile=summary["acc_drop"]["percentile"],
                    max_act_module=summary["max_act_module"],
                    max_act_block=summary["max_act_block"],
                    total_pair_energy=summary["total_pair_energy"],
                )
            except Exception as e:  # member failure: record, continue
                row["status"] = "failed"
                errors[f"{cond['id']}_s{seed}"] = f"{type(e).__name__}: {e}"
            rows.append(row)
    with open(run_dir / "sweep.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=SWEEP_CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    if errors:
        (run_dir / "errors.json").write_text(json.dumps(errors, indent=1, sort_keys=True))
    return rows
