"""Train the desk classifier twice under a fixed regularization budget, once
plain and once with pair decay, then compare pair energy over training and
4-bit fake-quantized accuracy under both calibration schemes.

600 steps (~2 minutes) already separates the energy trajectories; the full
2000-step comparison lives in the acceptance suite.
"""

import json
import tempfile
from pathlib import Path

from cdreg import experiment

BASE = {
    "schema_version": 1,
    "seeds": [0],
    "batch_size": 64,
    "eval_batch_size": 256,
    "reg_mode": "none",
    "model": {"d_model": 64, "depth": 2, "heads": 4, "classes": 10},
    "data": {"synth": {"classes": 10, "samples_train": 8192, "samples_eval": 2048,
                       "noise_sigma": 0.8, "seed": 0}},
    "optimizer": {"lr_peak": 3e-3, "lambda_wd": 0.05, "warmup_steps": 100,
                  "total_steps": 600, "schedule": "constant"},
    "quant": {"calib_batches": 4, "calib_batch_size": 128},
}

work = Path(tempfile.mkdtemp(prefix="cdreg_demo_"))
results, energy_traj = {}, {}
for mode in ("none", "cd_decay"):
    raw = json.loads(json.dumps(BASE))
    raw["reg_mode"] = mode
    if mode == "cd_decay":
        raw["cd"] = {"lambda_cd": 0.005}
    cfg = experiment.parse_experiment_config(raw)
    print(f"training {mode} (weight decay {experiment.effective_lambda_wd(cfg)}) ...")
    results[mode] = experiment.run_train(cfg, work / mode, raw_config=raw)
    lines = (work / mode / "metrics.jsonl").read_text().splitlines()
    energy_traj[mode] = {n: json.loads(lines[n - 1])["pair_energy_total"]
                         for n in (150, 300, 450, 600)}

print("\ntotal pair energy over training:")
print(f"{'step':>6s} {'baseline':>10s} {'decayed':>10s} {'ratio':>7s}")
for n in (150, 300, 450, 600):
    b, c = energy_traj["none"][n], energy_traj["cd_decay"][n]
    print(f"{n:6d} {b:10.1f} {c:10.1f} {c / b:7.3f}")

print(f"\n{'':12s} {'fp_acc':>8s} {'w4a4 minmax':>12s} {'w4a4 pct':>10s}")
for mode, s in results.items():
    print(f"{mode:12s} {s['fp_accuracy']:8.4f} {s['quant_accuracy']['minmax']:12.4f} "
          f"{s['quant_accuracy']['percentile']:10.4f}")
print(f"\nrun directories kept under {work}")
