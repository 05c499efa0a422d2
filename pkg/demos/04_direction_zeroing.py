"""Reproduce the direction-zeroing intervention at desk scale: rank the FFN
upstream singular directions by how strongly downstream rows align with
them, zero the top ones without retraining, and watch max activation and
pair energy fall while accuracy stays close.
"""

import numpy as np

from cdreg import diagnostics, quant
from cdreg.data import SynthConfig, batches, synth_generate
from cdreg.model import ModelConfig, build_model
from cdreg.optimizer import OptimizerConfig, OptimizerState, train_step

print("training a small model first (~30 s) ...")
model = build_model(ModelConfig(d_model=32, depth=2, heads=2, classes=10, seed=1))
train, eval_ = synth_generate(SynthConfig(samples_train=2048, samples_eval=512,
                                          noise_sigma=0.5, seed=1))
ocfg = OptimizerConfig(lr_peak=3e-3, warmup_steps=30, total_steps=400,
                       lambda_wd=0.05, schedule="constant")
state = OptimizerState.init(model)
step, epoch = 0, 0
while step < ocfg.total_steps:
    for batch in batches(train, 64, seed=1, epoch=epoch):
        step += 1
        train_step(model, batch, "none", ocfg, state, step, lambda_wd=0.05)
        if step >= ocfg.total_steps:
            break
    epoch += 1

ranked = diagnostics.rank_aligned_directions(model)
print("\nstrongest aligned directions (block, singular index, score, s):")
for d in ranked[:5]:
    print(f"  block {d.block} index {d.index:2d} score {d.score:.3f} s {d.s:.3f}")

qcfg = quant.QuantConfig(weight_bits=4, act_bits=4, calib_batches=4, calib_batch_size=128)
print(f"\n{'k':>3s} {'max_act':>9s} {'fp_acc':>8s} {'w4a4_acc':>9s} {'energy':>10s}")
for k in range(4):
    candidate = model if k == 0 else diagnostics.zero_top_aligned_directions(model, k)[0]
    act = diagnostics.max_activation(candidate, eval_)
    fp = quant.evaluate(candidate, eval_)
    qm = quant.quantize_model_w4a4(candidate, train, qcfg)
    qa = quant.evaluate(qm, eval_)
    energy = diagnostics.total_pair_energy(candidate)
    print(f"{k:3d} {act.module_max:9.3f} {fp:8.4f} {qa:9.4f} {energy:10.2f}")

block = ranked[0].block
agreement = diagnostics.surrogate_agreement(
    model, block, type("P", (), {"images": eval_.images[:64]})()
)
print(f"\nsurrogate agreement on block {block}: pearson r = {agreement['pearson_r']:.3f} "
      f"(max real {agreement['max_real']:.2f}, max surrogate {agreement['max_surrogate']:.2f})")
