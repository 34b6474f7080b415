"""Freeze a reference DDIM (eta = 0) rollout from diffusers.

Scheduler config: 1000 train steps, scaled-linear betas 0.00085 -> 0.012,
50 inference steps, leading spacing with steps_offset = 1, final alpha = 1.
A 4x8x8 latent is driven by 50 fixed pseudo-random noise tensors. Writes
`ddim_reference.json` with the full alpha_bar table, timesteps, the inputs,
and every intermediate latent (all float32 values stored exactly), plus a
rollout driven by one fixed noise tensor.
"""
import json
import sys

import numpy as np
import torch
from diffusers import DDIMScheduler


def main(out_path):
    sched = DDIMScheduler(
        num_train_timesteps=1000,
        beta_start=0.00085,
        beta_end=0.012,
        beta_schedule="scaled_linear",
        clip_sample=False,
        set_alpha_to_one=True,
        steps_offset=1,
        timestep_spacing="leading",
        prediction_type="epsilon",
    )
    sched.set_timesteps(50)
    rng = np.random.default_rng(20230501)
    shape = (4, 8, 8)
    latent = torch.from_numpy(rng.standard_normal(shape).astype(np.float32))
    noises = [rng.standard_normal(shape).astype(np.float32) for _ in range(50)]
    latents = [latent.numpy().copy()]
    for i, t in enumerate(sched.timesteps):
        out = sched.step(torch.from_numpy(noises[i]), t, latent, eta=0.0)
        latent = out.prev_sample
        latents.append(latent.numpy().copy())

    # Second case: one fixed noise tensor at every step, with the initial
    # latent built from that same noise so values stay of unit scale.
    sched.set_timesteps(50)
    x0 = rng.standard_normal(shape).astype(np.float32)
    eps = rng.standard_normal(shape).astype(np.float32)
    ab = float(sched.alphas_cumprod[sched.timesteps[0]])
    latent = torch.from_numpy((np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps).astype(np.float32))
    fixed = [latent.numpy().copy()]
    for t in sched.timesteps:
        latent = sched.step(torch.from_numpy(eps), t, latent, eta=0.0).prev_sample
        fixed.append(latent.numpy().copy())

    def flat(a):
        return [float(x) for x in np.asarray(a, dtype=np.float32).ravel()]

    doc = {
        "alpha_bars": [float(x) for x in sched.alphas_cumprod.double().numpy()],
        "timesteps": [int(t) for t in sched.timesteps],
        "shape": list(shape),
        "noises": [flat(n) for n in noises],
        "latents": [flat(l) for l in latents],
        "fixed_noise": flat(eps),
        "fixed_latents": [flat(l) for l in fixed],
    }
    with open(out_path, "w") as f:
        json.dump(doc, f)
    print("timesteps", doc["timesteps"][:3], "...", doc["timesteps"][-3:])


if __name__ == "__main__":
    main(sys.argv[1])
