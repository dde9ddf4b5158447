"""Explaining multivariate anomalies latent by latent.

An 8-dimensional stream is driven by three latent processes through an
orthonormal loading matrix. Anomalies are injected into single latents
(before mixing) and into a single sensor (after mixing). Scoring then
answers two different questions per point: which latent is the likely
culprit, and does the observation even live in the latent subspace.

Run it:

    python demos/latent_attribution.py
"""

import numpy as np

from ssgpfa.data import Injection, SyntheticSpec, gen_multivariate
from ssgpfa.kernels import cosine, matern32
from ssgpfa.model import fit_em, score_online

# --- generate one stream twice: with and without injections ------------------

kernels = [matern32(lengthscale=130.0), cosine(period=24.0),
           matern32(lengthscale=50.0)]
windows = {"spike in latent 0": (120, 135), "spike in latent 1": (220, 235),
           "offset on sensor 1": (320, 330)}
spec = SyntheticSpec(
    length=400, seed=5,
    injections=(
        Injection("spike", 120, 15, 5.0, latent=0),
        Injection("spike", 220, 15, 5.0, latent=1),
        Injection("sensor_offset", 320, 10, 8.0, dims=(1,)),
    ),
)
series, latents, true_loading = gen_multivariate(spec, 8, kernels,
                                                 noise_variance=0.1)

# Same seed, no injections: identical latent paths, loading and noise,
# so the two streams differ only inside the anomaly windows.
clean, _, _ = gen_multivariate(SyntheticSpec(length=400, seed=5), 8, kernels,
                               noise_variance=0.1)

# --- fit on the clean stream --------------------------------------------------

model = fit_em(clean.values, clean.timestamps, kernels, mode="orthogonal",
               max_iters=15)
gram_gap = np.linalg.norm(model.loading.T @ model.loading - np.eye(3))
print(f"fitted model: {model.n_dims} dims, {model.n_latents} latents, "
      f"||C^T C - I|| = {gram_gap:.1e}")
print(f"training log-likelihood went {model.training_log[0]:.1f} -> "
      f"{model.training_log[-1]:.1f} over {len(model.training_log)} iterations")

# The learned columns match the generator's up to sign and order. Here
# the cosine latent is pinned by its period, while the two Matern
# latents are similar enough that the fit may swap them; the matrix
# below shows which fitted column carries which generating latent.
alignment = np.abs(model.loading.T @ true_loading)
matched = alignment.argmax(axis=0)
print("\n|C_fit^T C_true|, rows = fitted latents, cols = generating latents")
print(np.array2string(alignment, precision=3, suppress_small=True))
print(f"generating latent -> fitted latent: {matched.tolist()}")

# --- score and attribute ------------------------------------------------------

points = list(score_online(model, series, rho=1e-12))
latent_nlls = np.array([p.latent_nlls for p in points])
recon = np.array([p.reconstruction_error for p in points])
scores = np.array([p.score for p in points])

normal = np.ones(len(points), dtype=bool)
for lo, hi in windows.values():
    normal[lo:hi] = False
recon_baseline = float(np.median(recon[normal]))

print("\nwindow                 score   argmax latent nll    recon/median")
for name, (lo, hi) in windows.items():
    seg = slice(lo, hi)
    counts = np.bincount(np.argmax(latent_nlls[seg], axis=1), minlength=3)
    ratio = float(np.median(recon[seg])) / recon_baseline
    print(f"{name:20s} {scores[seg].mean():7.1f}   counts {counts.tolist()}   "
          f"{ratio:11.1f}x")

# Each latent-targeted spike lights up exactly the fitted column that
# carries that latent, on every point of its window, and the
# reconstruction error stays at the normal level: the observation is
# still inside the learned subspace. The sensor offset is the opposite
# case. No single latent dominates, the per-latent surprises stay an
# order of magnitude smaller, and the reconstruction error jumps by an
# order of magnitude because no latent combination can produce a bump
# in one sensor alone.

overlap = np.linalg.svd(model.loading.T @ true_loading, compute_uv=False)
print(f"\nsubspace overlap with the generating loading: "
      f"smallest singular value {overlap.min():.3f} (1.0 = identical span)")
