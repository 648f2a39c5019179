"""Forward noising, true posterior, conditional reverse steps and ancestral sampling.

All image tensors are torch tensors shaped (B, C, H, W) (or any shape with a
leading batch axis); timesteps are 1-based ints or integer tensors of shape (B,).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch

from .gmm import GMMParams, sample_component
from .schedule import NoiseSchedule

__all__ = [
    "forward_sample",
    "true_posterior_params",
    "reverse_mean",
    "reverse_step",
    "generate",
    "GenerationResult",
    "save_image_grid",
]


def _coeff(values, t, like: torch.Tensor) -> torch.Tensor:
    """Schedule coefficient(s) at timestep(s) t, broadcastable against `like`."""
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    arr = np.asarray(values(t), dtype=np.float64)
    out = torch.as_tensor(arr, dtype=like.dtype, device=like.device)
    if out.ndim == 0:
        return out
    return out.view(-1, *([1] * (like.ndim - 1)))


def forward_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form draw of x_t given x_0 and the noise eps.

    x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps
    """
    if x0.shape != eps.shape:
        raise ValueError(f"x0 and eps shapes differ: {tuple(x0.shape)} vs {tuple(eps.shape)}")
    ab = _coeff(schedule.alpha_bar, t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def true_posterior_params(x_t: torch.Tensor, eps: torch.Tensor, t: int, schedule: NoiseSchedule):
    """Gaussian parameters of q(x_{t-1} | x_t, x_0).

    `eps` is the noise that produced x_t from x_0. Returns (mu_q, var_q) with
    mu_q = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_t) and
    var_q = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t; alpha_bar_0 = 1
    makes var_q = 0 at t = 1.
    """
    if x_t.shape != eps.shape:
        raise ValueError(f"x_t and eps shapes differ: {tuple(x_t.shape)} vs {tuple(eps.shape)}")
    t = int(t)
    beta = float(schedule.beta(t))
    alpha = float(schedule.alpha(t))
    ab_t = float(schedule.alpha_bar(t))
    ab_prev = float(schedule.alpha_bar(t - 1))
    mu_q = (x_t - beta / np.sqrt(1.0 - ab_t) * eps) / np.sqrt(alpha)
    var_q = (1.0 - ab_prev) / (1.0 - ab_t) * beta
    return mu_q, var_q


def reverse_mean(
    x_t: torch.Tensor,
    t,
    z: torch.Tensor,
    predictor: Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor],
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Mean of the learned denoising transition, from the predicted noise.

    mu_theta = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_theta(x_t, t, z)) / sqrt(alpha_t)
    """
    if x_t.ndim < 2:
        x_t = x_t.unsqueeze(0)
    t_batch = t
    if not isinstance(t_batch, torch.Tensor):
        t_batch = torch.full((x_t.shape[0],), int(t), dtype=torch.long, device=x_t.device)
    eps_hat = predictor(x_t, t_batch, z)
    if eps_hat.shape != x_t.shape:
        raise ValueError(
            f"predictor output shape {tuple(eps_hat.shape)} != x_t shape {tuple(x_t.shape)}"
        )
    beta = _coeff(schedule.beta, t, x_t)
    alpha = _coeff(schedule.alpha, t, x_t)
    ab = _coeff(schedule.alpha_bar, t, x_t)
    return (x_t - beta / torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(alpha)


def reverse_step(
    x_t: torch.Tensor,
    t: int,
    z: torch.Tensor,
    predictor: Callable,
    schedule: NoiseSchedule,
    rng: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """One conditional denoising step x_t -> x_{t-1}.

    Draws from N(mu_theta, beta_t I) for t > 1; the t = 1 transition has zero
    variance, so its mean is returned deterministically.
    """
    t = int(t)
    mu = reverse_mean(x_t, t, z, predictor, schedule)
    if t <= 1:
        return mu
    sigma = float(np.sqrt(schedule.beta(t)))
    noise = torch.empty_like(mu).normal_(generator=rng)
    return mu + sigma * noise


@dataclass
class GenerationResult:
    """Ancestral-sampling output plus the conditioning bookkeeping."""

    images: torch.Tensor  # (n, C, H, W), unclamped model output
    z: torch.Tensor  # (n, J) conditioning latents
    clusters: Optional[np.ndarray]  # (n,) 1-based component indices, or None


def generate(
    n: int,
    condition,
    predictor: Callable,
    schedule: NoiseSchedule,
    rng: torch.Generator,
    image_shape: Sequence[int],
    dtype: torch.dtype = torch.float32,
) -> GenerationResult:
    """Generate n images by T reverse steps from x_T ~ N(0, I).

    `condition` is either an (n, J) tensor of latent codes, or a pair
    (GMMParams, cluster_indices) with 1-based indices; in the latter case each
    z is drawn from the indicated Gaussian component and the index is recorded
    in the result.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    clusters = None
    if isinstance(condition, tuple):
        params, indices = condition
        if not isinstance(params, GMMParams):
            raise TypeError("tuple condition must be (GMMParams, cluster_indices)")
        clusters = np.asarray(indices, dtype=np.int64)
        if clusters.shape != (n,):
            raise ValueError(f"need {n} cluster indices, got shape {clusters.shape}")
        if np.any(clusters < 1) or np.any(clusters > params.K):
            raise ValueError(f"cluster indices must lie in [1, {params.K}]")
        np_rng = np.random.default_rng(int(torch.randint(0, 2**31 - 1, (1,), generator=rng).item()))
        z_np = np.stack([sample_component(params, int(c), np_rng) for c in clusters])
        z = torch.as_tensor(z_np, dtype=dtype)
    else:
        z = torch.as_tensor(condition, dtype=dtype)
        if z.ndim != 2 or z.shape[0] != n:
            raise ValueError(f"z must have shape (n, J), got {tuple(z.shape)}")

    x = torch.empty((n, *image_shape), dtype=dtype).normal_(generator=rng)
    with torch.no_grad():
        for t in range(schedule.T, 0, -1):
            x = reverse_step(x, t, z, predictor, schedule, rng)
    if not torch.isfinite(x).all():
        raise FloatingPointError("generation produced non-finite values")
    return GenerationResult(images=x, z=z, clusters=clusters)


def save_image_grid(images: torch.Tensor, path, ncol: int = 8, pad: int = 2):
    """Write a grid of [-1, 1] images to a lossless PNG (clamped at export)."""
    from PIL import Image

    imgs = images.detach().cpu().clamp(-1.0, 1.0).numpy()
    n, c, h, w = imgs.shape
    ncol = min(ncol, n)
    nrow = (n + ncol - 1) // ncol
    grid = np.zeros((c, nrow * (h + pad) + pad, ncol * (w + pad) + pad), dtype=np.float32)
    for i in range(n):
        r, col = divmod(i, ncol)
        top = pad + r * (h + pad)
        left = pad + col * (w + pad)
        grid[:, top : top + h, left : left + w] = imgs[i]
    arr = np.round((grid + 1.0) * 127.5).astype(np.uint8)
    arr = np.transpose(arr, (1, 2, 0))
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")
    return path
