"""Loss terms for the adversarial manifold GAN, each a pure differentiable map.

Conventions: batch reduction is the mean, so weights are scale-free in batch
size. Reported per-term values are already weighted; the generator and
discriminator totals are plain sums of their terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import (
    MissingRegion,
    NonDifferentiableCritic,
    NonFiniteLoss,
    OutOfRange,
    ShapeMismatch,
)

REGION_ORDER = ("eyes", "nose", "mouth")


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 1.0
    lambda_gp: float = 10.0
    lambda_au: float = 250.0
    lambda_g: float = 20.0
    lambda_l: float = 20.0
    lambda_adv: float = 25.0

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if not math.isfinite(v) or v < 0.0:
                raise OutOfRange(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossReport:
    """Per-step scalars; every field is already weighted by its lambda."""

    critic_d: float
    critic_g: float
    gp: float  # raw penalty, its weighted value is folded into critic_d
    au_d: float
    au_g: float
    exp_global: float
    exp_local: float
    adv: float
    total_g: float
    total_d: float

    FIELDS = ("critic_d", "critic_g", "gp", "au_d", "au_g",
              "exp_global", "exp_local", "adv", "total_g", "total_d")

    def as_row(self):
        return [getattr(self, f) for f in self.FIELDS]


def gradient_penalty(critic, real: torch.Tensor, fake: torch.Tensor, generator=None) -> torch.Tensor:
    """Mean of (||grad_x critic(x)|| - 1)^2 on per-item random interpolates.

    critic is a callable image batch -> score batch. The interpolation factor
    t is drawn uniformly per item from the supplied torch.Generator.
    """
    if real.shape != fake.shape:
        raise ShapeMismatch(f"real {tuple(real.shape)} vs fake {tuple(fake.shape)}")
    b = real.shape[0]
    t = torch.rand(b, 1, 1, 1, generator=generator, dtype=real.dtype, device=real.device)
    mix = (t * real + (1.0 - t) * fake.detach()).requires_grad_(True)
    scores = critic(mix)
    if scores.shape[0] != b:
        raise ShapeMismatch(f"critic returned {tuple(scores.shape)} for batch of {b}")
    try:
        (grad,) = torch.autograd.grad(
            scores.sum(), mix, create_graph=True, allow_unused=True
        )
    except RuntimeError as exc:
        raise NonDifferentiableCritic(f"cannot differentiate critic w.r.t. input: {exc}") from None
    if grad is None:
        raise NonDifferentiableCritic("critic output does not depend on its input")
    norms = grad.flatten(1).norm(dim=1)
    return ((norms - 1.0) ** 2).mean()


def critic_loss_d(real_scores: torch.Tensor, fake_scores: torch.Tensor, gp_value, w: LossWeights):
    return (
        w.lambda_c * ((1.0 - real_scores) ** 2).mean()
        + w.lambda_c * (fake_scores ** 2).mean()
        + w.lambda_gp * gp_value
    )


def critic_loss_g(fake_scores: torch.Tensor, w: LossWeights):
    return w.lambda_c * ((1.0 - fake_scores) ** 2).mean()


def au_regression_loss(pred: torch.Tensor, target: torch.Tensor, lambda_au: float):
    """lambda * mean over the batch of squared l2 error of the AU prediction."""
    if pred.shape != target.shape or pred.dim() != 2:
        raise ShapeMismatch(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return lambda_au * ((pred - target) ** 2).sum(dim=1).mean()


def _gaussian_window(win: int, sigma: float, dtype, device):
    half = (win - 1) // 2
    coords = torch.arange(-half, half + 1, dtype=dtype, device=device)
    k = torch.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    k = k / k.sum()
    return torch.outer(k, k)


def ssim(a: torch.Tensor, b: torch.Tensor, win: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Mean structural similarity for images in [0, 1].

    Gaussian-weighted local statistics, no sample-covariance correction,
    stabilizers C1=0.01^2 and C2=0.03^2 for unit dynamic range. The window is
    applied validly, which matches reference implementations that crop the
    half-window border before averaging.
    """
    if a.shape != b.shape:
        raise ShapeMismatch(f"ssim inputs differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    squeeze = a.dim() == 3
    if squeeze:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    if a.dim() != 4:
        raise ShapeMismatch(f"ssim expects (C,H,W) or (B,C,H,W), got {tuple(a.shape)}")
    if a.shape[-1] < win or a.shape[-2] < win:
        raise ShapeMismatch(f"image {tuple(a.shape)} smaller than the {win}x{win} window")
    # the variance terms cancel catastrophically against C2 in single precision
    a, b = a.double(), b.double()
    c = a.shape[1]
    kernel = _gaussian_window(win, sigma, a.dtype, a.device).expand(c, 1, win, win)
    c1, c2 = 0.01 ** 2, 0.03 ** 2

    def filt(x):
        return F.conv2d(x, kernel, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    )
    return s.mean()


def expression_terms(
    adv: torch.Tensor,
    global_signal: torch.Tensor,
    local_signals: dict,
    adv_crops: dict,
    w: LossWeights,
    literal_ssim_sign: bool = False,
):
    """Weighted (global, local) expression supervision terms.

    Global: drives the adversarial image toward the global editor's render via
    structural similarity; the printed form of the objective rewards
    dissimilarity, selectable with literal_ssim_sign for comparison runs.
    Local: summed per-region MSE against the local editors' patch renders.
    """
    for region in REGION_ORDER:
        if region not in local_signals:
            raise MissingRegion(f"local editor signal for {region!r} missing")
        if region not in adv_crops:
            raise MissingRegion(f"adversarial crop for {region!r} missing")
    s = ssim(adv, global_signal)
    g_term = w.lambda_g * (s if literal_ssim_sign else 1.0 - s)
    l_sum = None
    for region in REGION_ORDER:
        sig, crop = local_signals[region], adv_crops[region]
        if sig.shape != crop.shape:
            raise ShapeMismatch(
                f"{region} signal {tuple(sig.shape)} vs crop {tuple(crop.shape)}"
            )
        mse = ((crop - sig) ** 2).mean()
        l_sum = mse if l_sum is None else l_sum + mse
    return g_term, w.lambda_l * l_sum


def expression_loss(adv, global_signal, local_signals, adv_crops, w, literal_ssim_sign=False):
    g_term, l_term = expression_terms(
        adv, global_signal, local_signals, adv_crops, w, literal_ssim_sign
    )
    return g_term + l_term


def _as_float(name, value):
    v = float(value.detach().item() if isinstance(value, torch.Tensor) else value)
    if not math.isfinite(v):
        raise NonFiniteLoss(f"loss term {name} is not finite: {v}")
    return v


def total_losses(critic_d, critic_g, gp, au_d, au_g, exp_global, exp_local, adv) -> LossReport:
    """Assemble the per-step report; totals are sums of the weighted terms."""
    vals = {
        "critic_d": _as_float("critic_d", critic_d),
        "critic_g": _as_float("critic_g", critic_g),
        "gp": _as_float("gp", gp),
        "au_d": _as_float("au_d", au_d),
        "au_g": _as_float("au_g", au_g),
        "exp_global": _as_float("exp_global", exp_global),
        "exp_local": _as_float("exp_local", exp_local),
        "adv": _as_float("adv", adv),
    }
    total_g = vals["critic_g"] + vals["au_g"] + vals["exp_global"] + vals["exp_local"] + vals["adv"]
    total_d = vals["critic_d"] + vals["au_d"]
    return LossReport(total_g=total_g, total_d=total_d, **vals)
