"""Generator and discriminator objectives.

Every ``1/N sum`` is a mean over all elements of the batched array, so the
losses do not depend on patch resolution. Discriminator outputs are raw
(unsquashed) scores throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.01
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 1.0
    lambda4: float = 1.0
    lambda5: float = 0.1
    lambda6: float = 0.1
    # adversarial term of the HR-domain losses: the LR discriminator judges
    # the K-space-truncated HR output; False drops the term (beta = 0 there)
    hr_adversarial: bool = True

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, bool) and v < 0:
                raise LossError(f"loss weight {f.name}={v} is negative")

    def lambdas(self):
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5, self.lambda6)


GENERATOR_TERMS = ("i_cyc", "f_cyc", "hr_con", "lr_con", "da", "fa")


@dataclass
class LossReport:
    i_cyc: float = 0.0
    f_cyc: float = 0.0
    hr_con: float = 0.0
    lr_con: float = 0.0
    da: float = 0.0
    fa: float = 0.0
    total: float = 0.0
    lrd: float | None = None
    fd: float | None = None

    def components(self):
        return tuple(getattr(self, k) for k in GENERATOR_TERMS)


def _same_shape(x, y):
    if x.shape != y.shape:
        raise LossError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")


def l1(x, y):
    _same_shape(x, y)
    return (x - y).abs().mean()


# --- SSIM ------------------------------------------------------------------

def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA, dtype=torch.float64):
    r = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim_map(x, y, data_range=1.0, size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Slice-wise SSIM map of (..., X, Y, Z) tensors over valid 2D windows in each Z slice.

    Returns a tensor of shape (..., Z, X - size + 1, Y - size + 1).
    """
    _same_shape(x, y)
    nx, ny, nz = x.shape[-3:]
    if nx < size or ny < size:
        raise LossError(f"slice {nx}x{ny} smaller than the {size}x{size} SSIM window")
    lead = x.shape[:-3]
    g = gaussian_window(size, sigma, x.dtype).to(x.device)
    kx, ky = g.view(1, 1, size, 1), g.view(1, 1, 1, size)

    def blur(t):
        t = t.movedim(-1, -3).reshape(-1, 1, nx, ny)
        return F.conv2d(F.conv2d(t, kx), ky)

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    out = num / den
    return out.reshape(*lead, nz, out.shape[-2], out.shape[-1])


def batch_ssim(x, y, **kw):
    """Mean SSIM per batch element of (B, C, X, Y, Z) tensors."""
    m = ssim_map(x, y, **kw)
    return m.reshape(m.shape[0], -1).mean(dim=1)


def ssim_loss_from_values(ssim_values):
    return (1 - ssim_values ** 2).abs().mean()


def ssim_loss(x, y, **kw):
    return ssim_loss_from_values(batch_ssim(x, y, **kw))


# --- adversarial / composite -----------------------------------------------

def adv_gen(d_out):
    return ((d_out - 1) ** 2).mean()


def weighted_image_loss(l1_value, ssim_value, adv_value, alpha=0.5, beta=0.01):
    return l1_value + alpha * ssim_value + beta * adv_value


def _image_term(pred, target, d_out, w: LossWeights):
    parts = {"l1": l1(pred, target), "ssim": ssim_loss(pred, target)}
    parts["adv"] = adv_gen(d_out) if d_out is not None else pred.new_zeros(())
    return weighted_image_loss(parts["l1"], parts["ssim"], parts["adv"], w.alpha, w.beta), parts


def image_cycle(y_sts, y_s, d_out, w: LossWeights = LossWeights()):
    """HR image cycle loss; ``d_out`` is the realness map of the SR output or None."""
    return _image_term(y_sts, y_s, d_out, w)


def hr_consistency(y_hat_s, y_s, d_out, w: LossWeights = LossWeights()):
    return _image_term(y_hat_s, y_s, d_out, w)


def lr_consistency(x_hat_t, x_t, d_out, w: LossWeights = LossWeights()):
    return _image_term(x_hat_t, x_t, d_out, w)


def feature_cycle(f_sts, f_s):
    return l1(f_sts, f_s)


def da_image(d_st, d_t):
    return (d_st - 0.5).abs().mean() + (d_t - 0.5).abs().mean()


def da_feature(d_ft, d_fs):
    return (d_ft - 0.5).abs().mean() + (d_fs - 0.5).abs().mean()


def total_generator(components, w: LossWeights = LossWeights()):
    """Weighted sum of (i_cyc, f_cyc, hr_con, lr_con, da, fa)."""
    if isinstance(components, LossReport):
        components = components.components()
    elif isinstance(components, dict):
        components = tuple(components[k] for k in GENERATOR_TERMS)
    if len(components) != 6:
        raise LossError("need six loss components")
    total = 0.0
    for lam, c in zip(w.lambdas(), components):
        total = total + lam * c
    return total


def disc_lr(d_real_on_xt, d_fake_on_xst):
    return ((d_real_on_xt - 1) ** 2).mean() + (d_fake_on_xst ** 2).mean()


def disc_feature(d_on_fs, d_on_ft):
    return ((d_on_fs - 1) ** 2).mean() + (d_on_ft ** 2).mean()


def first_non_finite(named: dict):
    for k, v in named.items():
        val = v.item() if torch.is_tensor(v) else float(v)
        if not math.isfinite(val):
            return k, val
    return None
