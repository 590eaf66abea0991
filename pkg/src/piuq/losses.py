"""Critic and generator risks for patch-invariant Wasserstein training.

Sign conventions follow minimisation: the critic minimises
``f(fake) - f(real)`` (plus patch terms and gradient penalty), the generator
minimises ``-f(fake)``.

Weighted sums recorded in :class:`LossBreakdown`:

* critic:    ``total = adversarial_full + adversarial_patch + penalty_term``
  (``penalty_term`` already carries the factor ``p``)
* generator: ``total = adversarial_full + adversarial_patch + weight * patch_term``
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .patch import apply_patch_batch


class Mode(str, enum.Enum):
    PI = "PI"
    UAPI = "UAPI"


@dataclass
class LossBreakdown:
    total: torch.Tensor
    adversarial_full: torch.Tensor
    adversarial_patch: torch.Tensor
    patch_term: torch.Tensor
    penalty_term: torch.Tensor
    weight: float = 1.0

    def as_record(self) -> dict:
        return {
            "total": float(self.total.detach()),
            "adversarial_full": float(self.adversarial_full.detach()),
            "adversarial_patch": float(self.adversarial_patch.detach()),
            "patch_term": float(self.patch_term.detach()),
            "penalty_term": float(self.penalty_term.detach()),
        }


def _check_batch(*sizes):
    if len(set(sizes)) != 1:
        raise ValueError(f"batch size mismatch: {sizes}")


def gradient_penalty(critic, interpolates: torch.Tensor, p: float) -> torch.Tensor:
    """``p * mean(relu(||grad f(y~)|| - 1)^2)``: one-sided, zero for norms below 1."""
    interpolates = interpolates.detach().requires_grad_(True)
    scores = critic(interpolates)
    (grad,) = torch.autograd.grad(scores.sum(), interpolates, create_graph=True)
    norms = grad.flatten(1).norm(dim=1)
    return p * F.relu(norms - 1.0).pow(2).mean()


def critic_risk(critic, generator, y, x, p, cfgs, *, eps=None, rng=None, patch_penalty=False,
                use_patches=True) -> LossBreakdown:
    """Empirical critic risk on a batch, with patch terms sharing the per-sample ``cfgs``.

    ``eps`` (shape ``(b,)``) fixes the interpolation weights; otherwise they
    are drawn from ``U[0, 1]`` using the torch generator ``rng``.
    The generator is evaluated without gradient tracking.  ``use_patches=False``
    drops the patch terms (plain WGAN-GP critic).
    """
    _check_batch(len(y), len(x), len(cfgs))
    if p < 0:
        raise ValueError(f"penalty weight must be non-negative, got {p}")
    b = len(y)
    with torch.no_grad():
        fake = generator(x).image
    if use_patches:
        fake_p = apply_patch_batch(cfgs, fake)
        real_p = apply_patch_batch(cfgs, y)
        s_fake, s_real, s_fake_p, s_real_p = critic(torch.cat([fake, y, fake_p, real_p])).split(b)
        adv_patch = (s_fake_p - s_real_p).mean()
    else:
        s_fake, s_real = critic(torch.cat([fake, y])).split(b)
    adv_full = (s_fake - s_real).mean()
    if not use_patches:
        adv_patch = adv_full.new_zeros(())

    if eps is None:
        eps = torch.rand(b, generator=rng, dtype=y.dtype)
    e = eps.to(y.dtype).view(b, *([1] * (y.ndim - 1)))
    penalty = gradient_penalty(critic, e * fake + (1 - e) * y, p) if p else adv_full.new_zeros(())
    if use_patches and patch_penalty and p:
        penalty = penalty + gradient_penalty(critic, e * fake_p + (1 - e) * real_p, p)
    zero = adv_full.new_zeros(())
    return LossBreakdown(adv_full + adv_patch + penalty, adv_full, adv_patch, zero, penalty)


def _adversarial_terms(critic, image, patch_of_image):
    b = len(image)
    scores = critic(torch.cat([image, patch_of_image]))
    return -scores[:b].mean(), -scores[b:].mean()


def generator_adversarial(critic, generator, x, cfgs) -> torch.Tensor:
    """``-mean[f(G(x)) + f(P(G(x)))]`` over the batch."""
    _check_batch(len(x), len(cfgs))
    image = generator(x).image
    full, patch = _adversarial_terms(critic, image, apply_patch_batch(cfgs, image))
    return full + patch


def plain_patch_loss(from_patch: torch.Tensor, patch_of_full: torch.Tensor) -> torch.Tensor:
    """Per-sample mean absolute difference, shape ``(n,)``."""
    return (from_patch - patch_of_full).abs().flatten(1).mean(dim=1)


def uncertainty_patch_loss(from_patch: torch.Tensor, patch_of_full: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """Per-sample Laplace negative log-likelihood ``mean(|r| / s + log(2 s))``."""
    if not bool((scale > 0).all()):
        raise FloatingPointError("non-positive scale map value encountered")
    r = (from_patch - patch_of_full).abs()
    return (r / scale + torch.log(2.0 * scale)).flatten(1).mean(dim=1)


def _forward_pair(generator, x, cfgs):
    b = len(x)
    out = generator(torch.cat([x, apply_patch_batch(cfgs, x)]))
    full_img, patch_img = out.image.split(b)
    _, patch_scale = out.scale.split(b)
    return full_img, patch_img, patch_scale


def patch_loss_plain(generator, x, cfg) -> torch.Tensor:
    """Patch-invariance residual for a single ``(c, d, d)`` sample."""
    full_img, patch_img, _ = _forward_pair(generator, x.unsqueeze(0), [cfg])
    return plain_patch_loss(patch_img, apply_patch_batch([cfg], full_img))[0]


def patch_loss_uncertainty(generator, x, cfg) -> torch.Tensor:
    full_img, patch_img, patch_scale = _forward_pair(generator, x.unsqueeze(0), [cfg])
    return uncertainty_patch_loss(patch_img, apply_patch_batch([cfg], full_img), patch_scale)[0]


def generator_risk(generator, critic, x, cfgs, weight, mode=Mode.UAPI, use_patches=True) -> LossBreakdown:
    """Adversarial terms plus ``weight`` times the batch-mean patch loss.

    One generator pass over ``[x, P(x)]`` provides both the full-size output and
    the patch output; the uncertainty loss takes its scale from the patch pass.
    ``use_patches=False`` with ``weight=0`` is the plain WGAN generator risk.
    """
    _check_batch(len(x), len(cfgs))
    if weight < 0:
        raise ValueError(f"patch weight must be non-negative, got {weight}")
    mode = Mode(mode)
    if not use_patches:
        if weight:
            raise ValueError("patch loss requested with patch terms disabled")
        adv_full = -critic(generator(x).image).mean()
        zero = adv_full.new_zeros(())
        return LossBreakdown(adv_full, adv_full, zero, zero, zero, 0.0)
    full_img, patch_img, patch_scale = _forward_pair(generator, x, cfgs)
    patch_of_full = apply_patch_batch(cfgs, full_img)
    adv_full, adv_patch = _adversarial_terms(critic, full_img, patch_of_full)
    if mode is Mode.PI:
        patch_term = plain_patch_loss(patch_img, patch_of_full).mean()
    else:
        patch_term = uncertainty_patch_loss(patch_img, patch_of_full, patch_scale).mean()
    total = adv_full + adv_patch + weight * patch_term
    return LossBreakdown(total, adv_full, adv_patch, patch_term, adv_full.new_zeros(()), weight)


def laplace_nll(residual: float, scale: float) -> float:
    """Per-pixel ``|r| / s + log(2 s)``; minimised over ``s`` at ``s = |r|``."""
    return abs(residual) / scale + math.log(2.0 * scale)
