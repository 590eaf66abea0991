import math

import torch
from torch import nn

from piuq.networks import Critic, CriticSpec, Generator, GeneratorOutput, GeneratorSpec


class LinearCritic(nn.Module):
    """``y -> <w, y> + bias`` per sample."""

    def __init__(self, w, bias=0.0):
        super().__init__()
        self.w = nn.Parameter(w.clone())
        self.bias = bias

    def forward(self, y):
        return (y * self.w).flatten(1).sum(dim=1) + self.bias


class ConstantCritic(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.c = c

    def forward(self, y):
        return (y * 0).flatten(1).sum(dim=1) + self.c


class IdentityGenerator(nn.Module):
    def __init__(self, scale=1.0):
        super().__init__()
        self.scale = scale

    def forward(self, x):
        return GeneratorOutput(x, torch.full_like(x, self.scale))


class ConstantScale(nn.Module):
    """Wraps a generator, replacing its scale head by a constant."""

    def __init__(self, inner, scale):
        super().__init__()
        self.inner = inner
        self.scale = scale

    def forward(self, x):
        out = self.inner(x)
        return GeneratorOutput(out.image, torch.full_like(out.image, self.scale))


def tiny_networks(seed=0, dtype=torch.float64, width=2):
    torch.manual_seed(seed)
    gen = Generator(GeneratorSpec(base_width=width)).to(dtype)
    critic = Critic(CriticSpec(base_width=width)).to(dtype)
    return gen, critic


@torch.no_grad()
def _shift(params, dirs, step):
    for p, v in zip(params, dirs):
        p.add_(step * v)


def directional_check(loss_fn, params, n_dirs=10, h=1e-6, seed=0):
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if gr is None else gr for p, gr in zip(params, grads)]
    g = torch.Generator().manual_seed(seed)
    errors = []
    for _ in range(n_dirs):
        dirs = [torch.randn(p.shape, generator=g, dtype=p.dtype) for p in params]
        norm = math.sqrt(sum(float((v * v).sum()) for v in dirs))
        dirs = [v / norm for v in dirs]
        analytic = sum(float((gr * v).sum()) for gr, v in zip(grads, dirs))
        _shift(params, dirs, h)
        plus = float(loss_fn().detach())
        _shift(params, dirs, -2 * h)
        minus = float(loss_fn().detach())
        _shift(params, dirs, h)
        fd = (plus - minus) / (2 * h)
        errors.append(abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-8))
    return errors
