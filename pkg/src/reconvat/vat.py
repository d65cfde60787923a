"""Virtual adversarial perturbations with per-timestep normalisation and BCE-based LDS."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch

from .audio import InvalidInputError
from .model import ModelOutput, Transcriber, frozen_batch_stats

PROB_CLAMP = 1e-7


class DegenerateGradientWarning(RuntimeWarning):
    pass


@dataclass
class VatConfig:
    epsilon: float = 1.0
    xi: float = 1e-2
    power_iterations: int = 1
    include_onset: bool = True

    def __post_init__(self):
        if not (self.epsilon >= 0 and self.epsilon != float("inf")):
            raise ValueError(f"epsilon must be finite and non-negative, got {self.epsilon}")
        if self.xi <= 0:
            raise ValueError("xi must be positive")
        if self.power_iterations < 1:
            raise ValueError("power_iterations must be >= 1")


def binary_cross_entropy(target: torch.Tensor, prob: torch.Tensor, clamp: float = PROB_CLAMP) -> torch.Tensor:
    """Mean of -[target log prob + (1 - target) log(1 - prob)], both sides clamped to [clamp, 1 - clamp]."""
    if target.shape != prob.shape:
        raise InvalidInputError(f"shape mismatch: {tuple(target.shape)} vs {tuple(prob.shape)}")
    target = target.clamp(clamp, 1 - clamp)
    prob = prob.clamp(clamp, 1 - clamp)
    return -(target * torch.log(prob) + (1 - target) * torch.log1p(-prob)).mean()


def bce_divergence(reference: ModelOutput, other: ModelOutput, include_onset: bool) -> torch.Tensor:
    """Sum over heads of mean BCE with ``reference`` as the soft target."""
    ref = reference.probabilities(include_onset)
    out = other.probabilities(include_onset)
    return sum(binary_cross_entropy(ref[k], out[k]) for k in ref)


def timestep_normalize(g: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    """Scale every (batch, timestep) row of a (B, T, F) tensor to L2 norm ``scale``; zero rows stay zero."""
    # divide by the row max first so tiny float32 rows do not underflow to a zero norm
    peak = g.abs().amax(dim=-1, keepdim=True)
    nonzero = peak > 0
    unit = g / torch.where(nonzero, peak, torch.ones_like(peak))
    norms = unit.norm(dim=-1, keepdim=True)
    return torch.where(nonzero, unit / torch.where(nonzero, norms, torch.ones_like(norms)) * scale,
                       torch.zeros_like(g))


def divergence_gradient(model: Transcriber, spec: torch.Tensor, r: torch.Tensor, reference: ModelOutput,
                        include_onset: bool) -> torch.Tensor:
    """Gradient w.r.t. ``r`` of the divergence between ``reference`` and the prediction at ``spec + r``."""
    r = r.detach().requires_grad_(True)
    divergence = bce_divergence(reference, model(spec.detach() + r), include_onset)
    (g,) = torch.autograd.grad(divergence, r, allow_unused=True)
    return torch.zeros_like(r) if g is None else g.detach()


def compute_adversarial_perturbation(model: Transcriber, spec: torch.Tensor, config: VatConfig,
                                     generator: torch.Generator | None = None,
                                     reference: ModelOutput | None = None) -> torch.Tensor:
    """Adversarial direction found by power iteration, normalised per timestep to norm epsilon.

    The model weights are held constant: gradients are taken with respect to
    the perturbation only, so no parameter ``.grad`` is touched, and batch
    norm running statistics are left alone.
    """
    with frozen_batch_stats(model):
        return _adversarial_direction(model, spec, config, generator, reference)


def _adversarial_direction(model, spec, config, generator, reference):
    if reference is None:
        with torch.no_grad():
            reference = model(spec)
    if config.epsilon == 0:
        return torch.zeros_like(spec)
    # one random start shared by the whole batch keeps lds invariant to duplicating examples
    noise = torch.randn(spec.shape[1:], generator=generator, dtype=spec.dtype, device=spec.device)
    r = timestep_normalize(noise.expand_as(spec), config.xi)
    for step in range(config.power_iterations):
        g = divergence_gradient(model, spec, r, reference, config.include_onset)
        if step < config.power_iterations - 1:
            r = timestep_normalize(g, config.xi)
    r_adv = timestep_normalize(g, config.epsilon)
    if not g.any():
        warnings.warn("adversarial gradient vanished at every timestep; perturbation is zero",
                      DegenerateGradientWarning, stacklevel=2)
    return r_adv


def lds(model: Transcriber, spec: torch.Tensor, config: VatConfig,
        generator: torch.Generator | None = None) -> torch.Tensor:
    """Local distributional smoothness of a batch, normalised by that batch's own size.

    The clean prediction is a constant target; gradient reaches the weights
    only through the perturbed forward pass. None of these passes updates
    batch norm running statistics.
    """
    if spec.dim() != 3 or spec.shape[0] == 0:
        raise InvalidInputError(f"lds needs a non-empty (B, T, F) batch, got {tuple(spec.shape)}")
    with frozen_batch_stats(model):
        with torch.no_grad():
            reference = model(spec)
        r_adv = _adversarial_direction(model, spec, config, generator, reference)
        return bce_divergence(reference, model(spec + r_adv), config.include_onset)
