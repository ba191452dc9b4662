"""Loss functions for all four stages plus the MixMatch primitives.

Everything operates on torch tensors and is differentiable end to end; none
of the functions touch module state.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .config import GanTargets, MixMatchConfig

PROB_FLOOR = 1e-7


def cosine_similarity(z_i: torch.Tensor, z_j: torch.Tensor) -> torch.Tensor:
    if z_i.shape != z_j.shape:
        raise ValueError(f"dimension mismatch {tuple(z_i.shape)} vs {tuple(z_j.shape)}")
    ni, nj = z_i.norm(), z_j.norm()
    if ni == 0 or nj == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return torch.dot(z_i, z_j) / (ni * nj)


def similarity_matrix(z: torch.Tensor) -> torch.Tensor:
    """All pairwise cosine similarities of the rows of ``z``."""
    norms = z.norm(dim=1, keepdim=True)
    if (norms == 0).any():
        raise ValueError("cosine similarity is undefined for a zero vector")
    zn = z / norms
    return zn @ zn.t()


def nt_xent_rows(z: torch.Tensor, temperature: float) -> torch.Tensor:
    """l(i, partner(i)) for every row, partners being (0,1), (2,3), ...

    The denominator runs over every k != i, the positive partner included.
    """
    n2 = z.shape[0]
    if n2 < 2 or n2 % 2:
        raise ValueError(f"need an even number (>= 2) of rows, got {n2}")
    logits = similarity_matrix(z) / temperature
    eye = torch.eye(n2, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(eye, float("-inf"))
    partner = torch.arange(n2, device=z.device) ^ 1
    return torch.logsumexp(logits, dim=1) - logits[torch.arange(n2), partner]


def nt_xent_pair(z: torch.Tensor, i: int, j: int, temperature: float) -> torch.Tensor:
    """Contrastive loss of the positive pair (i, j) among the 2N rows of ``z``."""
    n2 = z.shape[0]
    if i == j:
        raise ValueError("positive pair needs two distinct indices")
    if not (0 <= i < n2 and 0 <= j < n2):
        raise IndexError(f"pair ({i}, {j}) outside batch of {n2}")
    logits = similarity_matrix(z)[i] / temperature
    keep = torch.ones(n2, dtype=torch.bool, device=z.device)
    keep[i] = False
    return torch.logsumexp(logits[keep], dim=0) - logits[j]


def contrastive_loss(z: torch.Tensor, temperature: float) -> torch.Tensor:
    """(1/2N) * sum over pairs of l(2m-1, 2m) + l(2m, 2m-1)."""
    return nt_xent_rows(z, temperature).mean()


def reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Per-image mean squared error averaged over the N images."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return ((x - x_hat) ** 2).flatten(1).mean(dim=1).mean()


def pretrain_loss(z, x, x_hat, temperature: float, use_decoder: bool = True):
    """Contrastive term plus reconstruction of the N inputs from their latents.

    Returns ``(total, contrastive, reconstruction)``; with ``use_decoder`` off
    the reconstruction term is reported but left out of the total.
    """
    if z.shape[0] != 2 * x.shape[0]:
        raise ValueError(f"expected {2 * x.shape[0]} projected rows for {x.shape[0]} images, got {z.shape[0]}")
    con = contrastive_loss(z, temperature)
    rec = reconstruction_loss(x, x_hat)
    total = con + rec if use_decoder else con
    return total, con, rec


def lsgan_losses(d_real: torch.Tensor, d_fake: torch.Tensor, t: GanTargets):
    """Least-squares losses: (discriminator, generator)."""
    if d_real.numel() == 0 or d_fake.numel() == 0:
        raise ValueError("lsgan_losses needs non-empty batches")
    loss_d = ((d_real - t.b) ** 2).mean() + ((d_fake - t.a) ** 2).mean()
    loss_g = ((d_fake - t.c) ** 2).mean()
    return loss_d, loss_g


def lsgan_generator_loss(d_fake: torch.Tensor, t: GanTargets) -> torch.Tensor:
    return ((d_fake - t.c) ** 2).mean()


def _check_labeled(y: torch.Tensor, n: int) -> None:
    if (y < 0).any():
        raise ValueError("unlabeled rows passed to a supervised loss")
    if (y >= n).any():
        raise ValueError(f"label outside the {n} real classes")


def ssgan_losses(logits_labeled, y, logits_real, logits_fake):
    """Semi-supervised GAN losses over n+1 logits, the last one meaning "fake".

    Returns ``(supervised, unsupervised)``: cross-entropy of the labeled reals
    against their class, and -[log(1 - p_fake(real)) + log p_fake(fake)].
    """
    n = logits_labeled.shape[1] - 1
    _check_labeled(y, n)
    sup = F.cross_entropy(logits_labeled, y) if len(y) else logits_labeled.sum() * 0.0
    # log(1 - p_fake) = logsumexp(real-class logits) - logsumexp(all logits)
    lp_not_fake = torch.logsumexp(logits_real[:, :n], 1) - torch.logsumexp(logits_real, 1)
    lp_fake = logits_fake[:, n] - torch.logsumexp(logits_fake, 1)
    unsup = -(lp_not_fake.mean() + lp_fake.mean())
    return sup, unsup


def ssgan_generator_loss(logits_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss: -log(1 - p_fake(G(z)))."""
    n = logits_fake.shape[1] - 1
    return -(torch.logsumexp(logits_fake[:, :n], 1) - torch.logsumexp(logits_fake, 1)).mean()


def stage3_losses(class_logits, y, d2_real, d2_fake, t: GanTargets):
    """(supervised cross-entropy of D1 on labeled reals, least-squares D2 term)."""
    _check_labeled(y, class_logits.shape[1])
    if len(y) != class_logits.shape[0]:
        raise ValueError("one label per logit row required")
    probs = torch.softmax(class_logits, dim=1).clamp(PROB_FLOOR, 1.0)
    sup = -probs.gather(1, y[:, None]).log().mean()
    unsup = ((d2_real - t.b) ** 2).mean()
    if d2_fake.numel():
        unsup = unsup + ((d2_fake - t.a) ** 2).mean()
    return sup, unsup


def sharpen(p: torch.Tensor, temperature: float) -> torch.Tensor:
    """p^(1/T) renormalized along the last axis."""
    if temperature <= 0:
        raise ValueError("sharpening temperature must be positive")
    if (p.sum(dim=-1) <= 0).any():
        raise ValueError("cannot sharpen an all-zero distribution")
    # scale by the row max first so small T does not underflow
    q = (p / p.amax(dim=-1, keepdim=True)) ** (1.0 / temperature)
    return q / q.sum(dim=-1, keepdim=True)


def mixup_coefficient(alpha: float, rng: np.random.Generator) -> float:
    lam = float(rng.beta(alpha, alpha))
    return max(lam, 1.0 - lam)


def mixup(x1, x2, p1, p2, alpha: float, rng: np.random.Generator | None = None, lam: float | None = None):
    """Convex combination weighted towards the first pair.

    Draws lam ~ Beta(alpha, alpha) and uses max(lam, 1 - lam) unless ``lam`` is
    given. Returns ``(x_mix, p_mix, lam)``.
    """
    if x1.shape != x2.shape or p1.shape != p2.shape:
        raise ValueError("mixup inputs must match pairwise in shape")
    if lam is None:
        if rng is None:
            raise ValueError("mixup needs an rng or an explicit lam")
        lam = mixup_coefficient(alpha, rng)
    return lam * x1 + (1.0 - lam) * x2, lam * p1 + (1.0 - lam) * p2, lam


def rampup_weight(step: int, total_steps: int, cfg: MixMatchConfig) -> float:
    """lambda_u scaled by a linear ramp over the first ``rampup_fraction`` of steps."""
    ramp = cfg.rampup_fraction * total_steps
    if ramp <= 0:
        return cfg.lambda_u
    return cfg.lambda_u * min(1.0, step / ramp)


def stage4_loss(logits_x, p, logits_u, q, cfg: MixMatchConfig, lambda_u: float | None = None,
                labeled_fraction: float | None = None):
    """Cross-entropy on the labeled portion plus weighted MSE on the rest.

    Returns ``(total, loss_x, loss_u)``. ``loss_u`` is the squared distance
    between targets and predicted probabilities, averaged over rows and
    classes. The labeled portion must hold ``labeled_fraction`` of all rows.
    """
    frac = cfg.labeled_fraction if labeled_fraction is None else labeled_fraction
    n_x, n_u = logits_x.shape[0], logits_u.shape[0]
    if abs(n_x - frac * (n_x + n_u)) >= 0.5 + 1e-9:
        raise ValueError(
            f"{n_x} labeled of {n_x + n_u} rows does not match labeled_fraction={frac:.4f}"
        )
    weight = cfg.lambda_u if lambda_u is None else lambda_u
    probs_x = torch.softmax(logits_x, dim=1).clamp(PROB_FLOOR, 1.0)
    loss_x = -(p * probs_x.log()).sum(dim=1).mean()
    if n_u:
        loss_u = ((q - torch.softmax(logits_u, dim=1)) ** 2).mean()
    else:
        loss_u = logits_x.sum() * 0.0
    if weight == 0:
        return loss_x, loss_x, loss_u
    return loss_x + weight * loss_u, loss_x, loss_u
