from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core.errors import ShapeMismatchError
import logging

logger = logging.getLogger(__name__)


@dataclass
class QuantizeResult:
    indices: torch.Tensor  # [B, L]
    z_q: torch.Tensor  # [B, d, L], straight-through
    codewords: torch.Tensor  # [B, d, L], detached
    distances: torch.Tensor  # [B, L, K]
    counts: torch.Tensor  # [K]
    perplexity: float


def perplexity_from_counts(counts: torch.Tensor) -> float:
    total = counts.sum()
    if total <= 0:
        return 0.0
    probs = counts.double() / total
    entropy = -(probs[probs > 0] * probs[probs > 0].log()).sum()
    return float(entropy.exp())


class Codebook(nn.Module):
    """K x d codebook updated by exponential moving averages rather than gradients"""

    def __init__(self, codebook_size: int, embedding_dim: int, decay: float = 0.99, epsilon: float = 1e-5):
        super().__init__()
        self.codebook_size = codebook_size
        self.embedding_dim = embedding_dim
        self.decay = decay
        self.epsilon = epsilon
        self.register_buffer("embeddings", torch.randn(codebook_size, embedding_dim))
        self.register_buffer("ema_cluster_size", torch.zeros(codebook_size))
        self.register_buffer("ema_embed_sum", torch.zeros(codebook_size, embedding_dim))
        self.register_buffer("usage", torch.zeros(codebook_size))
        self.register_buffer("initialized", torch.tensor(False))

    def flatten(self, z_e: torch.Tensor) -> torch.Tensor:
        if z_e.dim() != 3 or z_e.shape[1] != self.embedding_dim:
            raise ShapeMismatchError("codebook", f"[B, {self.embedding_dim}, L]", list(z_e.shape))
        return z_e.permute(0, 2, 1).reshape(-1, self.embedding_dim)

    def distances(self, flat: torch.Tensor) -> torch.Tensor:
        """Euclidean distances from each row to every codeword"""
        return torch.cdist(
            flat.unsqueeze(0),
            self.embeddings.to(flat.dtype).unsqueeze(0),
            compute_mode="donot_use_mm_for_euclid_dist",
        ).squeeze(0)

    def quantize(self, z_e: torch.Tensor) -> QuantizeResult:
        batch, _, length = z_e.shape
        flat = self.flatten(z_e)
        distances = self.distances(flat.detach())
        # argmin returns the first minimum, so ties go to the lowest index
        indices = distances.argmin(dim=1)
        codewords = self.embeddings[indices].to(z_e.dtype).view(batch, length, -1).permute(0, 2, 1)
        z_q = z_e + (codewords - z_e).detach()
        counts = torch.bincount(indices, minlength=self.codebook_size).to(self.usage.dtype)
        return QuantizeResult(
            indices=indices.view(batch, length),
            z_q=z_q,
            codewords=codewords.detach(),
            distances=distances.view(batch, length, -1),
            counts=counts,
            perplexity=perplexity_from_counts(counts),
        )

    @torch.no_grad()
    def initialize_from(self, z_e: torch.Tensor, generator: Optional[torch.Generator] = None) -> None:
        """Gaussian init matched to the per-dimension mean and spread of a warmup batch"""
        flat = self.flatten(z_e).float()
        mean = flat.mean(dim=0)
        std = flat.std(dim=0, unbiased=False).clamp_min(1e-3) if flat.shape[0] > 1 else flat.abs().mean().clamp_min(1e-3).expand_as(mean)
        noise = torch.randn(self.codebook_size, self.embedding_dim, generator=generator)
        self.embeddings.copy_(mean + noise * std)
        self.ema_cluster_size.zero_()
        self.ema_embed_sum.zero_()
        self.usage.zero_()
        self.initialized.fill_(True)
        rms = float(flat.pow(2).mean().sqrt())
        logger.info(f"Codebook initialised from warmup batch (rms {rms:.4f})")

    @torch.no_grad()
    def ema_update(self, z_e_flat: torch.Tensor, indices: torch.Tensor, decay: Optional[float] = None) -> None:
        """Move assigned codewords toward the mean of their cluster"""
        decay = self.decay if decay is None else decay
        if decay >= 1.0:
            return
        indices = indices.reshape(-1)
        flat = z_e_flat.reshape(-1, self.embedding_dim).to(self.embeddings.dtype)
        one_hot = F.one_hot(indices, self.codebook_size).to(flat.dtype)
        counts = one_hot.sum(dim=0)
        sums = one_hot.t() @ flat
        active = counts > 0
        if not active.any():
            return

        self.ema_cluster_size[active] = decay * self.ema_cluster_size[active] + (1 - decay) * counts[active]
        self.ema_embed_sum[active] = decay * self.ema_embed_sum[active] + (1 - decay) * sums[active]
        # Laplace smoothing keeps every cluster size strictly positive
        total = self.ema_cluster_size.sum()
        smoothed = (self.ema_cluster_size + self.epsilon) / (total + self.codebook_size * self.epsilon) * total
        self.embeddings[active] = self.ema_embed_sum[active] / smoothed[active].unsqueeze(1)

    @torch.no_grad()
    def record_usage(self, counts: torch.Tensor) -> None:
        self.usage += counts.to(self.usage.dtype)

    @torch.no_grad()
    def usage_ratio(self) -> torch.Tensor:
        total = self.usage.sum()
        if total <= 0:
            return torch.zeros_like(self.usage)
        return self.usage / (total / self.codebook_size)

    @torch.no_grad()
    def restart_dead_codes(
        self, donors: torch.Tensor, threshold: float = 0.1, generator: Optional[torch.Generator] = None
    ) -> int:
        """Re-seed under-used codewords from random encoder outputs and reset usage counters"""
        if threshold <= 0 or self.usage.sum() <= 0:
            self.usage.zero_()
            return 0
        dead = torch.nonzero(self.usage_ratio() < threshold).flatten()
        n_dead = int(dead.numel())
        if n_dead:
            donors = donors.reshape(-1, self.embedding_dim).to(self.embeddings.dtype)
            picks = torch.randint(donors.shape[0], (n_dead,), generator=generator)
            self.embeddings[dead] = donors[picks]
            self.ema_cluster_size[dead] = 1.0
            self.ema_embed_sum[dead] = donors[picks]
            logger.debug(f"Restarted {n_dead} dead codewords")
        self.usage.zero_()
        return n_dead

    def pseudo_probabilities(self, z_e: torch.Tensor) -> torch.Tensor:
        """Softmax over negative Euclidean distances; z_e is [N, d] or [B, d, L]"""
        flat = self.flatten(z_e) if z_e.dim() == 3 else z_e
        return torch.softmax(-self.distances(flat.double()), dim=1)

    def lookup(self, indices: torch.Tensor) -> torch.Tensor:
        return self.embeddings[indices]
