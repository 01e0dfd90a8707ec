"""Encoder / decoder stacks for the implicit, E1 and E2 model variants.

All blocks are conv (or deconv) -> batchnorm -> ReLU with kernel 3, stride 1
and padding 1, so every tensor keeps the input length L. The final output
block swaps ReLU for Identity; encoder blocks never do. With F input variables
the implicit encoder widens F -> F -> 2F -> 4F -> d, with d = 8F unless the
last block is widened. E1 and E2 add a mask stream of width M = F.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
import torch.nn as nn

from ..core.errors import ShapeMismatchError
from ..models.schemas import LayerSpec, Variant
from .numkernel import SpecStack, conv_block
from .quantizer import Codebook, QuantizeResult


def block_stack(widths: Sequence[int], deconv: bool = False, identity_last: bool = True) -> List[LayerSpec]:
    specs: List[LayerSpec] = []
    pairs = list(zip(widths[:-1], widths[1:]))
    for i, (c_in, c_out) in enumerate(pairs):
        specs += conv_block(c_in, c_out, last=identity_last and i == len(pairs) - 1, deconv=deconv)
    return specs


@dataclass
class VQOutput:
    z_e: torch.Tensor
    quantized: QuantizeResult
    reconstruction: torch.Tensor


class VQModel(nn.Module):
    def __init__(
        self,
        variant: Variant,
        n_features: int,
        embedding_dim: int = 80,
        codebook_size: int = 256,
        decay: float = 0.99,
        epsilon: float = 1e-5,
    ):
        super().__init__()
        self.variant = Variant(variant)
        self.n_features = n_features
        self.embedding_dim = embedding_dim
        f, m, d = n_features, n_features, embedding_dim

        if self.variant == Variant.IMPLICIT:
            self.encoder = SpecStack(block_stack([f, f, 2 * f, 4 * f, d], identity_last=False), prefix="encoder")
            self.mask_encoder = None
        else:
            self.mask_encoder = SpecStack(block_stack([m, m, m], identity_last=False), prefix="mask_encoder")
            self.encoder = SpecStack(
                block_stack([f + m, f, 2 * f, 4 * f, 4 * f, 6 * f, d], identity_last=False), prefix="encoder"
            )

        self.codebook = Codebook(codebook_size, embedding_dim, decay=decay, epsilon=epsilon)

        if self.variant == Variant.E2:
            self.decoder = SpecStack(
                block_stack([d, 6 * f, 4 * f, 4 * f, 2 * f, f], deconv=True, identity_last=False), prefix="decoder"
            )
            self.mask_decoder = SpecStack(block_stack([m, m, m], identity_last=False), prefix="mask_decoder")
            self.refiner = SpecStack(block_stack([f + m, f + m, f, f, f], deconv=True), prefix="refiner")
        else:
            self.decoder = SpecStack(block_stack([d, 6 * f, 4 * f, 4 * f, 2 * f, f], deconv=True), prefix="decoder")
            self.mask_decoder = None
            self.refiner = None

    def _inputs(self, x: torch.Tensor, mask: torch.Tensor):
        if x.shape != mask.shape or x.dim() != 3 or x.shape[1] != self.n_features:
            raise ShapeMismatchError(
                f"{self.variant.value}.input", f"[B, {self.n_features}, L] values and mask", f"{list(x.shape)} / {list(mask.shape)}"
            )
        observed = mask == 1
        # zero-imputation: only observed entries reach the network
        x_in = torch.where(observed, x, torch.zeros_like(x))
        return x_in, observed.to(x.dtype)

    def encode(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x_in, binary_mask = self._inputs(x, mask)
        if self.mask_encoder is None:
            return self.encoder(x_in)
        return self.encoder(torch.cat([x_in, self.mask_encoder(binary_mask)], dim=1))

    def decode(self, z_q: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Per-variable outputs: scaled values, logits for binary variables"""
        out = self.decoder(z_q)
        if self.refiner is None:
            return out
        if mask is None:
            raise ShapeMismatchError(f"{self.variant.value}.decoder", "binary mask", None)
        binary_mask = (mask == 1).to(z_q.dtype)
        return self.refiner(torch.cat([out, self.mask_decoder(binary_mask)], dim=1))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> VQOutput:
        z_e = self.encode(x, mask)
        quantized = self.codebook.quantize(z_e)
        reconstruction = self.decode(quantized.z_q, mask)
        return VQOutput(z_e=z_e, quantized=quantized, reconstruction=reconstruction)
