"""Seed fan-out.

A single 64-bit global seed is split into per-component seeds with
``numpy.random.SeedSequence([global_seed, crc32(component)])``; the first
64-bit word of the generated state is the component seed. Component names are
dotted paths such as ``"datagen.mcar"`` or ``"ablation.cell.3"``.
"""

import random
import threading
import zlib
from contextlib import contextmanager
from typing import Iterator

import numpy as np
import torch

from .config import settings


def derive_seed(global_seed: int, component: str) -> int:
    """Derive a reproducible 64-bit seed for a named component"""
    key = zlib.crc32(component.encode("utf-8"))
    sequence = np.random.SeedSequence([int(global_seed) & 0xFFFFFFFFFFFFFFFF, key])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def numpy_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def torch_generator(seed: int) -> torch.Generator:
    generator = torch.Generator()
    # torch seeds must fit in a signed 64-bit integer
    generator.manual_seed(seed % (2**63 - 1))
    return generator


def seed_everything(seed: int) -> None:
    """Seed every global RNG and switch torch to deterministic kernels"""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed % (2**63 - 1))
    torch.set_num_threads(max(1, settings.torch_threads))
    if settings.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


_torch_rng_lock = threading.RLock()


@contextmanager
def seeded_torch(seed: int) -> Iterator[None]:
    """Run a block on a forked, seeded global torch RNG; blocks never overlap across threads"""
    with _torch_rng_lock, torch.random.fork_rng():
        torch.manual_seed(seed % (2**63 - 1))
        yield
