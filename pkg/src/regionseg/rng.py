"""Seed substreams.

Every random decision in the pipeline draws from a named substream of one
root seed, so components can be re-run independently without perturbing
each other's randomness.
"""

import hashlib

import numpy as np
import torch


def substream_seed(root_seed: int, *names) -> int:
    """Derive a 63-bit child seed from a root seed and a substream name."""
    key = ":".join([str(int(root_seed))] + [str(n) for n in names])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def numpy_rng(root_seed: int, *names) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(substream_seed(root_seed, *names)))


def torch_generator(root_seed: int, *names) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(substream_seed(root_seed, *names))
    return gen
