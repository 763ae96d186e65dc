"""Deterministic per-consumer random streams derived from a trial seed."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch


def _tag_words(consumer_tag: str) -> tuple[int, ...]:
    digest = hashlib.sha256(consumer_tag.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))


@dataclass(frozen=True)
class RngState:
    """Identity of one random stream: a trial seed plus a consumer tag.

    Streams for different tags are statistically independent; the same
    ``(trial_seed, consumer_tag)`` pair always reproduces the same stream.
    """

    trial_seed: int
    consumer_tag: str

    def __post_init__(self):
        if not isinstance(self.consumer_tag, str) or not self.consumer_tag:
            raise ValueError("consumer_tag must be a nonempty string")
        if isinstance(self.trial_seed, bool) or not isinstance(self.trial_seed, (int, np.integer)):
            raise TypeError(f"trial_seed must be an integer, got {self.trial_seed!r}")

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(
            entropy=int(self.trial_seed) & (2**128 - 1),
            spawn_key=_tag_words(self.consumer_tag),
        )

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(self.seed_sequence()))

    def int_seed(self) -> int:
        """A 63-bit integer seed, for libraries that take a plain seed."""
        return int(self.seed_sequence().generate_state(2, np.uint32).view(np.uint64)[0] >> 1)

    def torch_generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(self.int_seed())
        return g

    def child(self, suffix: str) -> "RngState":
        return RngState(self.trial_seed, f"{self.consumer_tag}/{suffix}")


def derive_rng(trial_seed: int, consumer_tag: str) -> np.random.Generator:
    """Return the numpy generator for ``(trial_seed, consumer_tag)``."""
    return RngState(trial_seed, consumer_tag).generator()


def derive_seed(trial_seed: int, consumer_tag: str) -> int:
    return RngState(trial_seed, consumer_tag).int_seed()
