"""In-memory tensor views of fogsim samples and a seeded batch sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch

from .fogsim import SceneSample, load_dataset


@dataclass
class TensorSet:
    ids: List[str]
    fog: torch.Tensor  # N x 3 x H x W
    clean: Optional[torch.Tensor]  # N x 3 x H x W, None when withheld
    label: Optional[torch.Tensor]  # N x H x W int64
    depth: torch.Tensor  # N x H x W
    split: str = ""

    def __len__(self):
        return len(self.ids)

    @property
    def has_labels(self):
        return self.label is not None

    def subset(self, idx):
        idx = torch.as_tensor(idx, dtype=torch.long)
        pick = lambda t: None if t is None else t[idx]
        return TensorSet([self.ids[i] for i in idx.tolist()], self.fog[idx], pick(self.clean),
                         pick(self.label), self.depth[idx], self.split)

    @staticmethod
    def concat(parts, split="mixed"):
        if any(p.clean is None for p in parts):
            raise ValueError("cannot concatenate sets lacking clean images")
        labels = None if any(p.label is None for p in parts) else torch.cat([p.label for p in parts])
        return TensorSet(sum((p.ids for p in parts), []), torch.cat([p.fog for p in parts]),
                         torch.cat([p.clean for p in parts]), labels,
                         torch.cat([p.depth for p in parts]), split)


def _chw(arrs):
    return torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).contiguous()


def from_samples(samples: Sequence[SceneSample], split="") -> TensorSet:
    samples = list(samples)
    if not samples:
        raise ValueError(f"no samples for split {split!r}")
    withheld = any(s.clean is None for s in samples)
    return TensorSet(
        ids=[s.id for s in samples],
        fog=_chw([s.fog for s in samples]),
        clean=None if withheld else _chw([s.clean for s in samples]),
        label=None if withheld else torch.from_numpy(np.stack([s.label for s in samples]).astype(np.int64)),
        depth=torch.from_numpy(np.stack([s.depth for s in samples])),
        split=split or samples[0].split,
    )


def load_split(root, split, evaluation=False) -> TensorSet:
    return from_samples(load_dataset(root, splits=[split], evaluation=evaluation), split)


class BatchSampler:
    """Reshuffles every epoch from a private generator, so sampling is reproducible."""

    def __init__(self, n, batch_size, seed):
        if n <= 0:
            raise ValueError("empty dataset")
        self.n, self.bs = n, min(batch_size, n)
        self.gen = torch.Generator().manual_seed(int(seed))
        self._perm, self._pos = None, n

    def next(self):
        if self._pos + self.bs > self.n:
            self._perm = torch.randperm(self.n, generator=self.gen)
            self._pos = 0
        idx = self._perm[self._pos:self._pos + self.bs]
        self._pos += self.bs
        return idx
