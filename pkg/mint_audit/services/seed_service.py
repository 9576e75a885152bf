"""
Seed expansion: one master seed becomes independent per-stage seeds.
"""

from dataclasses import asdict, dataclass
from typing import Dict

import numpy as np
import torch


@dataclass(frozen=True)
class StageSeeds:
    split: int
    subsample: int
    init: int
    dropout: int
    shuffle: int

    def as_dict(self) -> Dict[str, int]:
        return asdict(self)


def derive_stage_seeds(master_seed: int) -> StageSeeds:
    """Expand a master seed deterministically into per-stage seeds"""
    state = np.random.SeedSequence(master_seed).generate_state(5, dtype=np.uint32)
    split, subsample, init, dropout, shuffle = (int(s) for s in state)
    return StageSeeds(split=split, subsample=subsample, init=init, dropout=dropout, shuffle=shuffle)


def torch_generator(seed: int) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    return generator
