import random

import numpy as np
import torch


def seed_all(seed: int) -> None:
    """Reseed every global random stream the package draws from."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def generator(seed: int) -> torch.Generator:
    """A private torch stream, independent of the global one."""
    g = torch.Generator()
    g.manual_seed(seed)
    return g
