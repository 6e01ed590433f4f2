import numpy as np
import pytest
import torch

from safe_ood import synth
from safe_ood.detector import train_detector


@pytest.fixture(scope="session")
def small_splits():
    out = {}
    for kind, n in (("id_train", 200), ("id_val", 40), ("id_test", 30), ("ood_test", 30)):
        scenes, _ = synth.render_split(kind, n, 0)
        out[kind] = synth.scenes_to_dataset(scenes, kind)
    return out


@pytest.fixture(scope="session")
def small_detector(small_splits):
    """A briefly trained, frozen detector; good enough to produce boxes."""
    det, history = train_detector(small_splits["id_train"], epochs=6, seed=0,
                                  val_dataset=small_splits["id_val"], recall_gate=None)
    return det


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def weight_hash(model: torch.nn.Module) -> str:
    import hashlib
    h = hashlib.sha256()
    for k, v in model.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()
