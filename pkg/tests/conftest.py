import numpy as np
import pytest
import torch

torch.set_num_threads(max(1, torch.get_num_threads()))

import makeupdiff as md
from makeupdiff.denoiser import DenoiserConfig
from makeupdiff.encoder import BackboneConfig
from makeupdiff.model import MakeupTransferModel


@pytest.fixture(scope="session")
def face():
    return md.render_face(0, 64)


@pytest.fixture(scope="session")
def small_model():
    return MakeupTransferModel(DenoiserConfig(), BackboneConfig(), seed=0)


@pytest.fixture(scope="session")
def tiny_model():
    """Miniature double-precision model for gradient checks (8x8 latents)."""
    dcfg = DenoiserConfig(base_width=8, n_heads=2, text_dim=8, makeup_dim=8,
                          attention_levels=(0, 1))
    bcfg = BackboneConfig(patch_grid=2, embed_dim=8, n_layers=2, n_tap=2,
                          n_heads=2, image_size=16)
    model = MakeupTransferModel(dcfg, bcfg, seed=0).double()
    return model


@pytest.fixture(scope="session")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    return md.build_dataset(8, 64, 3, root)


def finite_difference_grads(loss_fn, params, n_coords=8, eps=1e-6, rng_seed=0):
    """Central-difference gradients on sampled coordinates of each parameter.

    Returns list of (analytic, numeric) pairs. ``loss_fn`` takes no args and
    must be deterministic.
    """
    rng = np.random.default_rng(rng_seed)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=False)
    pairs = []
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.view(-1)
            idxs = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
            for i in idxs:
                orig = flat[i].item()
                flat[i] = orig + eps
                lp = loss_fn().item()
                flat[i] = orig - eps
                lm = loss_fn().item()
                flat[i] = orig
                pairs.append((g.view(-1)[i].item(), (lp - lm) / (2 * eps)))
    return pairs


def assert_grads_close(pairs, rtol=1e-4, atol=1e-7):
    for a, n in pairs:
        assert abs(a - n) <= atol + rtol * max(abs(a), abs(n)), (a, n)
