"""Small builders shared by the test modules."""

from __future__ import annotations

import copy

import numpy as np
import torch

from clipdg.encoders import BundleDims, build_toy_bundle

SMALL_DIMS = BundleDims(d_i=12, c_f=6, d_t=8, context_length=16, channels=1, image_side=4)


def small_bundle(seed=0, arch="attention", dtype="float64", dims=SMALL_DIMS):
    return build_toy_bundle(dims, seed=seed, text_arch=arch, dtype=dtype)


def raw_config(strategy="erm", n_domains=4, steps=20, eval_interval=10, seeds=(0,), side=8, spc=10,
               shift=0.5, b=4, lr=1e-3, arch="bag", augment=False, **extra):
    doc = {
        "experiment": {"strategy": strategy, "seeds": list(seeds), "steps": steps, "eval_interval": eval_interval},
        "data": {"synth": {"n_domains": n_domains, "n_classes": 5, "samples_per_class": spc, "image_side": side,
                           "domain_shift_strength": shift, "noise_sigma": 0.3, "seed": 0},
                 "augment": augment},
        "encoder": {"kind": "toy", "d_i": 32, "c_f": 16, "d_t": 16, "context_length": 16, "seed": 0,
                    "text_arch": arch},
        "strategy": {"b": b, "lr": lr},
    }
    for path, value in extra.items():
        node = doc
        *parents, leaf = path.split("__")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return copy.deepcopy(doc)


def random_images(n, dims=SMALL_DIMS, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, dims.channels, dims.image_side, dims.image_side)).astype(dtype)


def as_tensor(x, dtype=torch.float64):
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def finite_difference_check(loss_fn, params, n_coords=50, h=1e-5, seed=0, floor=1e-6):
    """Largest relative error between autograd and central differences.

    ``params`` are float64 tensors with ``requires_grad``; ``n_coords``
    coordinates are drawn across them in proportion to their size, with at
    least one from each.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [p.grad.detach().clone() for p in params]
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for p in params])
    picks = list(range(len(params)))
    picks += list(rng.choice(len(params), size=max(0, n_coords - len(params)), p=sizes / sizes.sum()))
    worst = 0.0
    with torch.no_grad():
        for which in picks:
            p = params[which]
            flat = p.view(-1)
            i = int(rng.integers(p.numel()))
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(loss_fn())
            flat[i] = orig - h
            down = float(loss_fn())
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            a = analytic[which].view(-1)[i].item()
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
    return worst


def synth_arrays(n_domains=3, spc=40, side=8, shift=0.3, noise=0.3, seed=0):
    from clipdg.data import SynthSpec, synth_domains

    spec = SynthSpec(n_domains=n_domains, n_classes=5, samples_per_class=spc, image_side=side,
                     domain_shift_strength=shift, noise_sigma=noise)
    return synth_domains(spec, seed=seed)


def toy_encoder(arch="bag", dtype="float64", **dims):
    """Toy encoder spec; image shape is filled in by the estimator from the data."""
    spec = {"kind": "toy", "d_i": 32, "c_f": 16, "d_t": 16, "context_length": 16, "seed": 0,
            "text_arch": arch, "dtype": dtype}
    spec.update(dims)
    return spec
