"""Fast oracle suites run by ``msalab selftest``."""
from __future__ import annotations

import numpy as np

from . import features, fourier, hessian, oracles
from .io.data import gen_synthetic
from .models import build_model, tiny_resnet, tiny_vit
from .train.losses import nll, regularized_nll


def tiny_eig_model(seed: int = 0):
    """A transformer with under 300 parameters for dense-Hessian comparisons."""
    spec = tiny_vit(depth=1, dim=4, heads=1, patch=4, mlp_ratio=1.0, classes=3,
                    image_size=8, in_channels=1)
    return build_model(spec, seed)


def train_closure(model, x, y, weight_decay: float = 5e-2):
    """Regularized NLL with batch statistics (the loss seen during training)."""
    def closure(P):
        return regularized_nll(model, x, y, weight_decay, P, train=True)
    return closure


def check_gradients(n_coords: int = 30):
    results = []
    data = gen_synthetic("shapes", 4, 8, 3, seed=0, channels=1)
    for name, spec in (("resnet", tiny_resnet(depths=(1, 1), widths=(4, 8), classes=3, image_size=8,
                                              in_channels=1)),
                       ("vit", tiny_vit(depth=1, dim=8, heads=2, patch=2, classes=3, image_size=8,
                                        in_channels=1))):
        model = build_model(spec, 0)
        cl = train_closure(model, data.images, data.labels)
        results.append(oracles.fd_gradient_check(cl, model.params, n_coords, seed=1,
                                                 name=f"fd gradient ({name})"))
        results.append(oracles.fd_hvp_check(cl, model.params, 1, seed=2, name=f"fd hvp ({name})"))
    return results


def check_eigs(k: int = 5):
    model = tiny_eig_model(0)
    data = gen_synthetic("shapes", 8, 8, 3, seed=0, channels=1)
    cl = hessian.loss_closure(model, data.images, data.labels, 5e-2)
    dense = oracles.top_k_by_magnitude(oracles.fd_dense_hessian(cl, model.params), k)
    pairs = hessian.top_k_eigs(cl, model.params, k, max_iters=1000, tol=1e-7, seed=0)
    got = np.array([p.value for p in pairs])
    err = float(np.max(np.abs(got - dense) / np.abs(dense)))
    return oracles.CheckResult("power iteration vs dense Hessian", err, 1e-3, k)


def check_fft():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((16, 16))
    X = fourier.fft2(x, centered=False)
    err = float(np.max(np.abs(X - oracles_dft(x))) / np.max(np.abs(X)))
    pars = abs(np.sum(x ** 2) - np.sum(np.abs(X) ** 2) / x.size) / np.sum(x ** 2)
    return [oracles.CheckResult("fft2 vs naive DFT", err, 1e-9, 1),
            oracles.CheckResult("Parseval", float(pars), 1e-9, 1)]


def oracles_dft(x):
    return fourier.naive_dft2(x)


def check_cka():
    rng = np.random.default_rng(0)
    X, Y = rng.standard_normal((32, 10)), rng.standard_normal((32, 7))
    err = abs(features.linear_cka(X, Y) - oracles.naive_hsic_cka(X, Y))
    return oracles.CheckResult("linear CKA vs naive HSIC", err, 1e-9, 1)


def run_selftest(emit=print) -> bool:
    results = []
    results += check_gradients()
    results.append(check_eigs())
    results += check_fft()
    results.append(check_cka())
    for r in results:
        emit(r.line())
    ok = all(r.passed for r in results)
    emit(f"selftest: {sum(r.passed for r in results)}/{len(results)} suites passed")
    return ok
