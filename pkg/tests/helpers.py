"""Shared test oracles: finite differences and brute-force enumerations."""

from __future__ import annotations

import itertools
import math

import numpy as np

from prunesearch.autodiff import Tensor


def finite_difference(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of scalar-valued f at x.

    ``f`` takes a plain ndarray and returns a float; every element of ``x``
    is perturbed, so keep the instances small.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def check_gradient(build_loss, params: list[Tensor], rtol: float = 1e-5,
                   atol: float = 1e-7, step: float = 1e-6) -> None:
    """Assert autodiff gradients of build_loss() match finite differences.

    ``build_loss`` must be deterministic and re-runnable: it reads the current
    ``.data`` of each tensor in ``params`` and returns a scalar Tensor.
    """
    loss = build_loss()
    for p in params:
        p.zero_grad()
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    for p, ag in zip(params, analytic):
        def f(arr, p=p):
            saved = p.data
            p.data = arr
            try:
                return build_loss().item()
            finally:
                p.data = saved

        fd = finite_difference(f, p.data.copy(), step=step)
        np.testing.assert_allclose(ag, fd, rtol=rtol, atol=atol)


def subset_membership_probs(p: np.ndarray, k: int) -> np.ndarray:
    """P[index in I] under sequential draws without replacement proportional to p.

    Enumerates every ordered k-sequence of distinct indices with its exact
    probability (renormalizing after each draw).
    """
    p = np.asarray(p, dtype=np.float64)
    n = p.size
    member = np.zeros(n)
    for seq in itertools.permutations(range(n), k):
        prob = 1.0
        remaining = 1.0
        for idx in seq:
            prob *= p[idx] / remaining
            remaining -= p[idx]
        for idx in seq:
            member[idx] += prob
    return member


def cwi_reference(a: np.ndarray, c_target: int) -> np.ndarray:
    """Direct per-element evaluation of channel-wise adaptive average pooling."""
    n, c, h, w = a.shape
    out = np.empty((n, c_target, h, w), dtype=np.float64)
    for i in range(c_target):
        s = math.floor(i * c / c_target)
        e = math.ceil((i + 1) * c / c_target)
        out[:, i] = np.mean(a[:, s:e], axis=1)
    return out


def write_cifar_batches(directory, train_images, train_labels, test_images, test_labels):
    """Write uint8 [N,3,32,32] images into the standard binary batch files."""
    import os

    os.makedirs(directory, exist_ok=True)

    def encode(images, labels):
        n = len(labels)
        records = np.empty((n, 3073), dtype=np.uint8)
        records[:, 0] = labels
        records[:, 1:] = images.reshape(n, -1)
        return records.tobytes()

    per_file = int(np.ceil(len(train_labels) / 5))
    for i in range(5):
        chunk = slice(i * per_file, (i + 1) * per_file)
        with open(os.path.join(directory, f"data_batch_{i + 1}.bin"), "wb") as fh:
            fh.write(encode(train_images[chunk], train_labels[chunk]))
    with open(os.path.join(directory, "test_batch.bin"), "wb") as fh:
        fh.write(encode(test_images, test_labels))


def make_cifar_like(directory, n_train=600, n_test=200, seed=0, classes=10):
    """Synthetic 10-class 32x32 RGB data encoded as CIFAR binary batches."""
    from prunesearch.data import make_synthetic

    train = make_synthetic(classes, n_train, 32, seed=seed, channels=3, noise=0.35)
    test = make_synthetic(classes, n_test, 32, seed=seed + 1, channels=3, noise=0.35)

    def to_uint8(images):
        lo, hi = images.min(), images.max()
        return np.clip((images - lo) / (hi - lo) * 255.0, 0, 255).astype(np.uint8)

    write_cifar_batches(directory, to_uint8(train.images), train.labels,
                        to_uint8(test.images), test.labels)


def conv2d_reference(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Naive quadruple-loop cross-correlation."""
    n, cin, h, wid = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wid + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for j in range(cout):
            for oh in range(ho):
                for ow in range(wo):
                    patch = xp[b, :, oh * stride : oh * stride + kh, ow * stride : ow * stride + kw]
                    out[b, j, oh, ow] = np.sum(patch * w[j])
    return out
