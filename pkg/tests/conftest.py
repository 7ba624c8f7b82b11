import zlib

import numpy as np
import pytest

from duconet import autodiff as ad


def naive_conv2d(x, k, stride=1, padding=0):
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[b, ic, i * stride + di, j * stride + dj] * k[oc, ic, di, dj]
                    out[b, oc, i, j] = acc
    return out


def max_rel_error(analytic, numeric):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def grad_check(build, inputs, h=1e-5):
    """Compare backward() against central differences for a scalar-valued builder."""
    for t in inputs:
        t.requires_grad = True
    loss = build()
    ad.backward(loss)
    analytic = [t.grad.copy() for t in inputs]

    def f():
        with ad.no_grad():
            return build().item()

    numeric = ad.finite_difference_gradient(f, inputs, h)
    return max(max_rel_error(a, n) for a, n in zip(analytic, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def model_grad_check(mode, coords_per_tensor=None, seed=0):
    """Finite-difference check of L1 loss gradients for every parameter of a tiny model.

    With ``coords_per_tensor`` each tensor is checked at that many deterministic
    coordinates (all of them when the tensor is smaller). Returns {name: max_rel_error}.
    """
    from duconet import network as net

    cfg = net.DucoNetConfig.tiny(ablation_mode=mode, seed=seed)
    params = net.init_params(cfg)
    r = np.random.default_rng(seed + 7)
    rgb = r.uniform(0.1, 0.9, size=(2, 8, 8, 3))
    masks = np.zeros((2, 8, 8))
    masks[0, 2:6, 1:5] = 1.0
    masks[1, 0:4, 3:8] = 1.0
    batch = net.make_batch(rgb, masks)
    target = ad.Tensor(r.uniform(size=(2, 3, 8, 8)))
    names = sorted(params)
    tensors = [params[k] for k in names]

    def loss():
        return ad.l1_loss(net.duconet_forward(batch, params, cfg), target)

    for t in tensors:
        t.grad = None
    ad.backward(loss())
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]

    coords = None
    if coords_per_tensor is not None:
        coords = []
        for k, t in zip(names, tensors):
            size = int(np.prod(t.shape))
            if size <= coords_per_tensor:
                coords.append(np.arange(size))
            else:
                pick = np.random.default_rng(zlib.crc32(k.encode())).choice(size, coords_per_tensor, replace=False)
                coords.append(np.sort(pick))

    def f():
        with ad.no_grad():
            return loss().item()

    numeric = ad.finite_difference_gradient(f, tensors, 1e-5, coords)
    errors = {}
    for i, k in enumerate(names):
        a = analytic[i].reshape(-1) if coords is None else analytic[i].reshape(-1)[coords[i]]
        errors[k] = max_rel_error(a, np.asarray(numeric[i]).reshape(-1))
    return errors


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def accept(request, capsys):
    """Record and print one acceptance line; returns ``passed`` for asserting."""

    def record(name, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        request.config.stash.setdefault(_ACCEPTANCE, []).append(line)
        with capsys.disabled():
            print(f"\n    {line}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
