"""Brute-force reference implementations used as independent test oracles.

They share no code with the package: loops over Python floats, scipy's
general matrix square root, and a replay of the random draws.
"""


import numpy as np
import scipy.linalg
import torch


def _flat(t):
    return [float(v) for v in torch.as_tensor(t).detach().double().reshape(-1)]


def l1(x, y):
    a, b = _flat(x), _flat(y)
    return sum(abs(p - q) for p, q in zip(a, b)) / len(a)


def mse(x, y):
    a, b = _flat(x), _flat(y)
    return sum((p - q) ** 2 for p, q in zip(a, b)) / len(a)


def perceptual(feat_net, x, y):
    """Extract features of each input separately, then average per-layer MSEs."""
    with torch.no_grad():
        fa, fb = feat_net(x), feat_net(y)
    return sum(mse(a, b) for a, b in zip(fa, fb)) / len(fa)


def hinge_generator(fake_logits):
    f = _flat(fake_logits)
    return -sum(f) / len(f)


def hinge_discriminator(real_logits, fake_logits):
    r, f = _flat(real_logits), _flat(fake_logits)
    return sum(max(0.0, 1 - v) for v in r) / len(r) + sum(max(0.0, 1 + v) for v in f) / len(f)


def frechet_sqrtm(feats_a, feats_b, eps=1e-6):
    """Frechet distance with scipy's Schur-based square root of the (non-symmetric) product."""
    fa, fb = np.asarray(feats_a, np.float64), np.asarray(feats_b, np.float64)
    mu_a, mu_b = fa.mean(0), fb.mean(0)
    m = fa.shape[1]
    ca = (fa - mu_a).T @ (fa - mu_a) / (len(fa) - 1) + eps * np.eye(m)
    cb = (fb - mu_b).T @ (fb - mu_b) / (len(fb) - 1) + eps * np.eye(m)
    root = scipy.linalg.sqrtm(ca @ cb)
    return float(((mu_a - mu_b) ** 2).sum() + np.trace(ca) + np.trace(cb) - 2 * np.trace(root).real)


def frechet_eigvals(feats_a, feats_b, eps=1e-6):
    """Same quantity via the eigenvalues of C_a C_b (trace of the root is the sum of their square roots)."""
    fa, fb = np.asarray(feats_a, np.float64), np.asarray(feats_b, np.float64)
    m = fa.shape[1]
    ca = np.cov(fa, rowvar=False) + eps * np.eye(m)
    cb = np.cov(fb, rowvar=False) + eps * np.eye(m)
    ev = np.linalg.eigvals(ca @ cb).real.clip(0)
    diff = fa.mean(0) - fb.mean(0)
    return float(diff @ diff + np.trace(ca) + np.trace(cb) - 2 * np.sqrt(ev).sum())


def flow_matching(model, z0, cond_ids, seed, null_prob, null_id):
    """Replay the draws (noise, timesteps, dropout) and compute the MSE element by element."""
    g = torch.Generator().manual_seed(seed)
    z1 = torch.randn(z0.shape, generator=g, dtype=z0.dtype)
    t = torch.rand(z0.shape[0], generator=g, dtype=z0.dtype)
    drop = torch.rand(z0.shape[0], generator=g) < null_prob
    cond = torch.tensor([null_id if d else int(c) for d, c in zip(drop.tolist(), cond_ids.tolist())])
    zt = torch.empty_like(z0)
    for b in range(z0.shape[0]):
        tb = float(t[b])
        zt[b] = torch.tensor([(1 - tb) * p + tb * q for p, q in zip(_flat(z0[b]), _flat(z1[b]))],
                             dtype=z0.dtype).reshape(z0.shape[1:])
    with torch.no_grad():
        v = model(zt, t, cond)
    target = [q - p for p, q in zip(_flat(z0), _flat(z1))]
    pred = _flat(v)
    return sum((a - b) ** 2 for a, b in zip(pred, target)) / len(pred)


def central_difference_check(loss_fn, params, eps=1e-6, rtol=1e-3, max_coords=64, seed=0, atol=1e-7):
    """Compare autograd against central differences on up to ``max_coords`` coordinates (all if None).

    Returns the worst relative error observed.
    """
    analytic = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    coords = [(i, k) for i, p in enumerate(params) for k in range(p.numel())]
    rng = np.random.default_rng(seed)
    if max_coords is not None and len(coords) > max_coords:
        coords = [coords[j] for j in rng.choice(len(coords), max_coords, replace=False)]
    worst = 0.0
    for i, k in coords:
        p = params[i]
        pos = tuple(int(v) for v in np.unravel_index(k, tuple(p.shape)))
        with torch.no_grad():
            old = p[pos].item()
            p[pos] = old + eps
            up = loss_fn().item()
            p[pos] = old - eps
            down = loss_fn().item()
            p[pos] = old
        fd = (up - down) / (2 * eps)
        g = 0.0 if analytic[i] is None else analytic[i][pos].item()
        err = abs(fd - g) / max(abs(fd), abs(g), atol / rtol)
        worst = max(worst, err)
    return worst
