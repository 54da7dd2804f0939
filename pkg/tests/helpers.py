"""Shared test utilities: finite-difference gradient checking and oracles."""

import numpy as np

from studyformer.tensor import Tensor


def rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def fd_grad(f, arrays, which, step=1e-5, sample=None, rng=None):
    """Central finite differences of scalar f(*arrays) w.r.t. arrays[which].

    Returns (indices, grads): flat indices checked and the FD derivative at
    each. With sample=None every element is checked.
    """
    base = [a.copy() for a in arrays]
    flat = base[which].reshape(-1)
    n = flat.size
    if sample is None or sample >= n:
        indices = np.arange(n)
    else:
        indices = rng.choice(n, size=sample, replace=False)
    grads = np.empty(len(indices))
    for j, idx in enumerate(indices):
        orig = flat[idx]
        flat[idx] = orig + step
        fp = f(*base)
        flat[idx] = orig - step
        fm = f(*base)
        flat[idx] = orig
        grads[j] = (fp - fm) / (2.0 * step)
    return indices, grads


def check_grads(build_loss, arrays, step=1e-5, rtol=1e-4, sample=None, seed=0):
    """Assert analytic gradients match central finite differences.

    build_loss(*tensors) -> scalar Tensor. Every array becomes a requires-grad
    leaf. Returns the worst relative error seen.
    """
    rng = np.random.default_rng(seed)
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build_loss(*tensors)
    loss.backward()

    def f(*arrs):
        consts = [Tensor(a) for a in arrs]
        return build_loss(*consts).item()

    worst = 0.0
    for i, t in enumerate(tensors):
        assert t.grad is not None, f"no gradient on input {i}"
        indices, fd = fd_grad(f, arrays, i, step=step, sample=sample, rng=rng)
        analytic = t.grad.reshape(-1)[indices]
        err = rel_err(analytic, fd).max()
        worst = max(worst, float(err))
        assert err < rtol, f"input {i}: max rel err {err:.3e} >= {rtol}"
    return worst


def matmul_oracle(a, b):
    """Triple-nested-loop matrix product."""
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def conv2d_oracle(x, w, bias=None, stride=1, padding=0):
    """Brute-force nested-loop cross-correlation."""
    b, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((b, cout, out_h, out_w))
    for bi in range(b):
        for co in range(cout):
            for oh in range(out_h):
                for ow in range(out_w):
                    s = 0.0
                    for ci in range(cin):
                        for r in range(kh):
                            for c in range(kw):
                                s += xp[bi, ci, oh * stride + r, ow * stride + c] * w[co, ci, r, c]
                    out[bi, co, oh, ow] = s + (bias[co] if bias is not None else 0.0)
    return out


def auc_pair_count_oracle(scores, labels):
    """O(P*N) pair enumeration: wins + half-credit ties over all pos/neg pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (len(pos) * len(neg))
