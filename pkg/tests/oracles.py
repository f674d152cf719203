"""Independent reference computations used by the tests."""

from __future__ import annotations

import numpy as np
import torch


def directional_gradcheck(loss_fn, modules, n_dirs=50, rel_step=1e-3, seed=0, floor=1e-6,
                          fd_dtype=torch.float64):
    """Compare autograd directional derivatives against central differences.

    ``loss_fn(modules, dtype)`` must return the scalar loss computed with the
    given modules and with its inputs cast to ``dtype``. The analytic
    gradient comes from the float32 modules; central differences run on a
    ``fd_dtype`` copy so that rounding in the difference quotient stays far
    below the tolerance. Each direction is a unit-norm Gaussian vector over
    all parameters and the step is ``rel_step`` times the RMS parameter
    magnitude. Returns the relative error per direction.
    """
    import copy

    params = [p for m in modules for p in m.parameters()]
    for p in params:
        p.grad = None
    loss_fn(modules, torch.float32).backward()
    grads = [torch.zeros_like(p, dtype=torch.float64) if p.grad is None else p.grad.detach().double().clone()
             for p in params]
    fd_modules = [copy.deepcopy(m).to(fd_dtype) for m in modules]
    fd_params = [p for m in fd_modules for p in m.parameters()]
    g = torch.Generator().manual_seed(seed)
    flat = torch.cat([p.detach().double().flatten() for p in params])
    h = rel_step * float(flat.pow(2).mean().sqrt())
    errs = []
    with torch.no_grad():
        for _ in range(n_dirs):
            dirs = [torch.randn(p.shape, generator=g, dtype=torch.float64) for p in params]
            norm = torch.sqrt(sum((d**2).sum() for d in dirs))
            dirs = [d / norm for d in dirs]
            analytic = float(sum((gr * d).sum() for gr, d in zip(grads, dirs)))
            for p, d in zip(fd_params, dirs):
                p.add_(h * d.to(fd_dtype))
            f_plus = float(loss_fn(fd_modules, fd_dtype))
            for p, d in zip(fd_params, dirs):
                p.sub_(2 * h * d.to(fd_dtype))
            f_minus = float(loss_fn(fd_modules, fd_dtype))
            for p, d in zip(fd_params, dirs):
                p.add_(h * d.to(fd_dtype))
            numeric = (f_plus - f_minus) / (2 * h)
            errs.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))
    return np.array(errs)


def ridge_gradient_descent(X, Z, alpha, iters=200000, tol=1e-13):
    """Minimize ||Z - (XW + b)||^2 + alpha ||W||^2 by full-batch gradient descent (float64).

    Step size is 1/L with L the Lipschitz constant of the gradient of the
    objective in (W, b).
    """
    X = np.asarray(X, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    N, V = X.shape
    A = np.hstack([X, np.ones((N, 1))])
    L = 2 * (np.linalg.eigvalsh(A.T @ A).max() + alpha)
    P = np.zeros((V + 1, Z.shape[1]))
    pen = np.ones((V + 1, 1))
    pen[-1] = 0.0
    for _ in range(iters):
        grad = 2 * A.T @ (A @ P - Z) + 2 * alpha * pen * P
        step = grad / L
        P -= step
        if np.abs(step).max() < tol:
            break
    return P[:-1], P[-1]


def bilinear_by_hand(img, out_h, out_w):
    """Scalar-loop bilinear resize with half-pixel centers."""
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape[:2]
    out = np.zeros((out_h, out_w) + img.shape[2:])
    for i in range(out_h):
        sy = min(max((i + 0.5) * H / out_h - 0.5, 0.0), H - 1)
        y0 = int(np.floor(sy)); y1 = min(y0 + 1, H - 1); fy = sy - y0
        for j in range(out_w):
            sx = min(max((j + 0.5) * W / out_w - 0.5, 0.0), W - 1)
            x0 = int(np.floor(sx)); x1 = min(x0 + 1, W - 1); fx = sx - x0
            out[i, j] = ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
                         + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))
    return out
