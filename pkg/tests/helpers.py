"""Shared test utilities: central finite-difference gradient oracles."""

import numpy as np
import torch


def fd_gradient(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Full elementwise central-difference gradient of scalar f() w.r.t. x.

    f must re-read x on every call; x is perturbed in place and restored.
    """
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = float(f())
            flat[i] = orig - eps
            fm = float(f())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    return grad


def assert_grad_close(analytic: torch.Tensor, numeric: torch.Tensor,
                      rtol: float = 1e-4, atol: float = 1e-7, label: str = ""):
    a = analytic.detach().reshape(-1)
    n = numeric.reshape(-1)
    diff = (a - n).abs()
    bound = atol + rtol * torch.maximum(a.abs(), n.abs())
    bad = diff > bound
    assert not bool(bad.any()), (
        f"{label}: {int(bad.sum())}/{a.numel()} gradient entries off; "
        f"worst diff {float(diff.max()):.3e}"
    )


def check_param_gradients(f, module: torch.nn.Module, rng: np.random.Generator,
                          eps: float = 1e-6, rtol: float = 1e-4,
                          atol: float = 1e-7, coords_per_tensor: int = 3):
    """Check autograd against central differences for every parameter tensor.

    Per tensor: a random-direction directional derivative plus a few random
    coordinates checked elementwise.
    """
    module.zero_grad()
    loss = f()
    loss.backward()
    for name, p in module.named_parameters():
        grad = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        # directional derivative along a random unit direction
        u = torch.from_numpy(rng.standard_normal(tuple(p.shape))).to(p.dtype)
        u /= u.norm()
        with torch.no_grad():
            p.add_(eps * u)
            fp = float(f())
            p.sub_(2 * eps * u)
            fm = float(f())
            p.add_(eps * u)
        numeric = (fp - fm) / (2 * eps)
        analytic = float((grad * u).sum())
        assert abs(analytic - numeric) <= atol + rtol * max(abs(analytic), abs(numeric)), (
            f"{name}: directional derivative {analytic:.6e} vs FD {numeric:.6e}"
        )
        # a few random coordinates
        flat = p.reshape(-1)
        gflat = grad.reshape(-1)
        idx = rng.choice(flat.numel(), size=min(coords_per_tensor, flat.numel()),
                         replace=False)
        with torch.no_grad():
            for i in idx:
                i = int(i)
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = float(f())
                flat[i] = orig - eps
                fm = float(f())
                flat[i] = orig
                numeric = (fp - fm) / (2 * eps)
                analytic = float(gflat[i])
                assert abs(analytic - numeric) <= atol + rtol * max(abs(analytic), abs(numeric)), (
                    f"{name}[{i}]: gradient {analytic:.6e} vs FD {numeric:.6e}"
                )
