"""Shared oracles for the test suite: finite-difference gradient checks and
dependency perturbation probes."""
import numpy as np
import torch


def flat_params(modules):
    out = []
    for m in modules:
        out.extend(p for p in m.parameters() if p.requires_grad)
    return out


def autograd_gradient(loss_fn, params):
    """Gradient of loss_fn() w.r.t. params as a list of detached tensors."""
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    return [
        p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        for p in params
    ]


def fd_directional(loss_fn, params, direction, h=1e-4):
    """Central finite difference of loss_fn along a parameter-space direction."""
    with torch.no_grad():
        for p, d in zip(params, direction):
            p.add_(h * d)
        up = float(loss_fn().detach())
        for p, d in zip(params, direction):
            p.sub_(2 * h * d)
        down = float(loss_fn().detach())
        for p, d in zip(params, direction):
            p.add_(h * d)
    return (up - down) / (2 * h)


def gradient_check(loss_fn, params, rng, n_coords=20, h=1e-4, rel_tol=1e-3):
    """Compare autograd and central differences; returns the worst rel error.

    Checks one random direction through the whole parameter space (catches
    wrongly-zero gradients) plus n_coords random single coordinates. loss_fn
    must be deterministic (re-seed any sampling inside it per call).
    """
    grads = autograd_gradient(loss_fn, params)

    direction = [torch.from_numpy(rng.standard_normal(tuple(p.shape))) for p in params]
    norm = torch.sqrt(sum((d ** 2).sum() for d in direction))
    direction = [d / norm for d in direction]
    analytic = float(sum((g * d).sum() for g, d in zip(grads, direction)))
    numeric = fd_directional(loss_fn, params, direction, h)
    worst = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-10)

    sizes = np.array([p.numel() for p in params])
    for _ in range(n_coords):
        pi = int(rng.choice(len(params), p=sizes / sizes.sum()))
        ci = int(rng.integers(sizes[pi]))
        unit = [torch.zeros_like(p) for p in params]
        unit[pi].view(-1)[ci] = 1.0
        a = float(grads[pi].view(-1)[ci])
        n = fd_directional(loss_fn, params, unit, h)
        denom = max(abs(a), abs(n))
        if denom < 1e-7:
            continue  # both effectively zero at fd resolution
        worst = max(worst, abs(n - a) / denom)
    assert worst <= rel_tol, f"gradient mismatch: worst relative error {worst:.3e}"
    return worst


def probe_pair(base: np.ndarray, t: int, rng, scale=0.5):
    """Copy of base with one frame (column t) perturbed."""
    out = base.copy()
    out[:, t] = out[:, t] + scale * rng.standard_normal(out.shape[0])
    return out


def changed_frames(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Indices of columns where the two (D, T) arrays differ at all."""
    return np.nonzero(np.any(a != b, axis=0))[0]
