"""Central finite differences for parameter groups of a torch module."""
import torch

STEP = 1e-4


def numeric_grad(fn, params, step=STEP):
    """d fn / d p for every element of every tensor in ``params`` (fn returns a scalar)."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(fn())
                flat[i] = orig - step
                down = float(fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            grads.append(g)
    return grads


def analytic_grad(fn, params):
    for p in params:
        p.grad = None
    loss = fn()
    return list(torch.autograd.grad(loss, params, allow_unused=True))


def relative_error(a, b):
    a = torch.cat([t.reshape(-1) for t in a])
    b = torch.cat([t.reshape(-1) for t in b])
    denom = max(a.norm().item(), b.norm().item(), 1e-10)
    return (a - b).norm().item() / denom
