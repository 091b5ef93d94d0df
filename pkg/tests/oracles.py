"""Independent reference computations used by several test modules."""

import torch

from simdis.models import ViewBundle


def central_fd(fn, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Gradient of scalar ``fn`` at ``x`` by central differences, one coordinate at a time."""
    x = x.detach().clone()
    flat = x.view(-1)
    grad = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            hi = float(fn(x))
            flat[i] = orig - h
            lo = float(fn(x))
            flat[i] = orig
            grad[i] = (hi - lo) / (2 * h)
    return grad.view_as(x)


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    return ((a - b).norm() / max(b.norm().item(), a.norm().item(), 1e-12)).item()


def random_bundle(g, batch=4, dim=8, distill=False, grad=False, dtype=torch.float64) -> ViewBundle:
    def t():
        return torch.randn(batch, dim, generator=g, dtype=dtype).requires_grad_(grad)

    return ViewBundle(
        y={"v": t(), "vp": t()},
        z={"v": t(), "vp": t()},
        pred={"v": t(), "vp": t()},
        target_z={"v": t().detach(), "vp": t().detach()},
        distill={"v": t(), "vp": t()} if distill else {},
    )
