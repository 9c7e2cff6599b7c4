"""Central finite-difference gradient checking.

Run models at float64 here; float32 rounding swamps the h=1e-5 differences.
The relative error denominator is floored at 1e-6 so dead units (true zero
gradient plus difference noise around 1e-11) do not register as failures.
"""

from dataclasses import dataclass, field

import numpy as np

H_DEFAULT = 1e-5
REL_FLOOR = 1e-6


@dataclass
class GradReport:
    per_param: dict = field(default_factory=dict)

    @property
    def max_rel_error(self):
        return max(self.per_param.values(), default=0.0)

    def passed(self, tol):
        return self.max_rel_error < tol

    def __str__(self):
        lines = [f"  {name}: {err:.3e}" for name, err in sorted(self.per_param.items())]
        lines.append(f"  max: {self.max_rel_error:.3e}")
        return "\n".join(lines)


def grad_check(fn, params, h=H_DEFAULT, sample=None, rng=None):
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` must be a deterministic closure over ``params`` (a name -> Tensor
    map) returning a scalar Tensor. ``sample`` caps the number of entries
    probed per parameter; by default every entry is probed.
    """
    params = dict(params)
    rng = rng or np.random.default_rng(0)

    for p in params.values():
        p.grad = None
    loss = fn()
    if loss.data.size != 1:
        raise ValueError("grad_check expects a scalar loss")
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    report = GradReport()
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if sample is not None and n > sample:
            idx = rng.choice(n, size=sample, replace=False)
        else:
            idx = np.arange(n)
        worst = 0.0
        for k in idx:
            orig = flat[k]
            flat[k] = orig + h
            up = float(fn().data)
            flat[k] = orig - h
            down = float(fn().data)
            flat[k] = orig
            numeric = (up - down) / (2 * h)
            a = float(analytic[name].reshape(-1)[k])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), REL_FLOOR)
            worst = max(worst, rel)
        report.per_param[name] = worst

    for name, p in params.items():
        p.grad = analytic[name]
    return report
