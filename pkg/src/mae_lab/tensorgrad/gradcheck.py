import numpy as np

from .tensor import NumericOverflowError, backward, no_grad


def grad_check(fn, params, probe_count, h=1e-5, seed=0):
    """Worst relative error between the tape gradient and central differences.

    ``fn`` takes no arguments and returns a scalar Tensor built from
    ``params``. ``probe_count`` coordinates are drawn uniformly (with
    replacement across parameters, weighted by size). The relative error of
    each probe uses the denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if probe_count < 1:
        raise ValueError("probe_count must be >= 1")
    params = list(params)
    loss = fn()
    if not np.isfinite(loss.data).all():
        raise NumericOverflowError("grad_check", "function value")
    grads = backward(loss, params)

    rng = np.random.default_rng(seed)
    sizes = np.array([p.data.size for p in params], dtype=np.float64)
    which = rng.choice(len(params), size=probe_count, p=sizes / sizes.sum())
    worst = 0.0
    with no_grad():
        for pi in which:
            p = params[pi]
            j = int(rng.integers(p.data.size))
            flat = p.data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + h
            fp = float(fn().data)
            flat[j] = orig - h
            fm = float(fn().data)
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericOverflowError("grad_check", "perturbed function value")
            numeric = (fp - fm) / (2.0 * h)
            analytic = float(grads[p].reshape(-1)[j])
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
