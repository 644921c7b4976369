"""Oracles shared by the unit and acceptance suites."""

import numpy as np

from spcde.neural_net import MlpParams, _forward_cache, grad, nll_loss

# measured values per acceptance criterion, shown in the terminal summary
ACCEPTANCE_NOTES: dict[int, list[str]] = {}


def note(criterion: int, text: str) -> None:
    ACCEPTANCE_NOTES.setdefault(criterion, []).append(text)


def _relu_masks(params, X):
    acts = _forward_cache(params, X)
    return [a > 0 for a in acts[1:-1]]


def gradient_check(params: MlpParams, X, y, basis, h=1e-5, floor=1e-6, max_coords=None, rng=None):
    """Max relative error of analytic vs central-difference gradients.

    Coordinates whose perturbation flips any ReLU activation in the batch are
    skipped: the loss is not differentiable across the kink, so the finite
    difference there measures the kink rather than the gradient.
    With ``max_coords``, a random subset of that many coordinates (drawn
    from ``rng``) is checked instead of all of them.
    Returns ``(max_rel_err, n_checked, n_skipped)``.
    """
    g = grad(params, (X, y), basis).arrays()
    base = _relu_masks(params, X)
    worst, checked, skipped = 0.0, 0, 0
    p = params.copy()
    arrays = p.arrays()
    coords = [(i, idx) for i, a in enumerate(arrays) for idx in np.ndindex(a.shape)]
    if max_coords is not None and max_coords < len(coords):
        pick = (rng or np.random.default_rng(0)).choice(len(coords), max_coords, replace=False)
        coords = [coords[j] for j in sorted(pick)]
    for i, idx in coords:
        a, ga = arrays[i], g[i]
        old = a[idx]
        a[idx] = old + h
        plus, m_plus = nll_loss(p, (X, y), basis), _relu_masks(p, X)
        a[idx] = old - h
        minus, m_minus = nll_loss(p, (X, y), basis), _relu_masks(p, X)
        a[idx] = old
        if any((mp != b).any() or (mm != b).any() for mp, mm, b in zip(m_plus, m_minus, base)):
            skipped += 1
            continue
        fd = (plus - minus) / (2 * h)
        err = abs(fd - ga[idx]) / max(abs(fd), abs(ga[idx]), floor)
        worst = max(worst, err)
        checked += 1
    return worst, checked, skipped


def random_net(rng, max_layers=6, max_width=32, K=None):
    from spcde.neural_net import init_params

    n_layers = int(rng.integers(1, max_layers + 1))  # weight layers
    sizes = [int(rng.integers(1, max_width + 1)) for _ in range(n_layers)]
    K = K or int(rng.integers(3, max_width + 1))
    params = init_params(sizes + [K], int(rng.integers(2**31)))
    # nonzero biases so activation patterns are not all tied at zero input
    for b in params.biases:
        b += rng.normal(0, 0.1, size=b.shape)
    return params
