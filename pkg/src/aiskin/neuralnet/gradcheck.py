"""Finite-difference verification of the analytic gradients."""

from __future__ import annotations

import numpy as np

from . import layers as L
from .model import Model


def _routing(model: Model, x: np.ndarray) -> list:
    """Max-pool argmax indices and ReLU masks: the non-smooth choices of a pass."""
    _, caches = model._run(x, training=False, keep_cache=True)
    out = []
    for spec, cache in zip(model.config.layers, caches):
        if spec.kind == L.MAXPOOL2D:
            out.append(cache[1])
        elif spec.kind == L.RELU:
            out.append(cache)
    return out


def _same_routing(a: list, b: list) -> bool:
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def gradient_check_report(model: Model, x: np.ndarray, y: np.ndarray, epsilon: float = 1e-3,
                          n_weights: int = 200, seed: int = 0) -> dict:
    """Per layer kind: max relative error, weights compared, weights skipped.

    Runs on a float64 copy with dropout disabled. A weight is skipped when
    nudging it by +/-epsilon changes a pooling or ReLU routing decision, since
    the loss is not differentiable across that switch.
    """
    probe = model.copy(dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _, grads = probe.loss_and_gradients(x, y, training=False)
    base_routing = _routing(probe, x)
    rng = np.random.default_rng(seed)

    by_kind: dict = {}
    for i, spec in enumerate(probe.config.layers):
        if probe.params[i] is None:
            continue
        for t, tensor in enumerate(probe.params[i]):
            for flat in range(tensor.size):
                by_kind.setdefault(spec.kind, []).append((i, t, flat))

    report = {}
    for kind, candidates in by_kind.items():
        order = rng.permutation(len(candidates))
        worst, checked, skipped = 0.0, 0, 0
        for k in order:
            if checked >= n_weights:
                break
            i, t, flat = candidates[k]
            tensor = probe.params[i][t]
            view = tensor.reshape(-1)
            original = view[flat]
            view[flat] = original + epsilon
            plus_loss, _ = probe.loss_and_gradients(x, y, training=False)
            plus_routing = _routing(probe, x)
            view[flat] = original - epsilon
            minus_loss, _ = probe.loss_and_gradients(x, y, training=False)
            minus_routing = _routing(probe, x)
            view[flat] = original
            if not (_same_routing(base_routing, plus_routing)
                    and _same_routing(base_routing, minus_routing)):
                skipped += 1
                continue
            numeric = (plus_loss - minus_loss) / (2 * epsilon)
            analytic = float(grads[i][t].reshape(-1)[flat])
            err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-8)
            worst = max(worst, err)
            checked += 1
        report[kind] = {"max_relative_error": worst, "checked": checked, "skipped": skipped}
    return report


def gradient_check(model: Model, x: np.ndarray, y: np.ndarray, epsilon: float = 1e-3,
                   n_weights: int = 200, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients."""
    report = gradient_check_report(model, x, y, epsilon, n_weights, seed)
    return max((r["max_relative_error"] for r in report.values()), default=0.0)
