"""Central finite-difference oracles for verifying analytic gradients.

`check_gradients` compares backward-pass gradients against central
differences computed by re-running the forward function.  A failing
coordinate is probed once more with a much smaller step before it counts as
a failure: ReLU-style kinks produce one-off finite-difference artefacts that
vanish as the step shrinks, while a genuinely wrong gradient does not.

`run_suite` bundles per-operation checks with a whole-graph check of the
recognition model at a tiny configuration; the `gradcheck` CLI command and
the acceptance tests both run it.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .rng import Rng

__all__ = ["numeric_gradient", "relative_error", "check_gradients", "run_suite"]


def relative_error(a: float, b: float) -> float:
    """|a - b| scaled by the larger magnitude; absolute below 1e-8."""
    denom = max(abs(a), abs(b))
    if denom < 1e-8:
        return abs(a - b)
    return abs(a - b) / denom


def numeric_gradient(f, t: ad.Tensor, index, eps: float = 1e-5) -> float:
    """Central difference of scalar f() w.r.t. one coordinate of ``t``."""
    flat = t.data.reshape(-1)
    orig = flat[index]
    flat[index] = orig + eps
    hi = f()
    flat[index] = orig - eps
    lo = f()
    flat[index] = orig
    return (hi - lo) / (2.0 * eps)


def check_gradients(f, params, eps: float = 1e-5, tol: float = 1e-4,
                    max_coords: int | None = None, rng: Rng | None = None):
    """Verify analytic gradients of scalar ``f()`` for every tensor in ``params``.

    ``f`` must rebuild its graph from the tensors' current data on each call
    and return a float.  When ``max_coords`` is given, that many coordinates
    per tensor are sampled (with ``rng``) instead of sweeping all of them.
    Returns the worst relative error; raises AssertionError on failure.
    """

    def value():
        return float(f().data)

    for p in params:
        p.zero_grad()
    loss = f()
    ad.backward(loss)

    worst = 0.0
    for pi, p in enumerate(params):
        assert p.grad is not None, f"parameter {pi} received no gradient"
        n = p.size
        if max_coords is None or n <= max_coords:
            coords = range(n)
        else:
            gen = rng or Rng(0)
            coords = sorted({gen.integers(0, n) for _ in range(max_coords)})
        gflat = p.grad.reshape(-1)
        for idx in coords:
            numeric = numeric_gradient(value, p, idx, eps)
            err = relative_error(float(gflat[idx]), numeric)
            if err >= tol:
                # Kink guard: a finite-difference artefact shrinks with the
                # step, a wrong backward rule does not.
                numeric = numeric_gradient(value, p, idx, eps / 16.0)
                err = relative_error(float(gflat[idx]), numeric)
            worst = max(worst, err)
            assert err < tol, (
                f"gradient mismatch at parameter {pi} coord {idx}: "
                f"analytic {gflat[idx]!r} vs numeric {numeric!r} (rel err {err:.3e})"
            )
    return worst


# ---------------------------------------------------------------------------
# per-operation checks
# ---------------------------------------------------------------------------

def _leaf(rng: Rng, shape, lo=-1.0, hi=1.0) -> ad.Tensor:
    return ad.Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _check_matmul(seed: int) -> float:
    rng = Rng(seed)
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 2))
    return check_gradients(lambda: ad.sum_all(ad.matmul(a, b)), [a, b], eps=1e-5, tol=1e-4)


def _check_conv2d(seed: int) -> float:
    rng = Rng(seed)
    x = _leaf(rng, (2, 5, 5))
    k = _leaf(rng, (3, 2, 3, 3))
    w = ad.Tensor(rng.normal(1.0, (3, 3, 3)))
    return check_gradients(
        lambda: ad.sum_all(ad.mul(ad.conv2d(x, k, stride=2, padding=1), w)),
        [x, k], eps=1e-5, tol=1e-4)


def _check_pools(seed: int) -> float:
    rng = Rng(seed)
    x = _leaf(rng, (2, 4, 6))
    w = ad.Tensor(rng.normal(1.0, (2, 2, 3)))
    e1 = check_gradients(lambda: ad.sum_all(ad.mul(ad.pool_avg(x, 2), w)), [x])
    y = _leaf(rng, (2, 5, 5))
    w2 = ad.Tensor(rng.normal(1.0, (2, 2, 2)))
    e2 = check_gradients(lambda: ad.sum_all(ad.mul(ad.pool_max(y, 3, 2), w2)), [y])
    return max(e1, e2)


def _check_elementwise(seed: int) -> float:
    rng = Rng(seed)
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    s = _leaf(rng, (1,))
    w = ad.Tensor(rng.normal(1.0, (3, 4)))

    def loss():
        u = ad.add(ad.mul(a, b), ad.scale(ad.sub(a, b), 0.7))
        v = ad.add(ad.relu(u), ad.sigmoid(ad.scalar_mul(s, a)))
        return ad.sum_all(ad.mul(v, w))

    return check_gradients(loss, [a, b, s], eps=1e-5, tol=1e-4)


def _check_softmax(seed: int) -> float:
    rng = Rng(seed)
    x = _leaf(rng, (2, 5), -2.0, 2.0)
    v = ad.Tensor(rng.normal(1.0, (2, 5)))
    return check_gradients(lambda: ad.sum_all(ad.mul(ad.softmax(x, axis=-1), v)), [x])


def _check_layernorm(seed: int) -> float:
    rng = Rng(seed)
    x = _leaf(rng, (3, 8), -2.0, 2.0)
    gamma = _leaf(rng, (8,), 0.5, 1.5)
    beta = _leaf(rng, (8,), -0.5, 0.5)
    w = ad.Tensor(rng.normal(1.0, (3, 8)))
    return check_gradients(
        lambda: ad.sum_all(ad.mul(ad.layernorm(x, gamma, beta, eps=1e-5), w)),
        [x, gamma, beta], eps=1e-5, tol=1e-4)


def _check_dropout(seed: int) -> float:
    rng = Rng(seed)
    x = _leaf(rng, (4, 6))
    w = ad.Tensor(rng.normal(1.0, (4, 6)))

    def loss():
        # Fresh stream with a fixed seed: same mask on every re-evaluation.
        return ad.sum_all(ad.mul(ad.dropout(x, 0.4, True, Rng(seed + 1)), w))

    return check_gradients(loss, [x], eps=1e-5, tol=1e-4)


def _check_cross_entropy(seed: int) -> float:
    rng = Rng(seed)
    x = _leaf(rng, (6,), -1.5, 1.5)
    return check_gradients(lambda: ad.cross_entropy(ad.softmax(x), 2), [x],
                           eps=1e-5, tol=1e-4)


def _check_detach(seed: int) -> float:
    rng = Rng(seed)
    x = _leaf(rng, (3, 3))
    w = _leaf(rng, (3, 3))

    def loss():
        return ad.sum_all(ad.mul(ad.detach(x), w))

    err = check_gradients(loss, [w], eps=1e-5, tol=1e-4)
    x.zero_grad()
    w.zero_grad()
    ad.backward(loss())
    assert x.grad is None, "detach leaked gradient upstream"
    return err


def _check_structural(seed: int) -> float:
    rng = Rng(seed)
    x = _leaf(rng, (3, 2, 2))
    m = _leaf(rng, (4, 3))
    b = _leaf(rng, (3,))
    w = ad.Tensor(rng.normal(1.0, (3,)))

    def loss():
        rows = [ad.token_at(x, r, c) for r in range(2) for c in range(2)]
        stacked = ad.stack_rows(rows)                      # (4, 3)
        pooled = ad.spatial_mean(ad.add_channel_bias(x, b))
        got = ad.add(ad.take_row(ad.add(stacked, m), 1), pooled)
        flat = ad.reshape(ad.transpose(ad.matmul(ad.reshape(got, (1, 3)), ad.Tensor(np.eye(3)))), (3,))
        return ad.sum_all(ad.mul(flat, w))

    return check_gradients(loss, [x, m, b], eps=1e-5, tol=1e-4)


def _check_mlp(seed: int) -> float:
    """Whole-graph check: random 3-layer MLP, every parameter coordinate."""
    rng = Rng(seed)
    x = ad.Tensor(rng.uniform(-1.0, 1.0, (1, 6)))
    w1, b1 = _leaf(rng, (6, 8)), _leaf(rng, (1, 8), -0.1, 0.1)
    w2, b2 = _leaf(rng, (8, 8)), _leaf(rng, (1, 8), -0.1, 0.1)
    w3, b3 = _leaf(rng, (8, 3)), _leaf(rng, (1, 3), -0.1, 0.1)

    def loss():
        h1 = ad.relu(ad.add(ad.matmul(x, w1), b1))
        h2 = ad.sigmoid(ad.add(ad.matmul(h1, w2), b2))
        out = ad.softmax(ad.add(ad.matmul(h2, w3), b3), axis=-1)
        return ad.cross_entropy(ad.reshape(out, (3,)), 1)

    return check_gradients(loss, [w1, b1, w2, b2, w3, b3], eps=1e-5, tol=1e-4)


def _check_tiny_model(seed: int) -> float:
    """End-to-end check of the recognition model at a tiny configuration.

    Runs with detachment disabled: a stop-gradient makes the backward pass
    intentionally differ from the true derivative that finite differences
    measure.  The detachment contract has its own exact-zero tests.
    """
    import dataclasses

    from . import model as mdl

    cfg = dataclasses.replace(mdl.tiny_config(), detach_target_heads=False)
    rng = Rng(seed)
    params = mdl.init_params(cfg, rng.derive("init"))
    image = rng.uniform(0.0, 1.0, (3, cfg.image_side, cfg.image_side))
    box = mdl.BoundingBox(3, 4, 7, 6)
    label = 1

    tensors = list(params.named_parameters().values())

    def loss():
        pred = mdl.forward(ad.Tensor(image), box, params, cfg, rng=None, training=False)
        total = ad.add(ad.add(ad.cross_entropy(pred.y_p, label),
                              ad.cross_entropy(pred.y_t, label)),
                       ad.cross_entropy(pred.y_tc, label))
        return total

    return check_gradients(loss, tensors, eps=1e-6, tol=1e-4,
                           max_coords=2, rng=rng.derive("coords"))


CHECKS = [
    ("matmul", _check_matmul),
    ("conv2d", _check_conv2d),
    ("pooling", _check_pools),
    ("elementwise", _check_elementwise),
    ("softmax", _check_softmax),
    ("layernorm", _check_layernorm),
    ("dropout", _check_dropout),
    ("cross_entropy", _check_cross_entropy),
    ("detach", _check_detach),
    ("structural", _check_structural),
    ("mlp_3layer", _check_mlp),
    ("tiny_model", _check_tiny_model),
]


def run_suite(seeds: int = 20, log=None) -> dict[str, float]:
    """Run every check over ``seeds`` seeds; returns worst error per check."""
    results: dict[str, float] = {}
    for name, fn in CHECKS:
        worst = 0.0
        for seed in range(seeds):
            worst = max(worst, fn(seed))
        results[name] = worst
        if log is not None:
            log(f"gradcheck {name}: max relative error {worst:.3e}")
    return results
