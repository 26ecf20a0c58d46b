"""Central finite-difference checks of every differentiable op and a tiny full pipeline."""

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .fusion import AwfState, awf_fuse, baseline_fuse, compute_losses, normalized_probs
from .semantic import cifem_correlate
from .topo import GraphSageParams, build_graph, sage_layer, tpc_forward

STEP = 1e-5
TOLERANCE = 1e-4


def _param(rng, *shape, low=-1.0, high=1.0, avoid_zero=0.0):
    x = rng.uniform(low, high, size=shape)
    if avoid_zero:
        x = np.where(np.abs(x) < avoid_zero, np.sign(x + 1e-300) * avoid_zero * 2, x)
    return T.Tensor(x, requires_grad=True)


def _weighted_sum(out, r):
    return T.tsum(T.mul(out, T.Tensor(r)))


def relative_error(analytic, numeric):
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-10)
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(loss_fn, params, step=STEP, max_entries=None, rng=None):
    """Norm-wise relative error between backward() and central differences.

    The gradients of all ``params`` are compared as one concatenated vector, so a
    tensor whose true gradient is exactly zero (a bias feeding batch norm) does not
    turn round-off into a spurious failure. ``max_entries`` caps how many entries
    per tensor are perturbed (chosen at random).
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic_all, numeric_all = [], []
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
        numeric = np.empty(len(idx))
        with T.no_grad():
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + step
                up = float(loss_fn().data)
                flat[i] = orig - step
                down = float(loss_fn().data)
                flat[i] = orig
                numeric[j] = (up - down) / (2 * step)
        analytic_all.append(analytic.reshape(-1)[idx])
        numeric_all.append(numeric)
    for p in params:
        p.grad = None
    return relative_error(np.concatenate(analytic_all), np.concatenate(numeric_all))


# ---------------------------------------------------------------------------
# individual checks: each returns (loss_fn, params)
# ---------------------------------------------------------------------------


def _conv2d(rng):
    x, k, b = _param(rng, 2, 3, 5, 5), _param(rng, 4, 3, 3, 3), _param(rng, 4)
    r = rng.standard_normal((2, 4, 5, 5))
    return lambda: _weighted_sum(T.conv2d(x, k, b), r), [x, k, b]


def _batchnorm_train(rng):
    x, g, b = _param(rng, 3, 2, 3, 3), _param(rng, 2, low=0.5, high=1.5), _param(rng, 2)
    r = rng.standard_normal((3, 2, 3, 3))
    return lambda: _weighted_sum(T.batchnorm2d(x, g, b, "train"), r), [x, g, b]


def _batchnorm_eval(rng):
    x, g, b = _param(rng, 3, 2, 3, 3), _param(rng, 2, low=0.5, high=1.5), _param(rng, 2)
    st = T.BatchNormStats(2, dtype=np.float64)
    st.mean[:] = rng.standard_normal(2)
    st.var[:] = rng.uniform(0.5, 2.0, 2)
    st.initialized = True
    r = rng.standard_normal((3, 2, 3, 3))
    return lambda: _weighted_sum(T.batchnorm2d(x, g, b, "eval", st), r), [x, g, b]


def _relu(rng):
    x = _param(rng, 4, 5, avoid_zero=0.05)
    r = rng.standard_normal((4, 5))
    return lambda: _weighted_sum(T.relu(x), r), [x]


def _elementwise_mul(rng):
    a, b = _param(rng, 3, 4), _param(rng, 3, 4)
    r = rng.standard_normal((3, 4))
    return lambda: _weighted_sum(T.elementwise_mul(a, b), r), [a, b]


def _concat_channels(rng):
    a, b = _param(rng, 2, 3, 3), _param(rng, 1, 3, 3)
    r = rng.standard_normal((3, 3, 3))
    return lambda: _weighted_sum(T.concat_channels([a, b]), r), [a, b]


def _global_avg_pool(rng):
    x = _param(rng, 2, 3, 4, 4)
    r = rng.standard_normal((2, 3))
    return lambda: _weighted_sum(T.global_avg_pool(x), r), [x]


def _linear(rng):
    x, w, b = _param(rng, 3, 5), _param(rng, 4, 5), _param(rng, 4)
    r = rng.standard_normal((3, 4))
    return lambda: _weighted_sum(T.linear(x, w, b), r), [x, w, b]


def _softmax(rng):
    x = _param(rng, 3, 5, low=-3, high=3)
    r = rng.standard_normal((3, 5))
    return lambda: _weighted_sum(T.softmax(x), r), [x]


def _cross_entropy(rng):
    p = T.Tensor(rng.dirichlet(np.ones(4), size=3) * 0.9 + 0.025, requires_grad=True)
    labels = np.array([0, 3, 1])
    return lambda: T.cross_entropy(p, labels), [p]


def _l2_norm(rng):
    x = _param(rng, 3, 4)
    return lambda: T.l2_norm(x), [x]


def _cifem_correlate(rng):
    a, b = _param(rng, 2, 3, 3, 3), _param(rng, 2, 3, 3, 3)
    r = rng.standard_normal((2, 9, 3, 3))
    return lambda: _weighted_sum(cifem_correlate(a, b), r), [a, b]


def _maximum(rng):
    a = _param(rng, 3, 4)
    b = T.Tensor(a.data + np.where(rng.random((3, 4)) < 0.5, -0.3, 0.3), requires_grad=True)
    r = rng.standard_normal((3, 4))
    return lambda: _weighted_sum(T.maximum(a, b), r), [a, b]


def _normalized_probs(rng):
    y = _param(rng, 3, 4, low=0.2, high=1.0)
    r = rng.standard_normal((3, 4))
    return lambda: _weighted_sum(normalized_probs(y), r), [y]


def _random_graph(rng, n, k):
    return build_graph(rng.standard_normal((n, 6)), k)


def _sage_layer(rng):
    g = _random_graph(rng, 7, 2)
    h, w = _param(rng, 7, 4), _param(rng, 3, 4)
    r = rng.standard_normal((7, 3))

    return lambda: _weighted_sum(sage_layer(g, h, w), r), [h, w]


def _tpc_forward(rng):
    g = _random_graph(rng, 8, 2)
    params = GraphSageParams(6, 3, rng, widths=(5, 4), dtype=np.float64)
    h = _param(rng, 8, 6)
    r = rng.standard_normal((8, 3))
    return lambda: _weighted_sum(tpc_forward(g, h, params), r), [h] + params.parameters()


def _fusion_losses(rng):
    zs = [T.softmax(_param(rng, 4, 3)) for _ in range(2)]
    sic_logits = [_param(rng, 4, 3) for _ in range(2)]
    tpc_logits = [_param(rng, 4, 3) for _ in range(2)]
    state = AwfState(np.array([0.3, 0.7]), 3.0)
    labels = np.array([0, 2, 1, 2])
    del zs

    def loss():
        sic = [T.softmax(z) for z in sic_logits]
        tpc = [T.softmax(z) for z in tpc_logits]
        return compute_losses(sic, tpc, labels, state, lam=0.5).total

    return loss, sic_logits + tpc_logits


def _baseline_product(rng):
    logits = [_param(rng, 3, 4) for _ in range(2)]
    labels = np.array([1, 0, 3])

    def loss():
        fused = baseline_fuse([T.softmax(z) for z in logits], "product")
        return T.cross_entropy(normalized_probs(fused), labels)

    return loss, logits


def _awf_fuse(rng):
    zs = [_param(rng, 3, 4) for _ in range(3)]
    state = AwfState(np.array([0.2, 0.3, 0.5]), 2.5)
    r = rng.standard_normal((3, 4))
    return lambda: _weighted_sum(awf_fuse(zs, state), r), zs


def _pipeline(rng):
    """Tiny end-to-end model: BSFE(4) -> CIFEM -> SIC + TPC -> AWF losses, 8 nodes."""
    from .train import FusionNet, TrainConfig

    cfg = TrainConfig(bsfe_channels=(4, 4, 4), cifem_channels=3, sage_widths=(5, 4), patch_size=5,
                      k_neighbors=2, dtype="float64", seed=int(rng.integers(1 << 30)))
    model = FusionNet(2, 3, cfg, rng)
    model.awf = AwfState(np.array([0.4, 0.6]), 3.0)
    x = rng.standard_normal((8, 2, 9, 5, 5))
    labels = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    feats = model.pooled_features(x)
    graphs = [build_graph(feats[k], cfg.k_neighbors) for k in range(2)]

    def loss():
        probs, pooled = model.semantic(x, "train")
        tpc = model.topological(graphs, pooled)
        return compute_losses(probs, tpc, labels, model.awf, lam=0.5).total

    return loss, model.parameters()


CHECKS = {
    "conv2d": (_conv2d, None),
    "batchnorm2d_train": (_batchnorm_train, None),
    "batchnorm2d_eval": (_batchnorm_eval, None),
    "relu": (_relu, None),
    "elementwise_mul": (_elementwise_mul, None),
    "concat_channels": (_concat_channels, None),
    "global_avg_pool": (_global_avg_pool, None),
    "linear": (_linear, None),
    "softmax": (_softmax, None),
    "cross_entropy": (_cross_entropy, None),
    "l2_norm": (_l2_norm, None),
    "maximum": (_maximum, None),
    "normalized_probs": (_normalized_probs, None),
    "cifem_correlate": (_cifem_correlate, None),
    "sage_layer": (_sage_layer, None),
    "tpc_forward": (_tpc_forward, None),
    "awf_fuse": (_awf_fuse, None),
    "compute_losses": (_fusion_losses, None),
    "baseline_product": (_baseline_product, None),
    "pipeline": (_pipeline, 12),
}


@dataclass
class GradcheckReport:
    errors: dict = field(default_factory=dict)
    tolerance: float = TOLERANCE
    seconds: float = 0.0

    @property
    def passed(self):
        return all(e <= self.tolerance for e in self.errors.values())

    @property
    def worst(self):
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    def lines(self):
        out = [f"{'PASS' if e <= self.tolerance else 'FAIL'} {name:<20s} max_rel_err={e:.3e}"
               for name, e in self.errors.items()]
        name, err = self.worst
        out.append(f"worst={name} rel_err={err:.3e} tolerance={self.tolerance:.0e} time={self.seconds:.1f}s")
        return out


def run_gradcheck(seed=0, checks=None, tolerance=TOLERANCE):
    checks = CHECKS if checks is None else checks
    report = GradcheckReport(tolerance=tolerance)
    t0 = time.perf_counter()
    for name, (build, max_entries) in checks.items():
        rng = np.random.default_rng([seed, len(name)])
        loss_fn, params = build(rng)
        report.errors[name] = check_gradients(loss_fn, params, max_entries=max_entries, rng=rng)
    report.seconds = time.perf_counter() - t0
    return report
