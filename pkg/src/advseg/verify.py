"""Finite-difference verification of every differentiable op and both networks."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .networks import discriminator_forward, estimator_forward, init_discriminator, init_estimator
from .tensor import RunningStats, Tensor

OP_TOL = 1e-5
NETWORK_TOL = 1e-4
PROBE_SIZE = 16

log = logging.getLogger(__name__)


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tolerance)


def _weighted(out: Tensor, rng: np.random.Generator) -> Tensor:
    # a fixed random projection keeps every output element in play
    return T.mean(T.mul(out, Tensor(rng.normal(size=out.shape))))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _op_checks(rng: np.random.Generator) -> dict[str, Callable[[], float]]:
    def conv(stride, k):
        def run():
            x = Tensor(rng.normal(size=(2, 8, 8, 2)))
            w = Tensor(rng.normal(size=(k, k, 2, 4)))
            b = Tensor(rng.normal(size=4))
            proj = rng.normal(size=(2, -(-8 // stride), -(-8 // stride), 4))
            return T.grad_check(lambda x, w, b: T.mean(T.mul(T.conv2d(x, w, b, stride=stride), Tensor(proj))), [x, w, b])
        return run

    def bn(mode):
        def run():
            x = Tensor(rng.normal(size=(4, 4, 4, 2)))
            g = Tensor(rng.uniform(0.5, 1.5, size=2))
            b = Tensor(rng.normal(size=2))
            running = RunningStats(rng.normal(size=2), rng.uniform(0.5, 2.0, size=2))
            proj = rng.normal(size=x.shape)

            def f(x, g, b):
                rs = RunningStats(running.mean.copy(), running.var.copy())
                return T.mean(T.mul(T.batchnorm(x, g, b, rs, mode=mode), Tensor(proj)))
            return T.grad_check(f, [x, g, b])
        return run

    def unary(op, make):
        def run():
            x = Tensor(make())
            proj = rng.normal(size=x.shape)
            return T.grad_check(lambda x: T.mean(T.mul(op(x), Tensor(proj))), [x])
        return run

    def fc():
        x, w, b = (Tensor(rng.normal(size=s)) for s in ((3, 5), (5, 4), (4,)))
        proj = rng.normal(size=(3, 4))
        return T.grad_check(lambda x, w, b: T.mean(T.mul(T.fully_connected(x, w, b), Tensor(proj))), [x, w, b])

    def concat():
        a, b = Tensor(rng.normal(size=(1, 3, 3, 3))), Tensor(rng.normal(size=(1, 3, 3, 1)))
        proj = rng.normal(size=(1, 3, 3, 4))
        return T.grad_check(lambda a, b: T.mean(T.mul(T.concat_channels(a, b), Tensor(proj))), [a, b])

    def crop():
        x = Tensor(rng.normal(size=(1, 6, 6, 2)))
        proj = rng.normal(size=(1, 3, 4, 2))
        return T.grad_check(lambda x: T.mean(T.mul(T.crop(x, 1, 2, 3, 4), Tensor(proj))), [x])

    def arith():
        a, b = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(1, 3)))
        return T.grad_check(lambda a, b: T.mean(T.mul(T.sub(T.add(a, b), T.mul(a, b)), a)), [a, b])

    def sums():
        x = Tensor(rng.normal(size=(2, 3, 4)))
        proj = rng.normal(size=(2, 3))
        return T.grad_check(lambda x: T.mean(T.mul(T.sum_(x, axis=-1), Tensor(proj))), [x])

    return {
        "conv2d(stride=1, k=3)": conv(1, 3),
        "conv2d(stride=1, k=4)": conv(1, 4),
        "conv2d(stride=2, k=5)": conv(2, 5),
        "batchnorm(train)": bn("train"),
        "batchnorm(infer)": bn("infer"),
        "leaky_relu": unary(lambda x: T.leaky_relu(x, 0.2), lambda: _away_from_zero(rng, (3, 4))),
        "fully_connected": fc,
        "sigmoid": unary(T.sigmoid, lambda: rng.normal(size=(3, 4))),
        "softmax_channels": unary(T.softmax_channels, lambda: rng.normal(size=(1, 2, 2, 3))),
        "log": unary(T.log, lambda: rng.uniform(0.2, 2.0, size=(3, 4))),
        "clamp": unary(lambda x: T.clamp(x, -0.5, 0.5), lambda: _away_from_zero(rng, (3, 4)) * 0.45),
        "mean": unary(T.mean, lambda: rng.normal(size=(3, 4))),
        "sum": sums,
        "concat_channels": concat,
        "crop": crop,
        "add/sub/mul": arith,
    }


def _network_checks(rng: np.random.Generator, per_tensor: int) -> dict[str, Callable[[], float]]:
    size = PROBE_SIZE

    def estimator():
        params = init_estimator(int(rng.integers(1 << 31)))
        image = Tensor(rng.normal(size=(1, size, size, 1)))
        proj = Tensor(rng.normal(size=(1, size, size, 3)))
        named = params.named_tensors()

        def f(*_):
            return T.mean(T.mul(estimator_forward(params, image, mode="train"), proj))
        return _sampled_check(f, named, per_tensor, rng, full={"conv1.kernel"})

    def discriminator():
        params = init_discriminator(int(rng.integers(1 << 31)), input_size=size)
        # the fusion output is 1x1 at this size, so batchnorm needs a few
        # samples to have non-degenerate statistics
        image = Tensor(rng.normal(size=(4, size, size, 1)))
        seg = Tensor(rng.dirichlet(np.ones(3), size=(4, size, size)))

        def f(*_):
            return T.mean(T.log(discriminator_forward(params, image, seg, mode="train")))
        return _sampled_check(f, {**params.named_tensors(), "seg_input": seg}, per_tensor, rng)

    return {f"estimator end-to-end ({size}x{size})": estimator,
            f"discriminator end-to-end ({size}x{size})": discriminator}


def _feeds_batchnorm(name: str, named: dict[str, Tensor]) -> bool:
    # batchnorm subtracts the batch mean, so a bias right before it has an
    # exactly zero gradient; a relative error on it would only measure noise
    return name.endswith(".bias") and name[: -len("bias")] + "gamma" in named


def _probe(f, t: Tensor, idx, eps: float, base_kinks) -> float | None:
    """Central difference at ``idx``, or None when it straddles a leaky_relu kink."""
    orig = t.data[idx]
    values = []
    for delta in (eps, -eps):
        t.data[idx] = orig + delta
        with T.record_kinks() as kinks:
            values.append(f().item())
        t.data[idx] = orig
        if not T.same_kinks(kinks, base_kinks):
            return None
    return (values[0] - values[1]) / (2.0 * eps)


def _sampled_check(f, named: dict[str, Tensor], per_tensor: int, rng, full=frozenset()) -> float:
    worst = 0.0
    for t in named.values():
        t.requires_grad = True
        t.grad = None
    with T.record_kinks() as base_kinks:
        loss = f()
    T.backward(loss)
    analytic = {name: t.grad.copy() for name, t in named.items()}
    skipped = 0
    for name, t in named.items():
        order = np.arange(t.size) if name in full else rng.permutation(t.size)
        wanted = t.size if name in full else min(per_tensor, t.size)
        done = 0
        for k in order:
            if done == wanted:
                break
            idx = np.unravel_index(k, t.shape)
            num = _probe(f, t, idx, 1e-5, base_kinks)
            if num is None:
                skipped += 1
                continue
            done += 1
            ana = analytic[name][idx]
            if _feeds_batchnorm(name, named):
                worst = max(worst, 0.0 if abs(ana) < 1e-12 and abs(num) < 1e-6 else np.inf)
                continue
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), T.relative_floor(analytic[name])))
        t.grad = None
    log.debug("skipped %d probes that crossed a leaky_relu kink", skipped)
    return worst


def run_suite(seed: int = 0, per_tensor: int = 6, report: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    checks = [(name, fn, OP_TOL) for name, fn in _op_checks(rng).items()]
    checks += [(name, fn, NETWORK_TOL) for name, fn in _network_checks(rng, per_tensor).items()]
    for name, fn, tol in checks:
        t0 = time.perf_counter()
        err = fn()
        res = CheckResult(name, float(err), tol, time.perf_counter() - t0)
        results.append(res)
        if report is not None:
            report(res)
    return results
