"""Central finite-difference checks for every backend op."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import backend as B

EPS = 1e-3
# absolute floor on the relative-error denominator; exactly-zero gradients
# (e.g. an L1 bias whose signs cancel) would otherwise divide noise by noise
GRAD_FLOOR = 1e-3
TOLERANCE = {np.float32: 1e-2, np.float64: 1e-4}


@dataclass
class OpCheck:
    op: str
    trials: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), GRAD_FLOOR)
    return float(np.linalg.norm(a - n) / denom)


def _objective(out: B.Tensor, cotangent: np.ndarray) -> float:
    return float(np.sum(out.data.astype(np.float64) * cotangent))


def numeric_grads(fn, inputs: list[np.ndarray], cotangent: np.ndarray, eps: float = EPS) -> list[np.ndarray]:
    dtype = B.default_dtype()
    base = [np.array(x, dtype=dtype) for x in inputs]
    grads = []
    for i, x in enumerate(base):
        g = np.zeros(x.shape, dtype=np.float64)
        flat = x.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + dtype(eps)
            hi_val = flat[j]
            f_hi = _objective(fn(*[B.Tensor(v) for v in base]), cotangent)
            flat[j] = orig - dtype(eps)
            lo_val = flat[j]
            f_lo = _objective(fn(*[B.Tensor(v) for v in base]), cotangent)
            flat[j] = orig
            # the representable step differs from eps in float32
            g.reshape(-1)[j] = (f_hi - f_lo) / (float(hi_val) - float(lo_val))
        grads.append(g)
    return grads


def analytic_grads(fn, inputs: list[np.ndarray], cotangent: np.ndarray) -> list[np.ndarray]:
    leaves = [B.parameter(x) for x in inputs]
    out = fn(*leaves)
    B._backprop(out, np.asarray(cotangent, dtype=B.default_dtype()))
    return [np.zeros(leaf.shape) if leaf.grad is None else leaf.grad for leaf in leaves]


def _away_from_zero(rng, shape, margin=0.05, scale=1.0):
    x = rng.normal(0.0, scale, size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin * 2, x)


def _far_target(rng, value: np.ndarray, lo: float = 0.3, hi: float = 1.0) -> np.ndarray:
    # keeps every |a - b| well clear of the |.| kink at 0
    return value + rng.choice([-1.0, 1.0], size=value.shape) * rng.uniform(lo, hi, size=value.shape)


Case = Callable[[np.random.Generator], tuple[Callable[..., B.Tensor], list[np.ndarray]]]


def _conv(rng):
    n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    h, w = rng.integers(2, 6), rng.integers(2, 6)
    return B.conv3x3, [rng.normal(size=(n, c, h, w)), rng.normal(size=(o, c, 3, 3)) * 0.5, rng.normal(size=(o,))]


def _elu(rng):
    return B.elu, [_away_from_zero(rng, (2, 2, 3, 3), scale=1.5)]


def _up(rng):
    f = int(rng.integers(1, 4))
    return (lambda x: B.resize_nearest(x, f, "up")), [rng.normal(size=(2, 2, 3, 3))]


def _down(rng):
    f = int(rng.integers(1, 3))
    return (lambda x: B.resize_nearest(x, f, "down")), [rng.normal(size=(2, 2, 2 * f, 4 * f))]


def _fc(rng):
    b, n, m = rng.integers(1, 4), rng.integers(1, 6), rng.integers(1, 6)
    return B.fully_connected, [rng.normal(size=(b, n)), rng.normal(size=(m, n)), rng.normal(size=(m,))]


def _l1(rng):
    a = rng.normal(size=(2, 3, 2, 2))
    return B.l1_mean, [a, _far_target(rng, a)]


def _concat(rng):
    return B.concat_channels, [rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2, 3, 3, 3))]


def _reshape(rng):
    return (lambda x: B.reshape(B.flatten(x), (2, 3, 2, 2))), [rng.normal(size=(2, 3, 2, 2))]


def _arith(rng):
    k, lam = float(rng.uniform(0.2, 0.8)), float(rng.uniform(0.2, 0.8))

    def fn(a, b, c):
        return (1.0 - lam) * (a - k * b) + lam * c

    return fn, [rng.normal(size=()), rng.normal(size=()), rng.normal(size=())]


def _autoencoder(rng):
    x = rng.uniform(-1, 1, size=(1, 3, 4, 4))
    params = [
        rng.normal(size=(2, 3, 3, 3)) * 0.3, rng.normal(size=(2,)) * 0.1,
        rng.normal(size=(3, 8)) * 0.3, rng.normal(size=(3,)) * 0.1,
        rng.normal(size=(8, 3)) * 0.3, rng.normal(size=(8,)) * 0.1,
        rng.normal(size=(3, 2, 3, 3)) * 0.3, rng.normal(size=(3,)) * 0.1,
    ]

    def body(x, w1, b1, f1, fb1, f2, fb2, w2, b2):
        h = B.resize_nearest(B.elu(B.conv3x3(x, w1, b1)), 2, "down")
        h = B.fully_connected(B.fully_connected(B.flatten(h), f1, fb1), f2, fb2)
        h = B.resize_nearest(B.reshape(h, (x.shape[0], 2, 2, 2)), 2, "up")
        return B.conv3x3(B.elu(h), w2, b2)

    with B.precision(np.float64):
        # small offsets keep the loss (and its float32 rounding) small
        target = _far_target(rng, body(*[B.Tensor(v) for v in [x] + params]).data, 0.05, 0.2)

    def fn(*args):
        return B.l1_mean(body(*args), B.Tensor(target))

    return fn, [x] + params


def _injection(rng):
    low = rng.uniform(-1, 1, size=(1, 3, 2, 2))
    level = rng.uniform(-1, 1, size=(1, 3, 4, 4))

    def fn(lo, lv, w1, b1, w2, b2):
        h = B.elu(B.conv3x3(lo, w1, b1))
        h = B.concat_channels(B.resize_nearest(h, 2, "up"), lv)
        return B.elu(B.conv3x3(h, w2, b2))

    return fn, [low, level, rng.normal(size=(2, 3, 3, 3)) * 0.3, rng.normal(size=(2,)) * 0.1,
                rng.normal(size=(2, 5, 3, 3)) * 0.3, rng.normal(size=(2,)) * 0.1]


CASES: dict[str, Case] = {
    "conv3x3": _conv,
    "elu": _elu,
    "resize_nearest_up": _up,
    "resize_nearest_down": _down,
    "fully_connected": _fc,
    "l1_mean": _l1,
    "concat_channels": _concat,
    "reshape": _reshape,
    "scalar_arithmetic": _arith,
    "composite_autoencoder": _autoencoder,
    "composite_injection": _injection,
}


def check_op(name: str, rng: np.random.Generator, trials: int, perturb: bool = False) -> OpCheck:
    dtype = B.default_dtype()
    worst = 0.0
    for _ in range(trials):
        fn, inputs = CASES[name](rng)
        out_shape = fn(*[B.Tensor(v) for v in inputs]).shape
        cot = rng.normal(size=out_shape)
        ana = analytic_grads(fn, inputs, cot)
        if perturb:
            ana = [g * 1.5 for g in ana]
        num = numeric_grads(fn, inputs, cot)
        for a, n in zip(ana, num):
            worst = max(worst, relative_error(a, n))
    return OpCheck(name, trials, worst, TOLERANCE[dtype])


def run_suite(seed: int = 0, trials: int = 20, dtype=np.float32, perturb: str | None = None) -> list[OpCheck]:
    """Run every op's check; ``perturb`` names an op whose analytic gradient is corrupted."""
    if perturb is not None and perturb not in CASES:
        raise KeyError(f"unknown op {perturb!r}")
    results = []
    with B.precision(dtype):
        for i, name in enumerate(CASES):
            rng = np.random.default_rng([seed, i])
            results.append(check_op(name, rng, trials, perturb=(name == perturb)))
    return results


def format_table(results: list[OpCheck]) -> str:
    lines = [f"{'op':<24}{'trials':>7}{'max rel err':>14}{'tol':>9}  status"]
    for r in results:
        lines.append(
            f"{r.op:<24}{r.trials:>7}{r.max_rel_error:>14.3e}{r.tolerance:>9.0e}  {'ok' if r.passed else 'FAIL'}"
        )
    return "\n".join(lines)
