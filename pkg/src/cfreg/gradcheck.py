"""Finite-difference checks over every differentiable operation and a composed model."""

from __future__ import annotations

from typing import Callable, Dict, List, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .consistent import CFConfig, generator_reg_term, hinge_disc_loss
from .nn import ArchConfig, build_model, conv, dense, discriminate, flatten, forward, relu
from .trainer import label_smoothing_loss

TOLERANCE = 1e-4
EPS = 1e-5

# a case returns the max relative error it observed
CASES: Dict[str, Callable[[np.random.Generator], float]] = {}


def case(name: str):
    def register(fn):
        CASES[name] = fn
        return fn
    return register


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _project(y: Tensor, rng) -> Tensor:
    """Reduce ``y`` to a scalar through a fixed random linear functional."""
    r = Tensor(rng.standard_normal(y.shape))
    return ad.sum_all(ad.mul(y, r))


def _wrt(fn, x) -> float:
    return grad_check(fn, x, EPS)


@case("matmul")
def _matmul(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    r = rng.standard_normal((3, 2))
    f = lambda at, bt: ad.sum_all(ad.mul(ad.matmul(at, bt), Tensor(r)))
    return max(_wrt(lambda t: f(t, Tensor(b)), a), _wrt(lambda t: f(Tensor(a), t), b))


@case("conv2d")
def _conv2d(rng):
    x, k = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3))
    errs = []
    for stride, pad in ((1, 0), (2, 1)):
        ho = (8 + 2 * pad - 3) // stride + 1
        r = Tensor(rng.standard_normal((2, 4, ho, ho)))
        f = lambda xt, kt: ad.sum_all(ad.mul(ad.conv2d(xt, kt, stride, pad), r))
        errs.append(_wrt(lambda t: f(t, Tensor(k)), x))
        errs.append(_wrt(lambda t: f(Tensor(x), t), k))
    return max(errs)


@case("relu")
def _relu(rng):
    x = _away_from_zero(rng, (4, 5))
    r = Tensor(rng.standard_normal((4, 5)))
    return _wrt(lambda t: ad.sum_all(ad.mul(ad.relu(t), r)), x)


@case("softmax_cross_entropy")
def _sce(rng):
    logits, labels = rng.standard_normal((4, 5)), rng.integers(0, 5, size=4)
    return _wrt(lambda t: ad.softmax_cross_entropy(t, labels), logits)


@case("soft_target_cross_entropy")
def _stce(rng):
    logits, labels = rng.standard_normal((4, 5)), rng.integers(0, 5, size=4)
    return _wrt(lambda t: label_smoothing_loss(t, labels, 0.1), logits)


@case("add")
def _add(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal(4)
    r = Tensor(rng.standard_normal((3, 4)))
    f = lambda at, bt: ad.sum_all(ad.mul(ad.add(at, bt), r))
    return max(_wrt(lambda t: f(t, Tensor(b)), a), _wrt(lambda t: f(Tensor(a), t), b))


@case("sub")
def _sub(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    r = Tensor(rng.standard_normal((3, 4)))
    f = lambda at, bt: ad.sum_all(ad.mul(ad.sub(at, bt), r))
    return max(_wrt(lambda t: f(t, Tensor(b)), a), _wrt(lambda t: f(Tensor(a), t), b))


@case("mul")
def _mul(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    return max(_wrt(lambda t: ad.sum_all(ad.mul(t, Tensor(b))), a),
               _wrt(lambda t: ad.sum_all(ad.mul(t, t)), a))


@case("scalar_mul")
def _scalar_mul(rng):
    x = rng.standard_normal((3, 4))
    return _wrt(lambda t: _project(ad.scalar_mul(t, -2.5), np.random.default_rng(1)), x)


@case("add_scalar")
def _add_scalar(rng):
    x = rng.standard_normal((3, 4))
    return _wrt(lambda t: ad.sum_all(ad.mul(ad.add_scalar(t, 0.7), ad.add_scalar(t, 0.7))), x)


@case("mean")
def _mean(rng):
    x = rng.standard_normal((3, 4))
    return _wrt(lambda t: ad.mean(ad.mul(t, t)), x)


@case("sum")
def _sum(rng):
    x = rng.standard_normal((3, 4))
    return _wrt(lambda t: ad.sum_all(ad.mul(t, t)), x)


@case("flatten")
def _flatten(rng):
    x = rng.standard_normal((2, 3, 2))
    return _wrt(lambda t: _project(ad.flatten(t), np.random.default_rng(2)), x)


@case("reshape")
def _reshape(rng):
    x = rng.standard_normal((2, 6))
    return _wrt(lambda t: _project(ad.reshape(t, (3, 4)), np.random.default_rng(3)), x)


@case("concat")
def _concat(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((4, 3))
    f = lambda at, bt: _project(ad.concat([at, bt]), np.random.default_rng(4))
    return max(_wrt(lambda t: f(t, Tensor(b)), a), _wrt(lambda t: f(Tensor(a), t), b))


@case("take_rows")
def _take_rows(rng):
    x = rng.standard_normal((5, 3))
    idx = np.array([0, 3, 3, 4])
    return _wrt(lambda t: _project(ad.take_rows(t, idx), np.random.default_rng(5)), x)


@case("hinge_disc_loss")
def _hinge(rng):
    a = 1.0 + _away_from_zero(rng, (5, 1))
    b = -1.0 + _away_from_zero(rng, (4, 1))
    return max(_wrt(lambda t: hinge_disc_loss(t, Tensor(b)), a),
               _wrt(lambda t: hinge_disc_loss(Tensor(a), t), b))


@case("generator_reg_term")
def _gen(rng):
    s = rng.standard_normal((6, 1))
    return max(_wrt(lambda t: generator_reg_term(t, CFConfig()), s),
               _wrt(lambda t: generator_reg_term(t, CFConfig(literal_penalty_sign=True)), s))


def composed_model_error(rng: np.random.Generator, weight: float = 0.1) -> float:
    """Every parameter of a conv backbone with task and discriminator heads.

    The loss is task cross-entropy plus the hinge discriminator loss plus the
    weighted generator penalty, so every parameter group receives gradient.
    """
    arch = ArchConfig(backbone=[conv(1, 2, 3, 1, 1), relu(), flatten(), dense(72, 8), relu()], desc_channel=4)
    model = build_model(arch, (1, 6, 6), 3, seed=int(rng.integers(1 << 30)))
    x = rng.standard_normal((6, 1, 6, 6))
    y = rng.integers(0, 3, size=6)
    a_rows, b_rows = np.array([0, 2, 4]), np.array([1, 3, 5])
    cfg = CFConfig()

    def loss_with(params):
        feats, logits = forward(model, x, "eval", params=params)
        sa = discriminate(model, ad.take_rows(feats, a_rows), params)
        sb = discriminate(model, ad.take_rows(feats, b_rows), params)
        total = ad.add(ad.softmax_cross_entropy(logits, y), hinge_disc_loss(sa, sb))
        return ad.add(total, ad.scalar_mul(generator_reg_term(sb, cfg), weight))

    worst = 0.0
    for name in model.params:
        def f(t, name=name):
            params = model.bind()
            params[name] = t
            return loss_with(params)
        worst = max(worst, grad_check(f, model.params[name].value, EPS))
    return worst


CASES["composed_model"] = composed_model_error


def run_suite(seed: int = 0, tolerance: float = TOLERANCE) -> Tuple[bool, List[Tuple[str, float, bool]]]:
    """Run every registered case; returns ``(all_passed, [(name, max_rel_err, passed)])``."""
    rows = []
    for i, (name, fn) in enumerate(CASES.items()):
        err = fn(np.random.default_rng([seed, i]))
        rows.append((name, err, bool(err < tolerance)))
    return all(ok for _, _, ok in rows), rows


def format_report(rows) -> str:
    lines = [f"{'op':<28}{'max_rel_err':>14}  status"]
    for name, err, ok in rows:
        lines.append(f"{name:<28}{err:>14.3e}  {'PASS' if ok else 'FAIL'}")
    return "\n".join(lines)
