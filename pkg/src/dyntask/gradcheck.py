"""Finite-difference validation of every tape operation and of the losses.

Each case builds randomized inputs kept away from kinks (relu/max/pool ties,
zero distances), runs the recorded backward pass, and compares it against a
central difference of the same forward. The relative-error criterion is
max |analytic - numeric| / (|analytic| + 1e-8) < 1e-4 with step 1e-5.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .errors import ConfigError

TOLERANCE = 1e-4
FD_EPS = 1e-5


@dataclass
class Case:
    """One gradient check: arrays to differentiate with respect to, and a
    builder mapping their leaf tensors to a scalar-projectable output."""
    name: str
    arrays: list
    build: Callable  # (tape, leaves: list[Tensor]) -> Tensor


@dataclass
class CheckResult:
    name: str
    seed: int
    max_rel_err: float
    passed: bool


def _signed(rng, shape, lo=0.1, hi=1.0):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _cases_for(op: str, rng) -> list[Case]:
    u = rng.uniform
    if op in ("add", "sub", "mul", "div"):
        fn = getattr(ad, op)
        b_full = u(0.5, 1.5, (3, 4)) if op == "div" else _signed(rng, (3, 4))
        b_scalar = u(0.5, 1.5, ()) if op == "div" else _signed(rng, ())
        return [
            Case(op, [_signed(rng, (3, 4)), b_full],
                 lambda tape, ls, fn=fn: fn(ls[0], ls[1])),
            Case(op + "/scalar", [_signed(rng, (3, 4)), b_scalar],
                 lambda tape, ls, fn=fn: fn(ls[0], ls[1])),
        ]
    if op == "relu":
        return [Case(op, [_signed(rng, (3, 4), lo=0.2)],
                     lambda tape, ls: ad.relu(ls[0]))]
    if op == "max_const":
        x = _signed(rng, (3, 4), lo=0.2)
        x[np.abs(x - 0.5) < 0.1] += 0.3  # keep clear of the threshold
        return [Case(op, [x], lambda tape, ls: ad.max_const(ls[0], 0.5))]
    if op == "exp":
        return [Case(op, [u(-1.0, 1.0, (3, 4))], lambda tape, ls: ad.exp(ls[0]))]
    if op == "log":
        return [Case(op, [u(0.5, 2.0, (3, 4))], lambda tape, ls: ad.log(ls[0]))]
    if op == "sqrt":
        return [Case(op, [u(0.5, 2.0, (3, 4))], lambda tape, ls: ad.sqrt(ls[0]))]
    if op == "square":
        return [Case(op, [_signed(rng, (3, 4))], lambda tape, ls: ad.square(ls[0]))]
    if op == "reduce_sum":
        return [Case(op, [_signed(rng, (3, 4))], lambda tape, ls: ad.reduce_sum(ls[0]))]
    if op == "reduce_mean":
        return [Case(op, [_signed(rng, (3, 4))], lambda tape, ls: ad.reduce_mean(ls[0]))]
    if op == "sub_rowmax":
        x = u(-1.0, 1.0, (3, 5))
        x[np.arange(3), x.argmax(axis=1)] += 0.5  # unique row max, wide gap
        return [Case(op, [x], lambda tape, ls: ad.sub_rowmax(ls[0]))]
    if op == "row_sum":
        return [Case(op, [_signed(rng, (3, 4))], lambda tape, ls: ad.row_sum(ls[0]))]
    if op == "col_mean":
        return [Case(op, [_signed(rng, (3, 4))], lambda tape, ls: ad.col_mean(ls[0]))]
    if op == "broadcast_rows":
        return [Case(op, [_signed(rng, (1, 4))],
                     lambda tape, ls: ad.broadcast_rows(ls[0], 3))]
    if op == "broadcast_cols":
        return [Case(op, [_signed(rng, (3, 1))],
                     lambda tape, ls: ad.broadcast_cols(ls[0], 4))]
    if op == "reshape":
        return [Case(op, [_signed(rng, (3, 4))],
                     lambda tape, ls: ad.reshape(ls[0], (2, 6)))]
    if op == "transpose":
        return [Case(op, [_signed(rng, (2, 3, 4))],
                     lambda tape, ls: ad.transpose(ls[0], (2, 0, 1)))]
    if op == "matmul":
        return [Case(op, [_signed(rng, (3, 4)), _signed(rng, (4, 2))],
                     lambda tape, ls: ad.matmul(ls[0], ls[1]))]
    if op == "conv2d":
        return [
            Case("conv2d/s1p1", [_signed(rng, (2, 2, 5, 5)), _signed(rng, (3, 2, 3, 3))],
                 lambda tape, ls: ad.conv2d(ls[0], ls[1], stride=1, padding=1)),
            Case("conv2d/s2p0", [_signed(rng, (2, 2, 5, 5)), _signed(rng, (3, 2, 3, 3))],
                 lambda tape, ls: ad.conv2d(ls[0], ls[1], stride=2, padding=0)),
        ]
    if op == "conv2d_nhwc":
        return [
            Case("conv2d_nhwc/s1p1", [_signed(rng, (2, 5, 5, 2)), _signed(rng, (3, 2, 3, 3))],
                 lambda tape, ls: ad.conv2d_nhwc(ls[0], ls[1], stride=1, padding=1)),
            Case("conv2d_nhwc/s2p0", [_signed(rng, (2, 5, 5, 2)), _signed(rng, (3, 2, 3, 3))],
                 lambda tape, ls: ad.conv2d_nhwc(ls[0], ls[1], stride=2, padding=0)),
            Case("conv2d_nhwc/bias",
                 [_signed(rng, (2, 5, 5, 2)), _signed(rng, (3, 2, 3, 3)), _signed(rng, (3,))],
                 lambda tape, ls: ad.conv2d_nhwc(ls[0], ls[1], stride=1, padding=1,
                                                 bias=ls[2])),
        ]
    if op == "add_channel_bias":
        return [Case(op, [_signed(rng, (2, 3, 4, 4)), _signed(rng, (3,))],
                     lambda tape, ls: ad.add_channel_bias(ls[0], ls[1]))]
    if op == "add_bias_lastdim":
        return [Case(op, [_signed(rng, (2, 4, 4, 3)), _signed(rng, (3,))],
                     lambda tape, ls: ad.add_bias_lastdim(ls[0], ls[1]))]
    if op == "maxpool2d":
        x = rng.permutation(np.arange(2 * 2 * 4 * 4, dtype=np.float64))
        x = (x * 0.1).reshape(2, 2, 4, 4)  # all-distinct values: no pooling ties
        return [Case(op, [x], lambda tape, ls: ad.maxpool2d(ls[0]))]
    if op == "maxpool2d_nhwc":
        x = rng.permutation(np.arange(2 * 4 * 4 * 2, dtype=np.float64))
        x = (x * 0.1).reshape(2, 4, 4, 2)
        return [Case(op, [x], lambda tape, ls: ad.maxpool2d_nhwc(ls[0]))]
    if op == "pairwise_dist":
        return [Case(op, [u(0.0, 1.0, (4, 3)), u(2.0, 3.0, (3, 3))],
                     lambda tape, ls: ad.pairwise_dist(ls[0], ls[1]))]
    if op == "batchnorm_nd":
        mean_c, var_c = u(-0.5, 0.5, 3), u(0.5, 1.5, 3)
        return [
            Case("batchnorm_nd/train2d",
                 [u(-1.0, 1.0, (6, 3)), u(0.5, 1.5, 3), _signed(rng, (3,))],
                 lambda tape, ls: ad.batchnorm_nd(ls[0], ls[1], ls[2], 1e-5)),
            Case("batchnorm_nd/train4d",
                 [u(-1.0, 1.0, (2, 3, 4, 4)), u(0.5, 1.5, 3), _signed(rng, (3,))],
                 lambda tape, ls: ad.batchnorm_nd(ls[0], ls[1], ls[2], 1e-5)),
            Case("batchnorm_nd/train_nhwc",
                 [u(-1.0, 1.0, (2, 4, 4, 3)), u(0.5, 1.5, 3), _signed(rng, (3,))],
                 lambda tape, ls: ad.batchnorm_nd(ls[0], ls[1], ls[2], 1e-5,
                                                  channels_last=True)),
            Case("batchnorm_nd/eval",
                 [u(-1.0, 1.0, (6, 3)), u(0.5, 1.5, 3), _signed(rng, (3,))],
                 lambda tape, ls: ad.batchnorm_nd(ls[0], ls[1], ls[2], 1e-5,
                                                  mean=mean_c, var=var_c)),
            # fused relu: small scale + alternating unit shift keeps every
            # activation well away from the clamp, so the FD stays clean
            Case("batchnorm_nd/relu",
                 [u(-1.0, 1.0, (8, 4)), u(0.05, 0.1, 4),
                  np.array([1.0, -1.0, 1.0, -1.0])],
                 lambda tape, ls: ad.batchnorm_nd(ls[0], ls[1], ls[2], 1e-5,
                                                  fuse_relu=True)),
        ]
    raise ConfigError(f"no gradient-check case registered for op '{op}'")


def op_cases(op: str, seed: int) -> list[Case]:
    rng = np.random.default_rng([seed, ad.REGISTERED_OPS.index(op)])
    return _cases_for(op, rng)


def check_case(case: Case, seed: int) -> CheckResult:
    """Compare tape gradients of a random scalar projection of the case's
    output against central differences, jointly over all input arrays."""
    arrays = [np.array(a, dtype=np.float64) for a in case.arrays]

    # One recorded pass for the analytic gradients; the output is projected
    # onto a fixed random direction so per-element sign errors can't cancel.
    tape = ad.Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = case.build(tape, leaves)
    proj = np.random.default_rng([seed, 0xC0FFEE]).uniform(0.5, 1.5, out.shape)
    loss = ad.reduce_sum(ad.mul(out, tape.leaf(proj)))
    grads = ad.backward(loss)
    analytic = [grads.of(leaf) for leaf in leaves]

    max_err = 0.0
    for ai, base in enumerate(arrays):
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        nf = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            vals = []
            for delta in (FD_EPS, -FD_EPS):
                flat[i] = orig + delta
                t2 = ad.Tape()
                ls2 = [t2.leaf(a) for a in arrays]
                o2 = case.build(t2, ls2)
                vals.append(float((o2.data * proj).sum()))
            flat[i] = orig
            nf[i] = (vals[0] - vals[1]) / (2.0 * FD_EPS)
        err = np.max(np.abs(analytic[ai] - numeric) / (np.abs(analytic[ai]) + 1e-8))
        max_err = max(max_err, float(err))
    return CheckResult(case.name, seed, max_err, max_err < TOLERANCE)


def check_op(op: str, seeds=range(10)) -> list[CheckResult]:
    results = []
    for seed in seeds:
        for case in op_cases(op, seed):
            results.append(check_case(case, seed))
    return results


def run_op_suite(ops=None, seeds=range(10)) -> list[CheckResult]:
    """Check every registered tape op (or the given subset)."""
    results = []
    for op in (ops or ad.REGISTERED_OPS):
        results.extend(check_op(op, seeds))
    return results
