"""Parameterized layers composed by the model: dense, conv block, batch
normalization, inverted dropout, row softmax, and Xavier initialization.

Layers are plain functions over tape tensors; parameters arrive already
lifted as leaves. Batch-norm running statistics live outside the tape (they
are buffers, not differentiated) and are updated in place in train mode.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, ShapeError

BN_EPS = 1e-5
BN_RATE = 0.1  # running-statistics update rate


def xavier_init(shape, rng) -> np.ndarray:
    """Zero-mean uniform weights with variance 2 / (fan_in + fan_out).

    For dense (d_in, d_out) the fans are the two extents; for conv kernels
    (o, c, kh, kw) they are c*kh*kw and o*kh*kw.
    """
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ShapeError("xavier_init requires a nonempty shape")
    if len(shape) == 2:
        fan_in, fan_out = shape
    elif len(shape) == 4:
        o, c, kh, kw = shape
        fan_in, fan_out = c * kh * kw, o * kh * kw
    else:
        fan_in = fan_out = int(np.prod(shape)) // shape[0]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b broadcast across rows; b has shape (d_out,)."""
    if x.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {w.shape}")
    out = ad.matmul(x, w)
    bias_row = ad.reshape(b, (1, w.shape[1]))
    return ad.add(out, ad.broadcast_rows(bias_row, x.shape[0]))


def _moments(xd: np.ndarray, channels_last: bool):
    """Per-channel mean and biased variance; one fused pass for trailing
    channel layouts. Overflow here surfaces as a non-finite batchnorm output,
    so the warnings are noise."""
    with np.errstate(over="ignore", invalid="ignore"):
        if xd.ndim == 2 or channels_last:
            flat = xd.reshape(-1, xd.shape[-1])
            mean = flat.mean(axis=0)
            sq = np.einsum("nk,nk->k", flat, flat) / flat.shape[0]
            return mean, sq - mean * mean
        mean = xd.mean(axis=(0, 2, 3))
        return mean, xd.var(axis=(0, 2, 3))


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running: dict,
              mode: str, channels_last: bool = False,
              fuse_relu: bool = False) -> Tensor:
    """Standardize per feature (2-d input) or per channel (4-d input).

    Train mode uses batch statistics and folds them into the running ones at
    rate 0.1; eval mode uses the running statistics as constants.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    if x.data.ndim not in (2, 4):
        raise ShapeError(f"batchnorm expects a 2-d or 4-d input, got {x.shape}")
    k = x.shape[-1] if (x.data.ndim == 2 or channels_last) else x.shape[1]
    if mode == "train":
        if x.data.size // k < 2:
            raise ContractError("batchnorm in train mode needs a batch of >= 2")
        mean, var = _moments(x.data, channels_last)
        # in place so callers holding views of the buffers see the update
        running["mean"] *= 1 - BN_RATE
        running["mean"] += BN_RATE * mean
        running["var"] *= 1 - BN_RATE
        running["var"] += BN_RATE * var
        return ad.batchnorm_nd(x, gamma, beta, BN_EPS, mean=mean, var=var,
                               batch_stats=True, channels_last=channels_last,
                               fuse_relu=fuse_relu)
    return ad.batchnorm_nd(x, gamma, beta, BN_EPS, mean=running["mean"],
                           var=running["var"], channels_last=channels_last,
                           fuse_relu=fuse_relu)


def dropout(x: Tensor, p: float, mode: str, rng=None) -> Tensor:
    """Inverted dropout: zero with probability p and scale survivors by
    1/(1-p) in train mode; exact identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode with p > 0 requires an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return ad.mul(x, x.tape.leaf(mask))


def softmax_rows(logits: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by row-max subtraction."""
    m, k = logits.shape
    e = ad.exp(ad.sub_rowmax(logits))
    denom = ad.row_sum(e)
    return ad.div(e, ad.broadcast_cols(denom, k))


def log_softmax_rows(logits: Tensor) -> Tensor:
    """Row-wise log softmax via the shifted log-sum-exp."""
    m, k = logits.shape
    shifted = ad.sub_rowmax(logits)
    lse = ad.log(ad.row_sum(ad.exp(shifted)))
    return ad.sub(shifted, ad.broadcast_cols(lse, k))


def conv_block(x: Tensor, conv_w: Tensor, conv_b: Tensor, gamma: Tensor,
               beta: Tensor, running: dict, mode: str, pool: bool = True) -> Tensor:
    """conv (stride 1, same padding, fused bias) -> batchnorm+relu ->
    optional 2x2 pool, on channels-last feature maps."""
    kh = conv_w.shape[2]
    out = ad.conv2d_nhwc(x, conv_w, stride=1, padding=kh // 2, bias=conv_b)
    out = batchnorm(out, gamma, beta, running, mode, channels_last=True,
                    fuse_relu=True)
    return ad.maxpool2d_nhwc(out) if pool else out
