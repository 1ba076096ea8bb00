"""Dense tensor primitives with a fixed, reproducible accumulation order.

Everything downstream (forward passes, gradients, quantization losses)
composes these few operations. All compute is float64; all functions are
pure. Matrix products accumulate over the inner dimension in increasing
index order, exactly like the naive triple loop, so results are
bit-identical across runs and machines regardless of BLAS.
"""

import numpy as np

from .errors import DimensionError, GeometryError

# For long inner dimensions with small outputs, a cumulative-sum reduction
# beats the outer-product loop. Both paths accumulate strictly left to
# right, so they agree bitwise.
_CUMSUM_MIN_K = 128
_CUMSUM_MAX_OUT = 4096
_CUMSUM_MAX_ELEMS = 8_000_000


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with row-major (increasing-k) accumulation order."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    m, k = a.shape
    kb, n = b.shape
    if k != kb:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    if k >= _CUMSUM_MIN_K and m * n <= _CUMSUM_MAX_OUT and m * n * k <= _CUMSUM_MAX_ELEMS:
        # products[i, j, kk] reduced sequentially over kk
        products = a[:, None, :] * b.T[None, :, :]
        return np.cumsum(products, axis=2)[:, :, -1]
    out = np.zeros((m, n))
    for kk in range(k):
        out += a[:, kk, None] * b[kk]
    return out


def conv_output_size(h: int, w: int, kh: int, kw: int, stride: int, pad: int):
    """Output spatial size for a conv layer; raises when the kernel does not tile."""
    if stride < 1:
        raise GeometryError(f"stride must be positive, got {stride}")
    if pad < 0:
        raise GeometryError(f"pad must be non-negative, got {pad}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise GeometryError(
            f"kernel {kh}x{kw} does not fit padded input {h + 2 * pad}x{w + 2 * pad}"
        )
    if (h + 2 * pad - kh) % stride or (w + 2 * pad - kw) % stride:
        raise GeometryError(
            f"geometry not divisible: input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {pad}"
        )
    return (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Unroll batched images (B,c,h,w) into a patch matrix.

    Returns (patches, (oh, ow)) where patches has shape
    (c*kh*kw, B*oh*ow); column b*oh*ow + i*ow + j holds the receptive
    field of output position (i, j) of sample b, rows ordered (c, di, dj).
    """
    bsz, c, h, w = x.shape
    oh, ow = conv_output_size(h, w, kh, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((bsz, c, kh, kw, oh, ow))
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, di, dj] = xp[:, :, di : di + stride * oh : stride,
                                    dj : dj + stride * ow : stride]
    patches = cols.transpose(1, 2, 3, 0, 4, 5).reshape(c * kh * kw, bsz * oh * ow)
    return np.ascontiguousarray(patches), (oh, ow)


def col2im(dpatches: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int):
    """Scatter-add the adjoint of :func:`im2col` back onto image shape."""
    bsz, c, h, w = x_shape
    oh, ow = conv_output_size(h, w, kh, kw, stride, pad)
    cols = dpatches.reshape(c, kh, kw, bsz, oh, ow).transpose(3, 0, 1, 2, 4, 5)
    xp = np.zeros((bsz, c, h + 2 * pad, w + 2 * pad))
    for di in range(kh):
        for dj in range(kw):
            xp[:, :, di : di + stride * oh : stride,
               dj : dj + stride * ow : stride] += cols[:, :, di, dj]
    if pad == 0:
        return xp
    return xp[:, :, pad:-pad, pad:-pad]


def conv2d_im2col(x: np.ndarray, kernel: np.ndarray, stride: int = 1, pad: int = 0):
    """2-D convolution of one sample (c,h,w) with kernel (o,c,kh,kw)."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(f"expected (c,h,w) and (o,c,kh,kw), got {x.shape} and {kernel.shape}")
    o, kc, kh, kw = kernel.shape
    if kc != x.shape[0]:
        raise DimensionError(f"channel mismatch: input {x.shape[0]}, kernel {kc}")
    patches, (oh, ow) = im2col(x[None], kh, kw, stride, pad)
    out = matmul(kernel.reshape(o, kc * kh * kw), patches)
    return out.reshape(o, oh, ow)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    upstream = np.asarray(upstream)
    if x.shape != upstream.shape:
        raise DimensionError(f"relu_backward shapes differ: {x.shape} vs {upstream.shape}")
    return np.where(x > 0.0, upstream, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stabilized softmax along the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, target: int):
    """Cross-entropy of one logit vector against a class index.

    Returns (loss, grad_logits) with grad = softmax(logits) - onehot(target).
    """
    z = np.asarray(logits, dtype=np.float64).ravel()
    k = z.shape[0]
    target = int(target)
    if not 0 <= target < k:
        raise IndexError(f"target {target} out of range for {k} classes")
    zs = z - np.max(z)
    logsumexp = np.log(np.sum(np.exp(zs)))
    loss = logsumexp - zs[target]
    grad = np.exp(zs - logsumexp)
    grad[target] -= 1.0
    return float(loss), grad


def softmax_cross_entropy_batch(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy over a batch of logit rows.

    Returns (mean loss, dlogits) where dlogits is the gradient of the mean,
    i.e. (softmax - onehot) / batch_size per row.
    """
    z = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64).ravel()
    bsz, k = z.shape
    if targets.shape[0] != bsz:
        raise DimensionError(f"{bsz} logit rows but {targets.shape[0]} targets")
    if targets.min() < 0 or targets.max() >= k:
        raise IndexError(f"targets outside [0, {k})")
    zs = z - np.max(z, axis=1, keepdims=True)
    logsumexp = np.log(np.sum(np.exp(zs), axis=1, keepdims=True))
    losses = logsumexp.ravel() - zs[np.arange(bsz), targets]
    probs = np.exp(zs - logsumexp)
    dlogits = probs.copy()
    dlogits[np.arange(bsz), targets] -= 1.0
    dlogits /= bsz
    return float(np.mean(losses)), dlogits
