"""From-scratch differentiable building blocks on float64 numpy arrays:
dense, 2-D convolution, max pooling, activations, inverted dropout, binary
cross-entropy, Adam, and a central-difference gradient checker.

All backward passes are hand-derived; no autodiff anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Params = dict[str, np.ndarray]

BCE_CLAMP = 1e-12


# --- activations ---


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, x)


def relu_grad(x: np.ndarray) -> np.ndarray:
    """Derivative w.r.t. the pre-activation input (0 at the kink)."""
    return (x > 0.0).astype(np.float64)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_grad_from_output(s: np.ndarray) -> np.ndarray:
    return s * (1.0 - s)


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_grad_from_output(t: np.ndarray) -> np.ndarray:
    return 1.0 - t * t


# --- dense layer ---


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """y = W @ x + b for a single input vector."""
    if weights.shape != (bias.shape[0], x.shape[0]):
        raise ValueError(
            f"dense shapes inconsistent: W {weights.shape}, x {x.shape}, b {bias.shape}"
        )
    return weights @ x + bias


def dense_backward(
    x: np.ndarray, weights: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (d_x, d_W, d_b) given the upstream gradient on the output."""
    if grad_out.shape[0] != weights.shape[0]:
        raise ValueError(f"grad shape {grad_out.shape} mismatches W {weights.shape}")
    return weights.T @ grad_out, np.outer(grad_out, x), grad_out.copy()


# --- 2-D convolution (cross-correlation with zero padding) ---


def _conv_output_extent(extent: int, k: int, stride: int, padding: int) -> int:
    span = extent + 2 * padding - k
    if span < 0:
        raise ValueError(f"kernel {k} larger than padded input {extent + 2 * padding}")
    if span % stride != 0:
        raise ValueError(
            f"non-integral output extent: ({extent} + 2*{padding} - {k}) / {stride}"
        )
    return span // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Column matrix of all kernel-sized patches, shape (C*kh*kw, H'*W')."""
    c = x.shape[0]
    h_out = _conv_output_extent(x.shape[1], kh, stride, padding)
    w_out = _conv_output_extent(x.shape[2], kw, stride, padding)
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, kh, kw, h_out, w_out), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride]
    return cols.reshape(c * kh * kw, h_out * w_out)


def conv2d_forward(
    x: np.ndarray,
    kernels: np.ndarray,
    bias: np.ndarray,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """Convolve a C x H x W input with K kernels of shape C x kh x kw."""
    k, c, kh, kw = kernels.shape
    if x.shape[0] != c:
        raise ValueError(f"input channels {x.shape[0]} != kernel channels {c}")
    if bias.shape != (k,):
        raise ValueError(f"bias shape {bias.shape} != ({k},)")
    h_out = _conv_output_extent(x.shape[1], kh, stride, padding)
    w_out = _conv_output_extent(x.shape[2], kw, stride, padding)
    cols = _im2col(x, kh, kw, stride, padding)
    out = kernels.reshape(k, -1) @ cols + bias[:, None]
    return out.reshape(k, h_out, w_out)


def conv2d_backward(
    x: np.ndarray,
    kernels: np.ndarray,
    grad_out: np.ndarray,
    stride: int = 1,
    padding: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (d_x, d_kernels, d_bias) for conv2d_forward."""
    k, c, kh, kw = kernels.shape
    h_out, w_out = grad_out.shape[1], grad_out.shape[2]
    grad_mat = grad_out.reshape(k, -1)
    cols = _im2col(x, kh, kw, stride, padding)
    grad_bias = grad_mat.sum(axis=1)
    grad_kernels = (grad_mat @ cols.T).reshape(kernels.shape)
    grad_cols = (kernels.reshape(k, -1).T @ grad_mat).reshape(c, kh, kw, h_out, w_out)
    grad_xp = np.zeros((c, x.shape[1] + 2 * padding, x.shape[2] + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            grad_xp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += grad_cols[:, i, j]
    if padding:
        grad_xp = grad_xp[:, padding:-padding, padding:-padding]
    return grad_xp, grad_kernels, grad_bias


# --- 2x2 max pooling, stride 2 ---


def maxpool2d_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Channel-wise 2x2 window maxima; also returns the argmax index cache.

    Ties route to the first maximal element in row-major scan order.
    """
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d needs even extents, got {h}x{w}")
    windows = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2d_backward(idx: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Route each output gradient back to its window's argmax position."""
    c, h2, w2 = grad_out.shape
    grad_windows = np.zeros((c, h2, w2, 4))
    np.put_along_axis(grad_windows, idx[..., None], grad_out[..., None], axis=-1)
    return grad_windows.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2 * 2, w2 * 2)


# --- inverted dropout ---


def dropout_mask(rng: np.random.Generator, shape: tuple[int, ...], rate: float) -> np.ndarray:
    """Keep mask pre-scaled by 1/(1-rate), so inference needs no rescaling."""
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    return (rng.random(shape) >= rate) / (1.0 - rate)


def dropout(
    x: np.ndarray, rate: float, rng: np.random.Generator | None = None, training: bool = False
) -> np.ndarray:
    """Inverted dropout: identity at inference, masked and rescaled in training."""
    if not (0.0 <= rate < 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    return x * dropout_mask(rng, x.shape, rate)


# --- binary cross-entropy ---


def bce_loss(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean BCE over all elements plus the gradient w.r.t. the probabilities."""
    if probs.shape != labels.shape:
        raise ValueError(f"shape mismatch: probs {probs.shape} vs labels {labels.shape}")
    p = np.clip(probs, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = p.size
    loss = float(-np.sum(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p)) / n)
    grad = (p - labels) / (p * (1.0 - p)) / n
    return loss, grad


def bce_grad_from_logits(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of mean BCE w.r.t. the pre-sigmoid logits: (p - y)/n."""
    return (probs - labels) / probs.size


# --- Adam optimizer ---


@dataclass
class AdamState:
    """First/second moment estimates per named parameter plus the step count."""

    m: Params
    v: Params
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    scratch: Params = field(default_factory=dict, repr=False)  # update work buffers


def adam_init(params: Params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        t=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(params: Params, grads: Params, state: AdamState) -> Params:
    """One bias-corrected Adam update, applied in place; returns params.

    theta -= lr * m_hat / (sqrt(v_hat) + eps) with m_hat = m/(1-b1^t),
    v_hat = v/(1-b2^t); computed allocation-free via per-tensor scratch.
    """
    if set(params) != set(grads):
        raise ValueError(f"param/grad keys differ: {sorted(set(params) ^ set(grads))}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.t
    bias2 = 1.0 - b2**state.t
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ValueError(f"{key}: grad shape {g.shape} != param shape {p.shape}")
        m = state.m[key]
        v = state.v[key]
        scratch = state.scratch.get(key)
        if scratch is None:
            scratch = state.scratch[key] = np.empty_like(p)
        m *= b1
        np.multiply(g, 1.0 - b1, out=scratch)
        m += scratch
        v *= b2
        np.multiply(g, g, out=scratch)
        scratch *= 1.0 - b2
        v += scratch
        # denominator sqrt(v_hat) + eps, then the bias-corrected step
        np.divide(v, bias2, out=scratch)
        np.sqrt(scratch, out=scratch)
        scratch += state.eps
        np.divide(m, scratch, out=scratch)
        scratch *= state.lr / bias1
        p -= scratch
    return params


# --- gradient checking ---


def grad_check(loss_and_grads, params: Params, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_and_grads(params) must return (scalar loss, grads dict) and be
    deterministic (dropout disabled). The relative error per coordinate is
    |g_a - g_fd| / max(1e-8, |g_a| + |g_fd|).
    """
    _, analytic = loss_and_grads(params)
    worst = 0.0
    for key, p in params.items():
        ga = analytic[key]
        if ga.shape != p.shape:
            raise ValueError(f"{key}: analytic grad shape {ga.shape} != param {p.shape}")
        flat = p.reshape(-1)
        ga_flat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            loss_plus, _ = loss_and_grads(params)
            flat[i] = orig - h
            loss_minus, _ = loss_and_grads(params)
            flat[i] = orig
            fd = (loss_plus - loss_minus) / (2.0 * h)
            if not (np.isfinite(fd) and np.isfinite(ga_flat[i])):
                raise ValueError(f"non-finite gradient at {key}[{i}]")
            err = abs(ga_flat[i] - fd) / max(1e-8, abs(ga_flat[i]) + abs(fd))
            worst = max(worst, err)
    return worst


# --- initialization ---


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
