"""Numpy implementations of the hot numeric kernels.

This is the pure-Python fallback for the compiled `mtm._ckernels` extension.
Both modules expose the same functions over contiguous float64 arrays; the
active one is chosen in `mtm.backend`.  Shapes are normalized by the callers
(softmax and layer norm always see 2-d row-major inputs).
"""

import numpy as np

NAME = "python"


def softmax_fwd(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(out, grad):
    inner = (grad * out).sum(axis=1, keepdims=True)
    return out * (grad - inner)


def layernorm_fwd(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def layernorm_bwd(grad, xhat, rstd, gain):
    n = xhat.shape[1]
    dxhat = grad * gain
    mean_d = dxhat.mean(axis=1, keepdims=True)
    mean_dx = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - mean_d - xhat * mean_dx)
    dgain = (grad * xhat).sum(axis=0)
    dbias = grad.sum(axis=0)
    return dx, dgain, dbias


def bce_logits_fwd(logits, label):
    # mean over elements of: max(x,0) - x*label + log1p(exp(-|x|))
    x = logits
    per = np.maximum(x, 0.0) - x * label + np.log1p(np.exp(-np.abs(x)))
    return float(per.mean())


def bce_logits_bwd(logits, label, upstream):
    sig = 1.0 / (1.0 + np.exp(-logits))
    return (upstream / logits.size) * (sig - label)


def relu_fwd(x):
    return np.maximum(x, 0.0)


def relu_bwd(x, grad):
    return np.where(x > 0.0, grad, 0.0)


def sigmoid_fwd(x):
    return 1.0 / (1.0 + np.exp(-x))


def sigmoid_bwd(out, grad):
    return grad * out * (1.0 - out)


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, t):
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


def ema_update_arrays(teacher, student, momentum):
    teacher *= momentum
    teacher += (1.0 - momentum) * student
