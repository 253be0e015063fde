"""Compiled inner loops shared by ``nnet`` (single-example API) and
``trainer`` (full sweeps).

Every public numeric path goes through these functions so that a sweep of
SGD is bit-identical to repeated ``backward`` + ``sgd_step`` calls.
Summation orders are fixed and fastmath is off: results are reproducible
across processes and runs on the same platform.
"""

import math

import numpy as np
from numba import njit

SIGMOID = 0
TANH = 1

LOSS_FLOOR = 1e-300


@njit(cache=True)
def activate(s, act):
    if act == TANH:
        return math.tanh(s)
    # exp overflow for s << 0 yields inf, and 1/(1+inf) == 0.0, so no guard needed
    return 1.0 / (1.0 + math.exp(-s))


@njit(cache=True)
def activation_slope(h, act):
    """Derivative of the activation expressed through its output ``h``."""
    if act == TANH:
        return 1.0 - h * h
    return h * (1.0 - h)


@njit(cache=True)
def hidden_forward(W1, b1, x, act, h):
    n_hidden, n_in = W1.shape
    tail = n_in - n_in % 4
    for i in range(n_hidden):
        # four interleaved partial sums: fixed order, keeps the FPU pipeline busy
        a0 = 0.0
        a1 = 0.0
        a2 = 0.0
        a3 = 0.0
        for j in range(0, tail, 4):
            a0 += W1[i, j] * x[j]
            a1 += W1[i, j + 1] * x[j + 1]
            a2 += W1[i, j + 2] * x[j + 2]
            a3 += W1[i, j + 3] * x[j + 3]
        for j in range(tail, n_in):
            a0 += W1[i, j] * x[j]
        h[i] = activate(((a0 + a1) + (a2 + a3)) + b1[i], act)


@njit(cache=True)
def output_forward(W2, b2, h, z):
    n_out, n_hidden = W2.shape
    for k in range(n_out):
        a = 0.0
        for i in range(n_hidden):
            a += W2[k, i] * h[i]
        z[k] = a + b2[k]


@njit(cache=True)
def softmax_into(z, p):
    m = z[0]
    for k in range(1, z.shape[0]):
        if z[k] > m:
            m = z[k]
    total = 0.0
    for k in range(z.shape[0]):
        p[k] = math.exp(z[k] - m)
        total += p[k]
    for k in range(z.shape[0]):
        p[k] = p[k] / total


@njit(cache=True)
def forward_into(W1, b1, W2, b2, x, act, h, z, p):
    hidden_forward(W1, b1, x, act, h)
    output_forward(W2, b2, h, z)
    softmax_into(z, p)


@njit(cache=True)
def deltas_into(W2, h, p, label, act, dz, dh):
    """Output delta (probs - onehot) and hidden delta for cross-entropy."""
    n_out, n_hidden = W2.shape
    for k in range(n_out):
        dz[k] = p[k]
    dz[label] -= 1.0
    for i in range(n_hidden):
        a = 0.0
        for k in range(n_out):
            a += W2[k, i] * dz[k]
        dh[i] = a * activation_slope(h[i], act)


@njit(cache=True)
def apply_update(W1, b1, W2, b2, x, h, dz, dh, lr):
    # param -= lr * grad, with grad formed first, matching ``sgd_step`` exactly.
    # W2 is read by deltas_into before this runs, so in-place order is safe.
    n_out, n_hidden = W2.shape
    n_in = W1.shape[1]
    for k in range(n_out):
        g = dz[k]
        for i in range(n_hidden):
            W2[k, i] -= lr * (g * h[i])
        b2[k] -= lr * g
    for i in range(n_hidden):
        g = dh[i]
        for j in range(n_in):
            W1[i, j] -= lr * (g * x[j])
        b1[i] -= lr * g


@njit(cache=True)
def sgd_sweep(W1, b1, W2, b2, X, y, order, lr, act):
    """One pass of per-example SGD in the given visiting order.

    Updates the parameters in place and returns the mean pre-update
    cross-entropy over the visited examples.
    """
    n_out, n_hidden = W2.shape
    h = np.empty(n_hidden)
    z = np.empty(n_out)
    p = np.empty(n_out)
    dz = np.empty(n_out)
    dh = np.empty(n_hidden)
    total = 0.0
    for n in order:
        x = X[n]
        label = y[n]
        forward_into(W1, b1, W2, b2, x, act, h, z, p)
        total += -math.log(max(p[label], LOSS_FLOOR))
        deltas_into(W2, h, p, label, act, dz, dh)
        apply_update(W1, b1, W2, b2, x, h, dz, dh, lr)
    if order.shape[0] == 0:
        return 0.0
    return total / order.shape[0]


@njit(cache=True)
def logits_batch(W1, b1, W2, b2, X, act):
    n_out, n_hidden = W2.shape
    out = np.empty((X.shape[0], n_out))
    h = np.empty(n_hidden)
    for n in range(X.shape[0]):
        hidden_forward(W1, b1, X[n], act, h)
        output_forward(W2, b2, h, out[n])
    return out
