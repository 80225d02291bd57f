"""Independent reference computations used as test oracles.

Nothing here imports the code paths it is used to check: probabilities are
computed with plain numpy softmax, label windows by direct index
arithmetic on the raw stream, and Markov-chain MI from exact matrix powers.
"""

import math

import numpy as np

IGNORE = -100


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def ce(z, y):
    return -math.log(softmax(z)[y])


def kl_uniform_bag(z, bag):
    """KL(t || softmax(z)) with t uniform over the (multi)set ``bag``."""
    p = softmax(z)
    bag = [b for b in bag if b != IGNORE]
    t = np.bincount(bag, minlength=len(p)) / len(bag)
    nz = t > 0
    return float((t[nz] * np.log(t[nz] / p[nz])).sum())


def composite_nll(z, bag):
    p = softmax(z)
    members = sorted({b for b in bag if b != IGNORE})
    return -math.log(sum(p[b] for b in members))


def label_bag_oracle(stream, start, s, l):
    """Label bags for the window of ``l * s`` inputs beginning at ``start``.

    Bag ``j`` lists stream positions ``start + j*s + s .. start + j*s + 2s - 1``
    that lie inside the labelled region (inputs plus one lookahead token).
    """
    last_label = start + l * s  # position of the final next-token label
    out = np.full((l, s), IGNORE, dtype=np.int64)
    for j in range(l):
        for i in range(s):
            pos = start + j * s + s + i
            if pos <= last_label:
                out[j, i] = stream[pos]
    return out


def reference_next_token_batches(stream, rows, length, steps):
    """Plain sequential next-token batching, written from scratch."""
    pos = 0
    out = []
    for _ in range(steps):
        xs, ys = [], []
        for _ in range(rows):
            if pos + length + 1 > len(stream):
                pos = 0
            xs.append(stream[pos:pos + length])
            ys.append(stream[pos + 1:pos + length + 1])
            pos += length
        out.append((np.array(xs), np.array(ys)))
    return out


def lifted_chain(table, order, vocab):
    """Transition matrix over order-k contexts, base-V with the oldest digit first."""
    n = vocab ** order
    q = np.zeros((n, n))
    radix = vocab ** (order - 1)
    for c in range(n):
        for tok in range(vocab):
            q[c, (c % radix) * vocab + tok] += table[c, tok]
    return q


def stationary(q):
    w, v = np.linalg.eig(q.T)
    i = int(np.argmin(np.abs(w - 1)))
    pi = np.real(v[:, i])
    return pi / pi.sum()


def markov_mi_exact(table, order, vocab, distances):
    """Exact MI(x_t ; x_{t+d}) in nats for a stationary order-k chain."""
    q = lifted_chain(table, order, vocab)
    pi = stationary(q)
    last = np.arange(vocab ** order) % vocab
    onehot = np.eye(vocab)[last]  # context -> its newest token
    px = pi @ onehot
    out = []
    qd = np.eye(len(pi))
    d_prev = 0
    for d in distances:
        qd = qd @ np.linalg.matrix_power(q, d - d_prev)
        d_prev = d
        joint = onehot.T @ (pi[:, None] * qd) @ onehot
        nz = joint > 0
        out.append(float((joint[nz] * np.log(joint[nz] / np.outer(px, px)[nz])).sum()))
    return np.array(out)


def power_law(d, c0, a, k):
    return c0 + a * np.asarray(d, dtype=np.float64) ** k
