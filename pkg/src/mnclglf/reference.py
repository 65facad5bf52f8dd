"""Reference computations written as plain loops, independent of the torch code paths."""
import math


def _unit(row):
    n = math.sqrt(sum(v * v for v in row))
    n = max(n, 1e-12)
    return [v / n for v in row]


def _dot(a, b):
    return math.fsum(x * y for x, y in zip(a, b))


def infonce_termwise(h, p, tau):
    """Mean over blocks and rows of -log(e^{pos/tau} / (e^{pos/tau} + sum_b e^{neg_b/tau}))."""
    n = len(p)
    s = len(h) // n
    pu = [_unit(r) for r in p]
    total = 0.0
    for j in range(s):
        block = [_unit(r) for r in h[j * n:(j + 1) * n]]
        block_loss = 0.0
        for i in range(n):
            pos = _dot(block[i], pu[i]) / tau
            negs = [_dot(block[i], pu[b]) / tau for b in range(n) if b != i]
            top = max([pos] + negs)
            denom = math.exp(pos - top) + math.fsum(math.exp(v - top) for v in negs)
            block_loss += -((pos - top) - math.log(denom))
        total += block_loss / n
    return total / s


def nn_brute_force(queue_rows, queries):
    """Index of the max-cosine stored row per query; the first (lowest) slot wins ties."""
    stored = [_unit(r) for r in queue_rows]
    out = []
    for q in queries:
        qu = _unit(q)
        best, best_i = -math.inf, -1
        for i, r in enumerate(stored):
            sim = _dot(qu, r)
            if sim > best:
                best, best_i = sim, i
        out.append(best_i)
    return out


def ring_contents(capacity, batches, init=None):
    """Simulate the FIFO ring: list of slot contents after inserting ``batches`` in order."""
    slots = list(init) if init is not None else [None] * capacity
    cursor = 0
    for batch in batches:
        for item in batch:
            slots[cursor] = item
            cursor = (cursor + 1) % capacity
    return slots


def sgd_momentum_trajectory(theta0, grad_fn, lrs, momentum, weight_decay):
    """Coupled-L2 heavy-ball SGD: g = f'(theta) + wd*theta; buf = mu*buf + g; theta -= lr*buf."""
    theta, buf, out = theta0, None, []
    for lr in lrs:
        g = grad_fn(theta) + weight_decay * theta
        buf = g if buf is None else momentum * buf + g
        theta = theta - lr * buf
        out.append(theta)
    return out


def lars_trajectory(w0, grad_fn, lrs, momentum, weight_decay, trust, eps):
    """LARS on a list-of-floats parameter treated as one layer.

    d = g + wd*w; d *= trust*|w|/(|d|+eps) unless either norm is zero;
    buf = mu*buf + d; w -= lr*buf.
    """
    w = list(w0)
    buf = [0.0] * len(w)
    out = []
    for lr in lrs:
        d = [g + weight_decay * x for g, x in zip(grad_fn(w), w)]
        wn = math.sqrt(math.fsum(x * x for x in w))
        dn = math.sqrt(math.fsum(x * x for x in d))
        if wn > 0 and dn > 0:
            d = [x * trust * wn / (dn + eps) for x in d]
        buf = [momentum * b + x for b, x in zip(buf, d)]
        w = [x - lr * b for x, b in zip(w, buf)]
        out.append(list(w))
    return out
