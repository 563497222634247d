"""Brute-force reference implementations used by the unit and acceptance tests.

Each one follows its definition literally, with plain loops, so that it is
easy to check by eye and independent of the vectorised code under test.
"""

import itertools
import math

import numpy as np

from colocate import autograd as ag


# -- tensor ops ---------------------------------------------------------------------------


def conv1d_direct(x, w, b=None):
    """out[n, o, t] = b[o] + sum_{c, j} w[o, c, j] * xpad[n, c, t + j], same-length zero padding."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    bsz, c_in, n = x.shape
    c_out, _, k = w.shape
    left = (k - 1) // 2
    out = np.zeros((bsz, c_out, n))
    for bi in range(bsz):
        for o in range(c_out):
            for t in range(n):
                acc = 0.0 if b is None else float(b[o])
                for c in range(c_in):
                    for j in range(k):
                        src = t + j - left
                        if 0 <= src < n:
                            acc += w[o, c, j] * x[bi, c, src]
                out[bi, o, t] = acc
    return out


# -- segmentation -------------------------------------------------------------------------


def threshold_naive(scores, th):
    return [1 if v > th else -1 for v in scores]


def _reflect_index(i, n):
    # numpy "reflect" (edge sample not repeated), iterated for short inputs
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i = i % period
    return i if i < n else period - i


def _symmetric_index(i, n):
    # numpy "symmetric" (edge sample repeated)
    period = 2 * n
    i = i % period
    return i if i < n else period - 1 - i


def median_naive(values, k):
    """Median of the k-wide centred neighbourhood with reflect padding.

    Inputs too short for a single reflection use the symmetric rule,
    matching the library's documented fallback.
    """
    n = len(values)
    h = k // 2
    index = _reflect_index if n > h else _symmetric_index
    out = []
    for i in range(n):
        neigh = sorted(values[index(i + d, n)] for d in range(-h, h + 1))
        out.append(neigh[h])
    return out


def rising_edges_naive(values):
    return [i for i in range(1, len(values)) if values[i - 1] == -1 and values[i] == 1]


def all_pm1(max_len):
    """Every {-1, +1} sequence of length 1..max_len."""
    for n in range(1, max_len + 1):
        yield from itertools.product((-1, 1), repeat=n)


# -- CPA ----------------------------------------------------------------------------------


def aggregate_naive(rows, a):
    out = []
    for row in rows:
        cols = len(row) // a
        out.append([sum(row[c * a + j] for j in range(a)) for c in range(cols)])
    return np.array(out, dtype=np.float64)


def pearson_naive(x, y):
    n = len(x)
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


# -- gradient checking ----------------------------------------------------------------------


def numeric_grad(f, arr, eps=1e-6):
    """Central differences of the scalar ``f()`` with respect to ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + eps
        up = f()
        arr[i] = old - eps
        down = f()
        arr[i] = old
        grad[i] = (up - down) / (2 * eps)
    return grad


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def check_op(build, inputs, rng):
    """Max relative error between backprop and central differences over all ``inputs``.

    ``build(*tensors)`` returns the op output; the scalar under test is its
    dot product with a fixed random weighting.
    """
    probe = None

    def scalar():
        out = build(*[ag.Tensor(v) for v in inputs]).data
        return float(np.sum(out * probe))

    tensors = [ag.Tensor(v, requires_grad=True) for v in inputs]
    out = build(*tensors)
    probe = rng.standard_normal(out.data.shape)
    out.backward(probe.copy())
    worst = 0.0
    for t, v in zip(tensors, inputs):
        worst = max(worst, rel_error(t.grad, numeric_grad(scalar, v)))
    return worst


def _away_from_zero(rng, shape, gap=0.05):
    v = rng.standard_normal(shape)
    return v + np.sign(v) * gap


def gradient_cases(rng, per_op=3):
    """(name, build, inputs) triples over random small shapes for every differentiable op."""
    cases = []
    for _ in range(per_op):
        b, c, co = (int(v) for v in rng.integers(1, 4, 3))
        n = int(rng.integers(5, 13))
        k = int(rng.integers(2, min(n, 7) + 1))
        cases.append((f"conv1d[{b},{c},{n};k={k}]", lambda x, w, bias: ag.conv1d(x, w, bias),
                      [rng.standard_normal((b, c, n)), rng.standard_normal((co, c, k)), rng.standard_normal(co)]))
        cases.append((f"conv1d_k1[{b},{c},{n}]", lambda x, w, bias: ag.conv1d(x, w, bias),
                      [rng.standard_normal((b, c, n)), rng.standard_normal((co, c, 1)), rng.standard_normal(co)]))
        cases.append((f"conv1d_2d[{c},{n};k={k}]", lambda x, w: ag.conv1d(x, w),
                      [rng.standard_normal((c, n)), rng.standard_normal((co, c, k))]))

        bb = int(rng.integers(2, 4))
        rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)
        cases.append((f"batchnorm_train[{bb},{c},{n}]",
                      lambda x, g, be, c=c: ag.batchnorm1d(x, g, be, np.zeros(c), np.ones(c), training=True),
                      [rng.standard_normal((bb, c, n)), rng.uniform(0.5, 1.5, c), rng.standard_normal(c)]))
        cases.append((f"batchnorm_eval[{b},{c},{n}]",
                      lambda x, g, be, rm=rm, rv=rv: ag.batchnorm1d(x, g, be, rm.copy(), rv.copy(), training=False),
                      [rng.standard_normal((b, c, n)), rng.uniform(0.5, 1.5, c), rng.standard_normal(c)]))

        shape = (b, c, n)
        cases.append((f"relu{shape}", ag.relu, [_away_from_zero(rng, shape)]))
        cases.append((f"add{shape}", ag.add, [rng.standard_normal(shape), rng.standard_normal(shape)]))
        cases.append((f"global_avg_pool{shape}", ag.global_avg_pool, [rng.standard_normal(shape)]))

        d_in, d_out = (int(v) for v in rng.integers(1, 7, 2))
        cases.append((f"affine[{b},{d_in}->{d_out}]", ag.affine,
                      [rng.standard_normal((b, d_in)), rng.standard_normal((d_out, d_in)), rng.standard_normal(d_out)]))
        cases.append((f"affine_1d[{d_in}->{d_out}]", ag.affine,
                      [rng.standard_normal(d_in), rng.standard_normal((d_out, d_in)), rng.standard_normal(d_out)]))

        m = int(rng.integers(2, 6))
        cases.append((f"softmax[{b},{m}]", ag.softmax, [rng.standard_normal((b, m))]))
        target = rng.dirichlet(np.ones(m), size=b)
        cases.append((f"cross_entropy[{b},{m}]", lambda y, t=target: ag.cross_entropy(y, t),
                      [rng.uniform(0.1, 1.0, (b, m))]))
        cases.append((f"softmax_cross_entropy[{b},{m}]", lambda z, t=target: ag.softmax_cross_entropy(z, t),
                      [rng.standard_normal((b, m))]))
    return cases
