"""Independent reference implementations shared by the unit and acceptance tests.

Nothing here calls into the code under test except to build layers and
messages; each oracle is the slow, obvious version of what the package does.
"""

import math

import numpy as np

from splitvfl.nn import (
    Conv2d,
    Dense,
    Flatten,
    GlobalAvgPool,
    MaxPool2d,
    ReLU,
    ResidualBlock,
    Stack,
)
from splitvfl.nn.gradcheck import max_relative_error, numeric_gradient
from splitvfl.protocol import wire
from splitvfl.protocol.wire import (
    AlignRequest,
    AlignResponse,
    BatchForward,
    BatchGradient,
    EpochMetrics,
    EvalForward,
    Hello,
    ProtocolErrorMsg,
    Shutdown,
)

# ------------------------------------------------------------------- pca ---

def jacobi_eigh(a, tol=1e-14, max_sweeps=100):
    """Cyclic Jacobi rotations for a symmetric matrix; eigenvalues descending."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = math.sqrt(sum(a[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1))
                c = 1 / math.sqrt(t * t + 1)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q], rot[q, p] = s, -s
                a = rot.T @ a @ rot
                v = v @ rot
    vals = np.diag(a)
    order = np.argsort(-vals, kind="stable")
    return vals[order], v[:, order]


def oracle_pca(x):
    """(variances, components, projections) of the top two components, same sign rule as pca2."""
    xc = x - x.mean(axis=0)
    vals, vecs = jacobi_eigh(xc.T @ xc / (len(x) - 1))
    comps = vecs[:, :2].T.copy()
    for k in range(2):
        if comps[k, np.argmax(np.abs(comps[k]))] < 0:
            comps[k] = -comps[k]
    return vals[:2], comps, xc @ comps.T


FIXTURE_5x4 = np.array([
    [2.5, 2.4, 0.5, 1.0],
    [0.5, 0.7, 1.5, 0.2],
    [2.2, 2.9, 0.4, 1.1],
    [1.9, 2.2, 0.9, 0.7],
    [3.1, 3.0, 0.1, 1.6],
])


# ------------------------------------------------------------- alignment ---

def brute_force(a, b):
    out = []
    for x in a:
        for y in b:
            if x == y:
                out.append(x)
    return sorted(out)


# ------------------------------------------------------------------ wire ---

def random_message(rng: np.random.Generator) -> wire.Message:
    kind = rng.integers(9)
    if kind == 0:
        return Hello(int(rng.integers(0, 2 ** 16)), ["guest", "host"][rng.integers(2)], rng.bytes(32))
    if kind == 1:
        return AlignRequest(tuple(rng.bytes(32) for _ in range(rng.integers(0, 5))))
    if kind == 2:
        ids = tuple(f"id{rng.integers(1e6)}-é{i}" for i in range(rng.integers(0, 5)))
        return AlignResponse(ids, int(rng.integers(0, 2 ** 63)) * 2 + int(rng.integers(2)))
    if kind in (3, 4, 5):
        rank = int(rng.integers(0, 4))
        shape = tuple(int(d) for d in rng.integers(0, 4, rank))
        # raw random bits exercise NaN payloads, infinities, and signed zeros
        t = rng.integers(0, 2 ** 32, int(np.prod(shape)), dtype=np.uint32).view(np.float32).reshape(shape)
        cls = (BatchForward, BatchGradient, EvalForward)[kind - 3]
        return cls(int(rng.integers(0, 2 ** 32)), int(rng.integers(0, 2 ** 32)), t)
    if kind == 6:
        vals = rng.integers(0, 2 ** 64, 3, dtype=np.uint64).view(np.float64)
        return EpochMetrics(int(rng.integers(0, 2 ** 32)), *map(float, vals))
    if kind == 7:
        return Shutdown(int(rng.integers(0, 256)))
    return ProtocolErrorMsg(int(rng.integers(0, 256)), "bad ☃ " * int(rng.integers(0, 3)))


# -------------------------------------------------------------- gradients ---

def single(layer, in_shape, seed=0, dtype=np.float32):
    stack = Stack([layer], in_shape)
    store = stack.init(np.random.default_rng(seed), dtype=dtype)
    return stack, store


def layer_cases():
    """One small instance of every layer kind (fresh objects on each call)."""
    return [
        ("dense", Dense(5, 4), (5,)),
        ("conv2d", Conv2d(2, 2), (2, 4, 4)),
        ("conv2d_stride2", Conv2d(1, 3, stride=2), (1, 5, 5)),
        ("relu", ReLU(), (3, 4)),
        ("maxpool2d", MaxPool2d(), (2, 4, 4)),
        ("global_avg_pool", GlobalAvgPool(), (3, 2, 2)),
        ("flatten", Flatten(), (2, 2, 3)),
        ("residual_block", ResidualBlock(2), (2, 3, 3)),
        ("residual_block_down", ResidualBlock(1, downsample=True), (1, 4, 4)),
    ]


def layer_fd_error(layer, in_shape, seed, eps=1e-3):
    """Finite-difference check of one layer under the loss sum(y * r)."""
    rng = np.random.default_rng(seed)
    stack, store = single(layer, in_shape, seed=seed, dtype=np.float64)
    for p in store:
        p.value[...] = rng.uniform(-1, 1, p.value.shape)
    x = rng.uniform(-1, 1, (2, *in_shape))
    if isinstance(layer, (ReLU, ResidualBlock)):
        # keep pre-activations away from the kink, where differences are undefined
        x = np.where(np.abs(x) < 0.05, 0.05 * np.sign(x + 1e-12), x)
    if isinstance(layer, MaxPool2d):
        # distinct values so the argmax is stable under +/- eps
        x = rng.permutation(np.arange(x.size, dtype=np.float64)).reshape(x.shape) * 0.01
    y, caches = stack.forward(store, x)
    r = rng.standard_normal(y.shape)
    gx = stack.backward(store, caches, r)

    def loss():
        return float(np.sum(stack.forward(store, x)[0] * r))

    pairs = [(p.grad.copy(), numeric_gradient(loss, p.value, eps)) for p in store]
    pairs.append((gx, numeric_gradient(loss, x, eps)))
    return max_relative_error(pairs)
