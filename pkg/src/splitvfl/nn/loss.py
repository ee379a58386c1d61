import numpy as np

from splitvfl.errors import DataError, ShapeError


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits.

    The log-sum-exp is evaluated in float64; the returned gradient
    ``(softmax - onehot) / batch`` has the dtype of ``logits``.
    """
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise ShapeError(f"logits must be [batch x classes] with batch >= 1, got {logits.shape}")
    labels = np.asarray(labels)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {batch}")
    bad = np.flatnonzero((labels < 0) | (labels >= classes))
    if bad.size:
        r = int(bad[0])
        raise DataError(f"label {labels[r]} at row {r} is outside [0, {classes})")

    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(batch)
    loss = float(np.mean(logsumexp - z[rows, labels]))
    probs = np.exp(z - logsumexp[:, None])
    probs[rows, labels] -= 1.0
    return loss, (probs / batch).astype(logits.dtype)
