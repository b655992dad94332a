"""Pure-numpy fallback for the compiled kernels."""
import numpy as np

# Rows per chunk keep the n x chunk x d temporaries near a few MB.
_CHUNK_ELEMS = 1 << 19


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gated_sums(P1, Q1, P2, Q2, w):
    n, d = P1.shape
    m = Q1.shape[0]
    out = np.empty((n, m))
    rows = max(1, _CHUNK_ELEMS // max(1, m * d))
    for start in range(0, n, rows):
        sl = slice(start, start + rows)
        gate = np.tanh(P1[sl, None, :] + Q1[None, :, :])
        gate *= sigmoid(P2[sl, None, :] + Q2[None, :, :])
        # Fixed left-to-right sum over k: a BLAS product would pick its
        # summation order from the shape, so the same entry computed in a
        # row slice and in a full block could differ in the last bit.
        acc = gate[..., 0] * w[0] if d else np.zeros(gate.shape[:2])
        for k in range(1, d):
            acc += gate[..., k] * w[k]
        out[sl] = acc
    return out
