"""Small shared helpers: seeded RNG streams, stable softmax, atomic writes."""

import os
import tempfile

import numpy as np

LOG_FLOOR = -60.0  # floor for log-probabilities when turning rows into logits


def spawn_rng(seed, *stream):
    """Independent Generator for (seed, stream...).

    Stream ids make parallel work reproducible: the same (seed, stream) pair
    always yields the same draws no matter how many other streams exist.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def softmax(logits, axis=-1):
    """Numerically stable softmax along `axis`."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def rows_to_logits(rows):
    """Log of probability rows with a finite floor so zero mass stays ~zero
    after exponentiation but never produces -inf arithmetic."""
    return np.log(np.maximum(np.asarray(rows, dtype=np.float64), np.exp(LOG_FLOOR)))


def categorical_from_rows(rows, rng):
    """Draw one index per row from normalized probability rows (..., K)."""
    rows = np.asarray(rows, dtype=np.float64)
    cdf = np.cumsum(rows, axis=-1)
    u = rng.random(rows.shape[:-1])[..., None] * cdf[..., -1:]
    return (cdf < u).sum(axis=-1)


def atomic_write_bytes(path, data):
    """Write bytes to `path` via a temp file + rename so readers never see a
    partial file."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))
