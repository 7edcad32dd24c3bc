"""Step-aware neural denoiser with a hand-written backward pass.

The network embeds tokens plus positions, projects the flattened sequence to
a hidden vector, and runs residual MLP blocks conditioned on (t, h) through
adaptive layer normalization: a fused sinusoidal embedding of time and of
log2(step size) predicts per-channel shift, scale, and residual gate for each
block. The output head is zero-initialized, so a fresh model emits logits
that are exactly zero everywhere.

All gradients are computed manually in float64 and are checked against
central differences in the test suite.
"""

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .denoiser import PosteriorModel
from .errors import ConfigError, ValidationError
from .path_data import Vocab
from .util import atomic_write_bytes

LN_EPS = 1e-6
CHECKPOINT_FORMAT = "dfmkit-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NeuralSpec:
    seq_len: int
    vocab_size: int
    mask_id: int | None = None
    embed_dim: int = 16
    hidden_dim: int = 128
    depth: int = 2
    cond_features: int = 16  # sinusoidal features per conditioning signal
    cond_dim: int = 64
    mlp_ratio: int = 2

    @property
    def mlp_dim(self):
        return self.hidden_dim * self.mlp_ratio

    def vocab(self):
        return Vocab(self.vocab_size, mask_id=self.mask_id)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _sin_features(u, n_features):
    """Sinusoidal features of a scalar signal: sin/cos at octave frequencies."""
    u = np.asarray(u, dtype=np.float64)
    k = n_features // 2
    freqs = np.pi * (2.0 ** np.arange(k))
    angles = u[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _normalize_h(h):
    """Map grid step sizes into [0, 1] via log2; the sampling grid is
    logarithmic so this spaces the conditioning signal evenly."""
    return (np.log2(np.maximum(h, 2.0**-20)) + 10.0) / 10.0


def param_shapes(spec):
    L, D, H, C, M = spec.seq_len, spec.embed_dim, spec.hidden_dim, spec.cond_dim, spec.mlp_dim
    shapes = {
        "tok_emb": (spec.vocab_size, D),
        "pos_emb": (L, D),
        "in_w": (L * D, H),
        "in_b": (H,),
        "cond_w": (2 * spec.cond_features, C),
        "cond_b": (C,),
    }
    for k in range(spec.depth):
        shapes[f"blk{k}_ada_w"] = (C, 3 * H)
        shapes[f"blk{k}_ada_b"] = (3 * H,)
        shapes[f"blk{k}_w1"] = (H, M)
        shapes[f"blk{k}_b1"] = (M,)
        shapes[f"blk{k}_w2"] = (M, H)
        shapes[f"blk{k}_b2"] = (H,)
    shapes["out_w"] = (H, L * spec.vocab_size)
    shapes["out_b"] = (L * spec.vocab_size,)
    return shapes


def init_params(spec, rng):
    """Random init; adaptive-norm projections and the output head start at
    zero so every block is initially the identity and logits are exactly 0."""
    shapes = param_shapes(spec)
    p = {}
    for name, shape in shapes.items():
        if name.endswith("_b") or "ada" in name or name.startswith("out_"):
            p[name] = np.zeros(shape)
        elif name in ("tok_emb", "pos_emb"):
            p[name] = 0.02 * rng.standard_normal(shape)
        else:
            p[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
    return p


def forward(spec, params, states, t, h, want_cache=False):
    """Logits (N, L, V) for token rows (N, L) at per-sample (or scalar) t, h."""
    states = np.atleast_2d(np.asarray(states, dtype=np.int64))
    N, L = states.shape
    if L != spec.seq_len:
        raise ConfigError(f"model expects length {spec.seq_len}, got {L}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (N,))
    h = np.broadcast_to(np.asarray(h, dtype=np.float64), (N,))

    emb = params["tok_emb"][states] + params["pos_emb"][None, :, :]
    flat = emb.reshape(N, L * spec.embed_dim)
    x = flat @ params["in_w"] + params["in_b"]

    phi = np.concatenate(
        [_sin_features(t, spec.cond_features), _sin_features(_normalize_h(h), spec.cond_features)],
        axis=1,
    )
    zc = phi @ params["cond_w"] + params["cond_b"]
    c = _silu(zc)

    blocks = []
    for k in range(spec.depth):
        mod = c @ params[f"blk{k}_ada_w"] + params[f"blk{k}_ada_b"]
        shift, scale, gate = np.split(mod, 3, axis=1)
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + LN_EPS)
        xhat = (x - mu) * inv
        m = xhat * (1.0 + scale) + shift
        a = m @ params[f"blk{k}_w1"] + params[f"blk{k}_b1"]
        s = _silu(a)
        y = s @ params[f"blk{k}_w2"] + params[f"blk{k}_b2"]
        if want_cache:
            blocks.append((xhat, inv, scale, gate, m, a, s, y))
        x = x + gate * y

    logits = (x @ params["out_w"] + params["out_b"]).reshape(N, L, spec.vocab_size)
    if not want_cache:
        return logits
    cache = {"states": states, "flat": flat, "phi": phi, "zc": zc, "c": c,
             "blocks": blocks, "x_last": x}
    return logits, cache


def backward(spec, params, cache, dlogits):
    """Gradients of a scalar loss wrt every parameter given dloss/dlogits."""
    states = cache["states"]
    N = states.shape[0]
    g = {}

    dflat_out = dlogits.reshape(N, -1)
    g["out_w"] = cache["x_last"].T @ dflat_out
    g["out_b"] = dflat_out.sum(axis=0)
    dx = dflat_out @ params["out_w"].T

    dc = np.zeros_like(cache["c"])
    for k in range(spec.depth - 1, -1, -1):
        xhat, inv, scale, gate, m, a, s, y = cache["blocks"][k]
        dgate = dx * y
        dy = dx * gate
        g[f"blk{k}_w2"] = s.T @ dy
        g[f"blk{k}_b2"] = dy.sum(axis=0)
        ds = dy @ params[f"blk{k}_w2"].T
        da = ds * _silu_grad(a)
        g[f"blk{k}_w1"] = m.T @ da
        g[f"blk{k}_b1"] = da.sum(axis=0)
        dm = da @ params[f"blk{k}_w1"].T
        dshift = dm
        dscale = dm * xhat
        dxhat = dm * (1.0 + scale)
        dmod = np.concatenate([dshift, dscale, dgate], axis=1)
        g[f"blk{k}_ada_w"] = cache["c"].T @ dmod
        g[f"blk{k}_ada_b"] = dmod.sum(axis=0)
        dc += dmod @ params[f"blk{k}_ada_w"].T
        dnorm = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        dx = dx + dnorm  # residual branch plus normalized branch

    dzc = dc * _silu_grad(cache["zc"])
    g["cond_w"] = cache["phi"].T @ dzc
    g["cond_b"] = dzc.sum(axis=0)

    g["in_w"] = cache["flat"].T @ dx
    g["in_b"] = dx.sum(axis=0)
    demb = (dx @ params["in_w"].T).reshape(N, spec.seq_len, spec.embed_dim)
    g["pos_emb"] = demb.sum(axis=0)
    g["tok_emb"] = np.zeros_like(params["tok_emb"])
    np.add.at(g["tok_emb"], states, demb)
    return g


def sgd_step(params, grads, lr):
    for name, grad in grads.items():
        params[name] -= lr * grad


class NeuralPosterior(PosteriorModel):
    """PosteriorModel wrapper; `with_params` gives a teacher view that shares
    the spec but reads different parameters (an EMA shadow, typically)."""

    def __init__(self, spec, params=None, rng=None):
        super().__init__(spec.vocab())
        self.spec = spec
        if params is None:
            params = init_params(spec, rng or np.random.default_rng(0))
        self.params = params

    def with_params(self, params):
        return NeuralPosterior(self.spec, params=params)

    def logits(self, states, t, h):
        return forward(self.spec, self.params, states, t, h)

    def forward_with_cache(self, states, t, h):
        self.eval_count += 1
        return forward(self.spec, self.params, states, t, h, want_cache=True)

    def backward(self, cache, dlogits):
        return backward(self.spec, self.params, cache, dlogits)


def save_checkpoint(path, spec, params, extra=None):
    """Binary checkpoint: uint32 little-endian header length, JSON header with
    the architecture and parameter shapes, then the raw parameter buffers as
    little-endian float64 in header order."""
    names = sorted(params)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": asdict(spec),
        "params": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [struct.pack("<I", len(blob)), blob]
    chunks.extend(np.ascontiguousarray(params[n], dtype="<f8").tobytes() for n in names)
    atomic_write_bytes(path, b"".join(chunks))


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise ValidationError(f"checkpoint {path} is truncated")
    (hlen,) = struct.unpack("<I", raw[:4])
    try:
        header = json.loads(raw[4 : 4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"checkpoint {path} has a malformed header") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    spec = NeuralSpec(**header["arch"])
    params = {}
    offset = 4 + hlen
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = offset + 8 * n
        if end > len(raw):
            raise ValidationError(f"checkpoint {path} is truncated")
        params[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    expected = param_shapes(spec)
    if {n: tuple(v.shape) for n, v in params.items()} != expected:
        raise ValidationError(f"checkpoint {path} parameter shapes do not match its arch")
    return spec, params, header.get("extra")
