"""Source distributions, conditional-path sampling, and the two desk-scale
datasets (checkerboard pairs and a packed character corpus)."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ValidationError
from .kinetics import kappa_eval

SOURCE_KINDS = ("uniform", "mask")


@dataclass(frozen=True)
class Vocab:
    """Token id space; mask_id is present iff the source distribution is mask.

    The mask token never appears in clean target data.
    """

    size: int
    mask_id: int | None = None

    def __post_init__(self):
        if self.size < 1:
            raise ValidationError(f"vocab size must be >= 1, got {self.size}")
        if self.mask_id is not None and not (0 <= self.mask_id < self.size):
            raise ValidationError(
                f"mask_id {self.mask_id} outside vocabulary of size {self.size}"
            )

    @property
    def n_non_mask(self):
        return self.size - (1 if self.mask_id is not None else 0)

    def non_mask_ids(self):
        ids = np.arange(self.size)
        if self.mask_id is not None:
            ids = ids[ids != self.mask_id]
        return ids


@dataclass(frozen=True)
class SourceSpec:
    kind: str = "uniform"

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise ValidationError(f"unknown source kind {self.kind!r}")


@dataclass(frozen=True)
class CheckerboardSpec:
    """Two coordinates on a grid x grid lattice with alternating valid blocks.

    The first coordinate is uniform; the second is uniform over the blocks
    whose index parity matches the first coordinate's block.
    """

    grid: int = 128
    block: int = 32

    def __post_init__(self):
        if self.grid % self.block != 0:
            raise ValidationError("block must divide grid")

    @property
    def length(self):
        return 2

    def vocab(self, masked=False):
        if masked:
            return Vocab(self.grid + 1, mask_id=self.grid)
        return Vocab(self.grid)

    def valid_values(self, first_coord):
        """All second-coordinate values compatible with the first coordinate."""
        parity = (first_coord // self.block) % 2
        blocks = np.arange(self.grid // self.block)
        keep = blocks[blocks % 2 == parity]
        return (keep[:, None] * self.block + np.arange(self.block)[None, :]).ravel()

    def valid_mask(self, x1, x2):
        """Boolean parity-match predicate, elementwise over arrays."""
        return ((np.asarray(x1) // self.block) % 2) == ((np.asarray(x2) // self.block) % 2)


def sample_source(spec, vocab, L, rng, n=None):
    """Draw from the source: all-mask rows, or i.i.d. uniform non-mask tokens.

    Returns shape (L,) when n is None, else (n, L).
    """
    shape = (L,) if n is None else (int(n), L)
    if spec.kind == "mask":
        if vocab.mask_id is None:
            raise ConfigError("mask source requires a vocab with mask_id")
        return np.full(shape, vocab.mask_id, dtype=np.int64)
    ids = vocab.non_mask_ids()
    return ids[rng.integers(0, len(ids), size=shape)]


def sample_conditional_xt(x0, x1, t, scheduler, rng):
    """Per position independently: the target token with probability kappa(t),
    else the source token. t may be a scalar or one value per leading row."""
    x0 = np.asarray(x0)
    x1 = np.asarray(x1)
    if x0.shape != x1.shape:
        raise ValidationError(f"shape mismatch {x0.shape} vs {x1.shape}")
    kappa, _ = kappa_eval(scheduler, t)
    kappa = np.asarray(kappa, dtype=np.float64)
    if kappa.ndim > 0:
        kappa = kappa.reshape(kappa.shape + (1,) * (x0.ndim - kappa.ndim))
    take_target = rng.random(x0.shape) < kappa
    return np.where(take_target, x1, x0)


def checkerboard_sample(spec, rng, n=None):
    """Target pairs: first coordinate uniform, second uniform over the blocks
    of matching parity. Returns (2,) or (n, 2)."""
    m = 1 if n is None else int(n)
    x1 = rng.integers(0, spec.grid, size=m)
    n_blocks = spec.grid // spec.block
    half = n_blocks // 2
    parity = (x1 // spec.block) % 2
    # pick a block of the right parity, then a cell inside it
    block = parity + 2 * rng.integers(0, half, size=m)
    x2 = block * spec.block + rng.integers(0, spec.block, size=m)
    out = np.stack([x1, x2], axis=1).astype(np.int64)
    return out[0] if n is None else out


def checkerboard_support(spec):
    """Explicit target support: all valid pairs, equal probability each."""
    pairs = []
    for a in range(spec.grid):
        for b in spec.valid_values(a):
            pairs.append((a, b))
    seqs = np.asarray(pairs, dtype=np.int64)
    probs = np.full(len(pairs), 1.0 / len(pairs))
    return seqs, probs


def pack_corpus(documents, eos, L):
    """Concatenate each document followed by eos into one stream, then split
    into consecutive blocks of exactly L, dropping the final partial block."""
    if L < 2:
        raise ValidationError(f"block length must be >= 2, got {L}")
    stream = []
    for doc in documents:
        stream.extend(int(x) for x in doc)
        stream.append(int(eos))
    n_blocks = len(stream) // L
    arr = np.asarray(stream[: n_blocks * L], dtype=np.int64)
    return [arr[i * L : (i + 1) * L] for i in range(n_blocks)]


def corrupt(x, fraction, vocab, rng):
    """Replace round(fraction * L) distinct positions with a uniform draw over
    non-mask ids excluding the original token.

    Returns (corrupted copy, boolean changed mask).
    """
    x = np.asarray(x)
    if not (0.0 <= fraction <= 1.0):
        raise ValidationError(f"fraction must lie in [0, 1], got {fraction}")
    L = x.shape[0]
    n_change = int(np.floor(fraction * L + 0.5))
    changed = np.zeros(L, dtype=bool)
    out = x.copy()
    if n_change == 0:
        return out, changed
    if vocab.n_non_mask <= 1:
        raise ValidationError("cannot replace tokens in a vocabulary of one")
    positions = rng.choice(L, size=n_change, replace=False)
    changed[positions] = True
    ids = vocab.non_mask_ids()
    # draw from the non-mask ids minus the original via an index shift
    draws = rng.integers(0, len(ids) - 1, size=n_change)
    original_rank = np.searchsorted(ids, x[positions])
    draws = draws + (draws >= original_rank)
    out[positions] = ids[draws]
    return out, changed


class CharVocabulary:
    """Character-level codec for desk-scale text: one document per line,
    sorted unique characters plus a reserved EOS (and optional mask)."""

    def __init__(self, chars, with_mask=False):
        self.chars = sorted(set(chars))
        self.eos_id = len(self.chars)
        self.mask_id = self.eos_id + 1 if with_mask else None
        size = self.eos_id + 1 + (1 if with_mask else 0)
        self.vocab = Vocab(size, mask_id=self.mask_id)
        self._index = {c: i for i, c in enumerate(self.chars)}

    @classmethod
    def from_text(cls, text, with_mask=False):
        return cls((c for line in text.splitlines() for c in line), with_mask=with_mask)

    def encode(self, line):
        try:
            return [self._index[c] for c in line]
        except KeyError as exc:
            raise ValidationError(f"character {exc.args[0]!r} not in vocabulary") from exc

    def decode(self, ids):
        out = []
        for i in ids:
            if i == self.eos_id:
                out.append("¶")  # pilcrow marks document boundaries
            elif self.mask_id is not None and i == self.mask_id:
                out.append("░")  # light shade marks mask
            else:
                out.append(self.chars[i])
        return "".join(out)


def load_corpus_blocks(text, L, with_mask=False):
    """Encode one-document-per-line text and pack it into L-token blocks."""
    codec = CharVocabulary.from_text(text, with_mask=with_mask)
    docs = [codec.encode(line) for line in text.splitlines() if line]
    blocks = pack_corpus(docs, codec.eos_id, L)
    return codec, blocks


def export_checkerboard_csv(samples):
    """Two-column CSV text for checkerboard samples."""
    lines = ["x1,x2"]
    for a, b in np.asarray(samples).reshape(-1, 2):
        lines.append(f"{int(a)},{int(b)}")
    return "\n".join(lines) + "\n"
