"""Key-addressed treatment assignments.

A candidate assignment is identified by a two-word key: a shared 64-bit
root seed plus the candidate's 64-bit draw index. The mapping from key to
0/1 assignment vector is pinned down to the bit, so assignments never
need to be stored: any holder of the key regenerates the exact vector on
any platform, for any batching or thread schedule.

Bit-level contract
------------------
All arithmetic is modulo 2**64. Let ``C = 0x9E3779B97F4A7C15`` (odd) and
let ``mix64`` be the three-step avalanche

    z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27;  z *= 0x94D049BB133111EB
    z ^= z >> 31

The generator state for key ``(s, m)`` is::

    state = mix64((s XOR (m * C)) + C)

and the key's random stream is ``u_j = mix64(state + j*C)`` for
``j = 1, 2, ...``. For key ``(0, 0)`` the state is ``mix64(C)``, i.e. the
published first output of a splitmix64 sequence seeded with zero,
``0xE220A8397B1DCDAF``.

Bounded integers in ``[0, b)`` are taken from the stream by rejection:
a stream value ``u`` is accepted iff ``u < floor(2**64 / b) * b``,
otherwise the next stream value is tried; the accepted value modulo ``b``
is the sample. The assignment for ``(n_units, n_treated)`` is a partial
Fisher-Yates pass over the index array ``[0 .. n_units)``: at step ``j``
(0-based, ``j < n_treated``) position ``j`` is swapped with position
``j + sample([0, n_units - j))``; the first ``n_treated`` positions are
the treated units.

Draw ``m``'s stream is independent of every other draw's, so any subset
of draws can be generated in any order, on any worker, with identical
results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidDesignError

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_MULT1 = 0xBF58476D1CE4E5B9
_MULT2 = 0x94D049BB133111EB

KEY_WORDS = 2


@dataclass(frozen=True)
class AssignmentKey:
    """Two-word handle regenerating one candidate assignment on demand."""

    root_seed: int
    draw_index: int

    def __post_init__(self):
        for name in ("root_seed", "draw_index"):
            v = getattr(self, name)
            if not (0 <= int(v) <= MASK64):
                raise InvalidDesignError(f"{name} must be an unsigned 64-bit integer, got {v!r}")

    def to_bytes(self) -> bytes:
        """16-byte wire form: two little-endian unsigned 64-bit words."""
        return self.root_seed.to_bytes(8, "little") + self.draw_index.to_bytes(8, "little")

    @classmethod
    def from_bytes(cls, raw: bytes) -> "AssignmentKey":
        if len(raw) != 16:
            raise InvalidDesignError(f"serialized key must be 16 bytes, got {len(raw)}")
        return cls(int.from_bytes(raw[:8], "little"), int.from_bytes(raw[8:], "little"))


@dataclass(frozen=True)
class Assignment:
    """A 0/1 treatment vector with its treated-unit count."""

    bits: np.ndarray
    n_treated: int

    def __post_init__(self):
        object.__setattr__(self, "bits", np.ascontiguousarray(self.bits, dtype=np.int8))
        self.bits.setflags(write=False)
        if int(self.bits.sum()) != self.n_treated:
            raise InvalidDesignError("assignment bits do not sum to n_treated")

    @property
    def n_units(self) -> int:
        return self.bits.shape[0]


def mix64(z: int) -> int:
    """Scalar avalanche mix of a 64-bit word (exactly the documented steps)."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MULT1) & MASK64
    z = ((z ^ (z >> 27)) * _MULT2) & MASK64
    return z ^ (z >> 31)


def _mix64_u64(z: np.ndarray) -> np.ndarray:
    """Vectorized mix64 over a uint64 array (wrapping arithmetic)."""
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= np.uint64(_MULT1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_MULT2)
    z ^= z >> np.uint64(31)
    return z


def derive_state(key: AssignmentKey) -> int:
    """Generator state for a key: ``mix64((seed ^ (draw * C)) + C)``."""
    z = (key.root_seed ^ ((key.draw_index * GOLDEN) & MASK64)) & MASK64
    return mix64((z + GOLDEN) & MASK64)


def _derive_states(root_seed: int, draw_indices: np.ndarray) -> np.ndarray:
    z = np.uint64(root_seed) ^ (draw_indices * np.uint64(GOLDEN))
    return _mix64_u64(z + np.uint64(GOLDEN))


def _check_design(n_units: int, n_treated: int):
    if n_units < 2:
        raise InvalidDesignError(f"n_units must be at least 2, got {n_units}")
    if not (0 < n_treated < n_units):
        raise InvalidDesignError(
            f"n_treated must satisfy 0 < n_treated < n_units, got n_treated={n_treated}, n_units={n_units}"
        )


def assignment_from_key(key: AssignmentKey, n_units: int, n_treated: int) -> Assignment:
    """Regenerate the assignment vector addressed by ``key``.

    Pure function of its inputs; bit-identical to the batched kernel in
    :func:`batch_assignments`.
    """
    _check_design(n_units, n_treated)
    s = derive_state(key)
    perm = list(range(n_units))
    for j in range(n_treated):
        bound = n_units - j
        limit = (2**64 // bound) * bound
        while True:
            s = (s + GOLDEN) & MASK64
            u = mix64(s)
            if u < limit:
                break
        r = j + (u % bound)
        perm[j], perm[r] = perm[r], perm[j]
    bits = np.zeros(n_units, dtype=np.int8)
    bits[perm[:n_treated]] = 1
    return Assignment(bits=bits, n_treated=n_treated)


def _bounded_batch(states: np.ndarray, bound: int) -> np.ndarray:
    """One bounded sample per lane, advancing only lanes that reject."""
    states += np.uint64(GOLDEN)
    u = _mix64_u64(states)
    limit = (2**64 // bound) * bound
    if limit < 2**64:
        lim = np.uint64(limit)
        bad = np.nonzero(u >= lim)[0]
        while bad.size:
            states[bad] += np.uint64(GOLDEN)
            u[bad] = _mix64_u64(states[bad])
            bad = bad[u[bad] >= lim]
    return u % np.uint64(bound)


def batch_assignments(
    root_seed: int,
    draw_indices: np.ndarray,
    n_units: int,
    n_treated: int,
) -> np.ndarray:
    """Regenerate many assignments at once.

    Returns a ``len(draw_indices) x n_units`` int8 matrix whose row ``i``
    equals ``assignment_from_key(AssignmentKey(root_seed, draw_indices[i]),
    n_units, n_treated).bits`` exactly.
    """
    _check_design(n_units, n_treated)
    draws = np.asarray(draw_indices)
    if draws.dtype != np.uint64:
        if draws.size and int(draws.min()) < 0:
            raise InvalidDesignError("draw indices must be nonnegative")
        draws = draws.astype(np.uint64)
    n_draws = draws.shape[0]
    out = np.zeros((n_draws, n_units), dtype=np.int8)
    if n_draws == 0:
        return out
    states = _derive_states(root_seed, draws)
    perm = np.broadcast_to(np.arange(n_units, dtype=np.uint32), (n_draws, n_units)).copy()
    rows = np.arange(n_draws)
    for j in range(n_treated):
        r = _bounded_batch(states, n_units - j).astype(np.int64) + j
        pj = perm[rows, j].copy()
        perm[rows, j] = perm[rows, r]
        perm[rows, r] = pj
    out[rows[:, None], perm[:, :n_treated]] = 1
    return out


def memory_improvement_factor(n_units: int, key_words: int = KEY_WORDS) -> float:
    """Storage ratio of full assignment vectors to keys: ``n_units / key_words``."""
    if key_words < 1:
        raise InvalidDesignError(f"key_words must be at least 1, got {key_words}")
    return n_units / key_words
