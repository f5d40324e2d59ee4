"""Counter-based random streams (Philox-4x32-10) keyed by
(seed, replicate, particle id, step index).

Every function here is written with explicit ``uint64`` arithmetic so the same
source runs elementwise on numpy arrays and, compiled, on numba scalars. Values
drawn for a given key never depend on the order in which particles or
replicates are processed.
"""
import numpy as np

from ._accel import jit

MASK32 = np.uint64(0xFFFFFFFF)
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_S32 = np.uint64(32)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_ONE = np.uint64(1)
_TWO = np.uint64(2)

TAG_STEP = np.uint64(0)
TAG_LIFETIME = np.uint64(1)

INV32 = 2.0 ** -32
TWO_PI = 2.0 * np.pi


def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten Philox rounds on a 128-bit counter and 64-bit key (32-bit words)."""
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (
            (p1 >> _S32) ^ c1 ^ k0,
            p1 & MASK32,
            (p0 >> _S32) ^ c3 ^ k1,
            p0 & MASK32,
        )
        k0 = (k0 + _W0) & MASK32
        k1 = (k1 + _W1) & MASK32
    return c0, c1, c2, c3


def mix64(z):
    """SplitMix64 finalizer; a bijection on 64-bit words."""
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


def root_particle_id(replicate):
    return mix64(replicate + GOLDEN)


def child_ids(pid):
    return mix64(pid * _TWO + _ONE), mix64(pid * _TWO + _TWO)


def split_seed(seed):
    s = np.uint64(seed)
    return s & MASK32, s >> _S32


def step_draws(k0, k1, pid, step):
    """Standard normal plus two uniforms in (0, 1) for one particle-step."""
    w0, w1, w2, w3 = philox4x32(step & MASK32, TAG_STEP, pid & MASK32, pid >> _S32, k0, k1)
    u1 = (w0 + 0.5) * INV32
    u2 = (w1 + 0.5) * INV32
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(TWO_PI * u2)
    return z, (w2 + 0.5) * INV32, (w3 + 0.5) * INV32


def lifetime_uniform(k0, k1, pid):
    """A 53-bit uniform in (0, 1) reserved for the particle's branching clock."""
    w0, w1, _, _ = philox4x32(MASK32, TAG_LIFETIME, pid & MASK32, pid >> _S32, k0, k1)
    bits = (w0 << np.uint64(21)) ^ (w1 >> np.uint64(11))
    bits = bits & np.uint64((1 << 53) - 1)
    return (bits + 0.5) * 2.0 ** -53


philox4x32_jit = jit(philox4x32)
mix64_jit = jit(mix64)


def derive_seed(seed, *keys):
    """A 64-bit seed for a sub-study, mixed from a base seed and integer keys."""
    z = np.uint64(seed)
    with np.errstate(over="ignore"):
        for key in keys:
            z = mix64(z ^ mix64(np.uint64(key) + GOLDEN))
    return int(z)
