"""Pure-NumPy scoring kernels, used when the compiled extension is absent."""

import numpy as np


def paired_dot(c1, c2, t1, t2):
    """Return c1.t1 + c2.t2 for one ciphertext/trapdoor pair."""
    return float(np.dot(c1, t1) + np.dot(c2, t2))


def paired_gemv(c1, c2, t1, t2, out):
    """out[i] = c1[i].t1 + c2[i].t2 for a (d, v) block of ciphertexts."""
    np.dot(c1, t1, out=out)
    out += c2 @ t2


def accumulate_pair_sums(t1, t2, s1, s2):
    """Column sums of a trapdoor batch added into s1/s2 (pairwise summation)."""
    s1 += t1.sum(axis=0)
    s2 += t2.sum(axis=0)
