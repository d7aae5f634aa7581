"""Synthetic frame-classification corpora standing in for aligned speech data.

Each class owns a mean vector; frames are the class mean plus unit Gaussian
noise.  With ``classes - 1 <= dim`` the means form a regular simplex whose
vertices lie ``separation`` noise standard deviations from the centroid;
otherwise they are random directions of that length.  Labels come in
segments of 3-8 frames so neighbouring frames usually share a state, as in
real alignments.  Features are finally standardised per dimension.
"""
import numpy as np

from .errors import DomainError
from .pfile import FrameTable
from .rng import SeededRng

MIN_SEGMENT = 3
MAX_SEGMENT = 8


def _orthonormal_rows(a):
    """Modified Gram-Schmidt on the rows of ``a``."""
    q = np.array(a, dtype=np.float64)
    for i in range(len(q)):
        for j in range(i):
            q[i] -= (q[i] @ q[j]) * q[j]
        q[i] /= np.linalg.norm(q[i])
    return q


def class_means(classes, dim, separation, means_seed=0):
    rng = SeededRng(means_seed)
    if classes == 1:
        return np.zeros((1, dim))
    if classes <= dim:
        u = _orthonormal_rows(rng.normal((classes, dim)))
        m = u - u.mean(axis=0)
    else:
        m = rng.normal((classes, dim))
    return separation * m / np.linalg.norm(m, axis=1, keepdims=True)


def gen_synth(classes, dim, frames_per_utt, utterances, seed, separation=3.0, means_seed=0,
              standardize=True) -> FrameTable:
    """Generate ``utterances * frames_per_utt`` labelled frames.

    ``means_seed`` fixes the class layout independently of ``seed`` so that
    training and validation corpora drawn with different seeds share it.
    """
    for name, v in (("classes", classes), ("dim", dim), ("frames_per_utt", frames_per_utt),
                    ("utterances", utterances)):
        if v < 1:
            raise DomainError(f"{name} must be positive, got {v}")
    means = class_means(classes, dim, separation, means_seed)
    rng = SeededRng(seed)
    n = utterances * frames_per_utt
    labels = np.empty(n, dtype=np.int64)
    for u in range(utterances):
        t = 0
        while t < frames_per_utt:
            d = MIN_SEGMENT + int(rng.uniform(1)[0] * (MAX_SEGMENT - MIN_SEGMENT + 1))
            c = int(rng.uniform(1)[0] * classes)
            labels[u * frames_per_utt + t:u * frames_per_utt + min(t + d, frames_per_utt)] = c
            t += d
    feats = means[labels] + rng.normal((n, dim))
    if standardize:
        std = feats.std(axis=0)
        feats = (feats - feats.mean(axis=0)) / np.where(std > 0, std, 1.0)
    utt = np.repeat(np.arange(utterances), frames_per_utt)
    frame = np.tile(np.arange(frames_per_utt), utterances)
    # store float32-exact values so the archive round-trips bit-exactly
    return FrameTable(utt, frame, feats.astype(np.float32).astype(np.float64), labels)
