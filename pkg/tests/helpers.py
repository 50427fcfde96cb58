import math

from contdp.mechanisms import round_half_up


def within_standard_errors(counts, pmf, samples, k=5.0):
    """Per-outcome agreement between sampled counts and an exact PMF; returns the failures."""
    bad = []
    for outcome in set(counts) | set(pmf.support):
        p = float(pmf.prob(outcome))
        freq = counts.get(outcome, 0) / samples
        if p == 0:
            if freq:
                bad.append((outcome, p, freq))
            continue
        se = math.sqrt(p * (1 - p) / samples)
        if abs(freq - p) > k * se + 1e-15:
            bad.append((outcome, p, freq))
    return bad


def flushed_reference(stream, q, gamma, xi):
    """Zero-noise replay of the interval-flushing histogram rule, written without child mechanisms."""
    d = len(stream[0]) if stream else 1
    total = [0] * d
    pending = [0] * d
    since_flush = [0] * d
    out, j = q(tuple(total)), 1
    thresh = gamma(1, j)
    outs = []
    for t, x in enumerate(stream, start=1):
        pending = [a + b for a, b in zip(pending, x)]
        since_flush = [a + b for a, b in zip(since_flush, x)]
        if round_half_up(q(tuple(since_flush))) > thresh:
            total = [a + b for a, b in zip(total, pending)]
            pending = [0] * d
            since_flush = list(total)
            out = q(tuple(total))
            if out > thresh - xi(t, j):
                thresh += gamma(t, j)
            j += 1
            thresh = thresh - gamma(t, j - 1) + gamma(t, j)
        thresh = thresh - gamma(t, j) + gamma(t + 1, j)
        outs.append(out)
    return outs
