"""Monte Carlo backward stochastic cycles between the two slab walls.

A backward cycle starts at (t, x3, v).  It first exits the slab
deterministically at t^1 = t - t_b(x3, v).  After that, each bounce redraws a
velocity from the diffuse-reflection law at the wall and flies to the
opposite wall in time 2 / |v3|.  Only the normal speed matters for the bounce
times, so the horizontal velocity components are not simulated inside cycles.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

CHUNK = 1 << 16
TINY = 1e-300


class InsufficientSamples(ValueError):
    def __init__(self, msg, required):
        super().__init__(msg)
        self.required = required


def sample_diffuse_velocity(rng, wall_sign, size=None):
    """Draw v from sqrt(2 pi) mu(v) |v3| dv on the half-space pointing into the slab.

    ``wall_sign`` is -1 for the wall at x3 = -1 (interior is v3 > 0) and +1
    for the wall at x3 = +1.  v1 and v2 are standard normal.  |v3| is
    Rayleigh(1), drawn by inverse CDF as sqrt(-2 log U) with U in (0, 1].
    """
    if wall_sign not in (-1, 1):
        raise ValueError("wall_sign must be -1 or +1")
    shape = () if size is None else (size,)
    v12 = rng.standard_normal(shape + (2,))
    speed = _rayleigh(rng, shape)
    v3 = -wall_sign * speed
    return np.concatenate([v12, np.asarray(v3)[..., None]], axis=-1)


def _rayleigh(rng, shape):
    r = np.sqrt(-2.0 * np.log1p(-rng.random(shape)))
    bad = r < TINY
    while np.any(bad):
        # U = 1 exactly gives a grazing draw; redraw it
        r = np.where(bad, np.sqrt(-2.0 * np.log1p(-rng.random(shape))), r)
        bad = r < TINY
    return r


@dataclass(frozen=True)
class CycleConfig:
    T0: float
    k_max: int
    samples: int
    seed: int = 0
    x3: float = 0.0
    v: tuple = (0.0, 0.0, 1.0)
    keep_paths: int = 0

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be at least 1")
        if self.T0 < 0:
            raise ValueError("T0 must be non-negative")
        if self.k_max < 1:
            raise ValueError("k_max must be at least 1")
        if not -1.0 <= self.x3 <= 1.0:
            raise ValueError("x3 must lie in [-1, 1]")
        if self.v[2] == 0:
            raise ValueError("grazing initial velocity (v3 = 0)")


@dataclass
class CycleRun:
    config: CycleConfig
    counts: np.ndarray  # counts[j-1] = #samples with t^j > 0, j = 1..k_max
    bounces: np.ndarray = field(repr=False)  # per sample: largest j with t^j > 0
    paths: np.ndarray = field(default=None, repr=False)  # t^j up to the first t^j <= 0, first keep_paths samples

    @property
    def samples(self):
        return self.config.samples

    @property
    def p_hat(self):
        return self.counts / self.samples

    def survival(self, k):
        return self.counts[k - 1] / self.samples

    def confidence_interval(self, level=0.95):
        lo = np.empty(len(self.counts))
        hi = np.empty(len(self.counts))
        for i, c in enumerate(self.counts):
            ci = stats.binomtest(int(c), self.samples).proportion_ci(level, method="exact")
            lo[i], hi[i] = ci.low, ci.high
        return lo, hi


def first_exit_time(x3, v3):
    """Backward exit time t_b with x3 - t_b v3 on a wall."""
    return (x3 + 1.0) / v3 if v3 > 0 else (x3 - 1.0) / v3


def _chunk_seeds(seed, samples):
    nchunks = -(-samples // CHUNK)
    return np.random.SeedSequence(seed).spawn(nchunks)


def _run_chunk(seq, n, t1, k_max, keep):
    rng = np.random.default_rng(seq)
    t = np.full(n, t1)
    counts = np.zeros(k_max, np.int64)
    alive = t > 0
    bounces = alive.astype(np.int64)
    counts[0] = alive.sum()
    paths = np.full((keep, k_max), np.nan) if keep else None
    if keep:
        paths[:, 0] = t[:keep]
    for j in range(1, k_max):
        m = int(alive.sum())
        if m == 0:
            break
        # every sample draws, so the stream is independent of survival patterns
        speed = _rayleigh(rng, (n,))
        t = np.where(alive, t - 2.0 / speed, t)
        alive = alive & (t > 0)
        counts[j] = alive.sum()
        bounces += alive
        if keep:
            paths[:, j] = np.where(bounces[:keep] >= j, t[:keep], np.nan)
    return counts, bounces, paths


def run_cycles(config, threads=1):
    """Simulate ``config.samples`` backward cycles and count survivals t^j > 0.

    Samples are split into fixed chunks, and each chunk owns a substream
    spawned from the seed.  Results do not depend on ``threads``.
    """
    t1 = config.T0 - first_exit_time(config.x3, config.v[2])
    seeds = _chunk_seeds(config.seed, config.samples)
    sizes = [min(CHUNK, config.samples - i * CHUNK) for i in range(len(seeds))]
    keeps = [max(0, min(s, config.keep_paths - i * CHUNK)) for i, s in enumerate(sizes)]
    args = list(zip(seeds, sizes, [t1] * len(sizes), [config.k_max] * len(sizes), keeps))
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(lambda a: _run_chunk(*a), args))
    else:
        parts = [_run_chunk(*a) for a in args]
    counts = np.sum([p[0] for p in parts], axis=0)
    bounces = np.concatenate([p[1] for p in parts])
    paths = None
    if config.keep_paths:
        paths = np.concatenate([p[2] for p in parts if p[2] is not None])
    return CycleRun(config, counts, bounces, paths)


def single_bounce_survival(T0):
    """P(T0 - 2/|v3| > 0) for |v3| ~ Rayleigh(1), equal to exp(-2 / T0^2)."""
    return math.exp(-2.0 / T0**2)


def geometric_envelope(run, min_count=100, tol_sigma=3.0):
    """Check that log p_hat(k) is decreasing and concave or linear in k.

    Uses only k with at least ``min_count`` survivals.  Second differences of
    log p_hat may exceed 0 by at most ``tol_sigma`` standard errors.  Returns
    a dict with the fitted geometric rate and the check outcome.
    """
    c = run.counts.astype(float)
    ks = np.arange(1, len(c) + 1)
    m = c >= min_count
    k, cm = ks[m], c[m]
    lp = np.log(cm / run.samples)
    se = np.sqrt((1 - cm / run.samples) / cm)
    out = {"k": k.tolist(), "log_p": lp.tolist()}
    if len(k) < 3:
        out.update(passed=False, reason="fewer than three resolved k values")
        return out
    decreasing = bool(np.all(np.diff(lp) <= tol_sigma * np.hypot(se[1:], se[:-1])))
    d2 = lp[2:] - 2 * lp[1:-1] + lp[:-2]
    d2_se = np.sqrt(se[2:] ** 2 + 4 * se[1:-1] ** 2 + se[:-2] ** 2)
    concave = bool(np.all(d2 <= tol_sigma * d2_se))
    tail = slice(max(0, len(k) - 5), len(k))
    rate = -np.polyfit(k[tail], lp[tail], 1)[0]
    out.update(decreasing=decreasing, concave=concave, rate=float(rate), passed=bool(decreasing and concave and rate > 0))
    return out


@dataclass
class PersistenceTable:
    rows: list  # (T0, C1, k, p_hat, lo, hi, count)
    envelopes: dict
    C1_C2: list  # (C1, C2_hat)
    best: tuple
    seeds: dict
    samples: int

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["T0", "C1", "k", "p_hat", "ci_low", "ci_high", "count"])
        for r in self.rows:
            w.writerow([repr(float(r[0])), repr(float(r[1])), r[2], repr(float(r[3])), repr(float(r[4])), repr(float(r[5])), r[6]])
        return buf.getvalue()

    def summary(self):
        return {
            "samples": self.samples,
            "seeds": self.seeds,
            "C1_C2": [[float(a), float(b)] for a, b in self.C1_C2],
            "best_C1_C2": [float(x) for x in self.best],
            "envelopes": self.envelopes,
        }

    def to_json(self):
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def estimate_persistence(T0_list, C1_list=(0.1, 0.15, 0.2, 0.25, 0.3), samples=10**6, seed=0, min_count=100, threads=1):
    """Survival table p_hat(k, T0) at k = ceil(C1 T0^{5/4}) with a geometric-envelope check.

    For each C1, C2_hat is the largest C2 with p_hat <= (1/2)^{C2 T0^{5/4}}
    for every T0.  The reported best pair maximises C2_hat.
    """
    rows, envelopes, seeds = [], {}, {}
    per_T0 = {}
    for i, T0 in enumerate(T0_list):
        kk = [max(1, math.ceil(C1 * T0**1.25)) for C1 in C1_list]
        s = int(np.random.SeedSequence([seed, i]).generate_state(1, np.uint64)[0])
        seeds[str(T0)] = s
        run = run_cycles(CycleConfig(float(T0), max(kk), samples, s), threads)
        lo, hi = run.confidence_interval()
        for C1, k in zip(C1_list, kk):
            c = int(run.counts[k - 1])
            if c < min_count:
                p = max(run.counts[k - 1], 1) / samples
                raise InsufficientSamples(
                    f"insufficient samples: T0={T0}, k={k} has {c} survivals; need about {math.ceil(min_count / p)} samples",
                    math.ceil(min_count / p),
                )
            rows.append((T0, C1, k, run.survival(k), lo[k - 1], hi[k - 1], c))
        envelopes[str(T0)] = geometric_envelope(run, min_count)
        per_T0[T0] = (kk, run)
    pairs = []
    for j, C1 in enumerate(C1_list):
        c2 = min(-math.log2(per_T0[T0][1].survival(per_T0[T0][0][j])) / T0**1.25 for T0 in T0_list)
        pairs.append((C1, c2))
    best = max(pairs, key=lambda p: p[1])
    return PersistenceTable(rows, envelopes, pairs, best, seeds, samples)
