"""KGW green-list and EXP key-sequence watermarks with their detectors.

Both schemes expose the same two capabilities: ``sampler()`` returns a hook
for :func:`wslab.lm.generate`, and ``detect(seq, prompt_len)`` scores only the
tokens after the prompt.

Green-list PRF (KGW). The seed for a context is

    s = splitmix64(key mod 2**64)
    for t in previous h token ids: s = splitmix64(s XOR t)

and the green list is the first round(gamma * V) entries of
``numpy.random.default_rng(s).permutation(V)`` (PCG64).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .lm import sample_from, softmax

MASK64 = (1 << 64) - 1
XI_MIN, XI_MAX = 1e-6, 1.0 - 1e-6


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def prf_seed(key: int, prev_tokens) -> int:
    s = splitmix64(key & MASK64)
    for t in prev_tokens:
        s = splitmix64(s ^ (int(t) & MASK64))
    return s


@dataclass(frozen=True)
class DetectionReport:
    watermarked: bool
    statistic: float
    threshold: float
    p_value: float | None
    n_scored: int


@dataclass(frozen=True)
class KgwConfig:
    gamma: float = 0.5
    delta_wm: float = 4.0
    key: int = 15485863
    h: int = 1
    z_threshold: float = 2.0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must be in (0, 1)")
        if self.delta_wm < 0:
            raise ValueError("delta_wm must be >= 0")
        if self.h < 1:
            raise ValueError("h must be >= 1")
        if not self.z_threshold > 0:
            raise ValueError("z_threshold must be positive")


@dataclass(frozen=True)
class ExpConfig:
    key: int = 42
    key_len: int = 64
    perm_trials: int = 200
    p_threshold: float = 0.05

    def __post_init__(self):
        if self.key_len < 1:
            raise ValueError("key_len must be >= 1")
        if not 0 < self.p_threshold < 1:
            raise ValueError("p_threshold must be in (0, 1)")


def _n_green(gamma: float, V: int) -> int:
    return int(math.floor(gamma * V + 0.5))


@lru_cache(maxsize=65536)
def _green_mask(seed: int, V: int, n_green: int) -> np.ndarray:
    mask = np.zeros(V, dtype=bool)
    mask[np.random.default_rng(seed).permutation(V)[:n_green]] = True
    mask.flags.writeable = False
    return mask


def green_mask(prev_tokens, cfg: KgwConfig, V: int) -> np.ndarray:
    return _green_mask(prf_seed(cfg.key, prev_tokens), V, _n_green(cfg.gamma, V))


def kgw_green_set(prev_tokens, cfg: KgwConfig, V: int) -> frozenset[int]:
    return frozenset(np.flatnonzero(green_mask(prev_tokens, cfg, V)).tolist())


def kgw_bias(logits, green, delta_wm: float) -> np.ndarray:
    out = np.array(logits, dtype=np.result_type(np.asarray(logits).dtype, np.float32))
    out[np.fromiter(green, dtype=np.int64)] += delta_wm
    return out


def z_score(green_hits: int, T: int, gamma: float) -> float:
    return (green_hits - gamma * T) / math.sqrt(T * gamma * (1 - gamma))


def kgw_detect(seq, prompt_len: int, cfg: KgwConfig, V: int) -> DetectionReport:
    if not 0 < _n_green(cfg.gamma, V) < V:
        raise ValueError(f"gamma={cfg.gamma} leaves an empty or full green list at V={V}")
    seq = [int(t) for t in seq]
    start = max(prompt_len, cfg.h)
    T = len(seq) - start
    if T < 1:
        raise ValueError("nothing to score")
    hits = sum(bool(green_mask(seq[t - cfg.h:t], cfg, V)[seq[t]]) for t in range(start, len(seq)))
    # the realized green fraction, so the null is centered when gamma * V is not an integer
    z = z_score(hits, T, _n_green(cfg.gamma, V) / V)
    return DetectionReport(z > cfg.z_threshold, z, cfg.z_threshold, None, T)


def exp_sample(probs, xi_t) -> int:
    """argmax_v xi_t[v] ** (1 / probs[v]), computed as log(xi)/p; p = 0 excluded."""
    probs = np.asarray(probs, dtype=np.float64)
    if not np.any(probs > 0):
        raise ValueError("all probabilities are zero")
    xi = np.clip(np.asarray(xi_t, dtype=np.float64), XI_MIN, XI_MAX)
    with np.errstate(divide="ignore"):
        score = np.where(probs > 0, np.log(xi) / np.where(probs > 0, probs, 1.0), -np.inf)
    return int(np.argmax(score))


@lru_cache(maxsize=64)
def key_sequence(key: int, n: int, V: int) -> np.ndarray:
    xi = np.random.default_rng([key & MASK64, 0xE4]).random((n, V))
    xi = np.clip(xi, XI_MIN, XI_MAX)
    xi.flags.writeable = False
    return xi


@lru_cache(maxsize=16)
def _reference_costs(key: int, n: int, V: int, trials: int) -> np.ndarray:
    """-log(1 - xi) tables for ``trials`` independent null key sequences."""
    rng = np.random.default_rng([key & MASK64, 0xD7])
    ref = -np.log1p(-np.clip(rng.random((trials, n, V)), XI_MIN, XI_MAX))
    ref.flags.writeable = False
    return ref


def alignment_cost(tokens, xi: np.ndarray) -> float:
    n = xi.shape[0]
    idx = np.arange(len(tokens)) % n
    return float(np.sum(-np.log1p(-xi[idx, tokens])))


def exp_detect(seq, prompt_len: int, cfg: ExpConfig, V: int) -> DetectionReport:
    if cfg.perm_trials < 1:
        raise ValueError("need at least one permutation trial")
    scored = np.asarray(seq[prompt_len:], dtype=np.int64)
    T = len(scored)
    if T < 1:
        raise ValueError("nothing to score")
    n = cfg.key_len
    obs = alignment_cost(scored, key_sequence(cfg.key, n, V))
    ref = _reference_costs(cfg.key, n, V, cfg.perm_trials)
    idx = np.arange(T) % n
    null = ref[:, idx, scored].sum(axis=1)
    p = (1 + int(np.sum(null >= obs))) / (1 + cfg.perm_trials)
    return DetectionReport(p < cfg.p_threshold, obs, cfg.p_threshold, p, T)


# ---------------------------------------------------------------- scheme objects

class NoWatermark:
    name = "none"

    def __init__(self, vocab_size: int):
        self.V = vocab_size

    def sampler(self):
        def hook(logits, tokens, step, rng):
            return sample_from(softmax(logits), rng)
        return hook

    def detect(self, seq, prompt_len: int) -> DetectionReport:
        T = len(seq) - prompt_len
        if T < 1:
            raise ValueError("nothing to score")
        return DetectionReport(False, 0.0, math.inf, None, T)


class KGW:
    name = "kgw"

    def __init__(self, vocab_size: int, cfg: KgwConfig = KgwConfig()):
        if vocab_size < 4:
            raise ValueError("KGW needs V >= 4")
        self.V, self.cfg = vocab_size, cfg

    def sampler(self):
        cfg, V = self.cfg, self.V

        def hook(logits, tokens, step, rng):
            mask = green_mask(tokens[-cfg.h:], cfg, V)
            biased = np.asarray(logits, dtype=np.float64) + cfg.delta_wm * mask
            return sample_from(softmax(biased), rng)
        return hook

    def detect(self, seq, prompt_len: int) -> DetectionReport:
        return kgw_detect(seq, prompt_len, self.cfg, self.V)


class EXP:
    name = "exp"

    def __init__(self, vocab_size: int, cfg: ExpConfig = ExpConfig()):
        self.V, self.cfg = vocab_size, cfg

    def sampler(self):
        xi = key_sequence(self.cfg.key, self.cfg.key_len, self.V)

        def hook(logits, tokens, step, rng):
            return exp_sample(softmax(logits), xi[step % len(xi)])
        return hook

    def detect(self, seq, prompt_len: int) -> DetectionReport:
        return exp_detect(seq, prompt_len, self.cfg, self.V)


def make_scheme(name: str, vocab_size: int, **params):
    name = name.lower()
    if name == "kgw":
        return KGW(vocab_size, KgwConfig(**params))
    if name == "exp":
        return EXP(vocab_size, ExpConfig(**params))
    if name in ("none", "off"):
        return NoWatermark(vocab_size)
    raise ValueError(f"unknown watermark scheme {name!r}")


def make_sampler(scheme):
    return scheme.sampler()
