"""Laplace mechanism over token embeddings.

The mechanism maps a token x to E(x) + (L_1, ..., L_d) with L_i ~ Laplace(0, delta).
Its L1 sensitivity is the largest L1 distance between two rows of E, and the
privacy budget follows as epsilon = sensitivity / delta.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .lm import container_bytes


@dataclass(frozen=True)
class LaplaceMechanism:
    delta: float
    sensitivity: float

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("noise scale delta must be positive")
        if self.sensitivity < 0:
            raise ValueError("sensitivity must be nonnegative")

    @property
    def epsilon(self) -> float:
        return privacy_budget(self.sensitivity, self.delta)

    def density(self, o, x):
        """Density of the scalar output o given input x."""
        return np.exp(-np.abs(np.asarray(o) - x) / self.delta) / (2 * self.delta)


def sensitivity(E) -> float:
    """max_{x, x'} ||E[x] - E[x']||_1 over all row pairs."""
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] < 2:
        raise ValueError("sensitivity undefined for fewer than two rows")
    best = 0.0
    # row-blocked to bound the V x V x d temporary
    step = max(1, 2 ** 20 // max(1, E.shape[0] * E.shape[1]))
    for i in range(0, E.shape[0], step):
        dist = np.abs(E[i:i + step, None, :] - E[None, :, :]).sum(axis=-1)
        best = max(best, float(dist.max()))
    return best


def _decimal_quotient(a: float, b: float) -> float:
    # a / b on the shortest decimal forms, rounded once: 0.3 / 0.05 gives 6.0, not 5.999999999999999
    a, b = float(a), float(b)
    try:
        return float(Fraction(repr(a)) / Fraction(repr(b)))
    except (OverflowError, ValueError):  # out of float range, or inf / nan inputs
        return a / b


def privacy_budget(sensitivity: float, delta: float) -> float:
    """epsilon = sensitivity / delta."""
    if not delta > 0:
        raise ValueError("noise scale delta must be positive")
    return _decimal_quotient(sensitivity, delta)


def noise_scale(sensitivity: float, epsilon: float) -> float:
    """delta = sensitivity / epsilon."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return _decimal_quotient(sensitivity, epsilon)


def sample_laplace(dim, delta: float, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. Laplace(0, delta) by inverse CDF: -delta * sign(u) * ln(1 - 2|u|)."""
    if not delta > 0:
        raise ValueError("noise scale delta must be positive")
    u = rng.random(dim) - 0.5
    # u = -0.5 would give ln(0)
    u = np.where(u == -0.5, np.nextafter(-0.5, 0.0), u)
    return -delta * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def pair_rng(seed: int, pair_id: int, stream: int = 0) -> np.random.Generator:
    """Independent generator per (seed, pair), so results don't depend on worker count."""
    return np.random.default_rng([seed, pair_id, stream])


@dataclass
class NoisyItem:
    pair_id: int
    tokens: np.ndarray        # clean prompt + response ids
    embeddings: np.ndarray    # (len(tokens), d) float32, noised once
    prompt_len: int


@dataclass
class NoisyEmbeddingDataset:
    items: list[NoisyItem]
    noise_seed: int
    delta: float
    sensitivity: float = 0.0

    @property
    def epsilon(self) -> float:
        return privacy_budget(self.sensitivity, self.delta)

    def __len__(self):
        return len(self.items)

    def training_items(self, mask_prompt: bool = True):
        """(noisy inputs, clean shifted targets) pairs for ``lm.train``."""
        out = []
        for it in self.items:
            targets = it.tokens[1:].astype(np.int64).copy()
            if mask_prompt:
                targets[:max(0, it.prompt_len - 1)] = -1
            out.append((it.embeddings[:-1], targets))
        return out

    def to_bytes(self) -> bytes:
        header = {"kind": "noisy_dataset", "noise_seed": int(self.noise_seed), "delta": float(self.delta),
                  "sensitivity": float(self.sensitivity),
                  "pairs": [[int(it.pair_id), int(it.prompt_len), [int(t) for t in it.tokens]] for it in self.items]}
        return container_bytes(header, {f"pair{it.pair_id}": it.embeddings for it in self.items})

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def perturb_dataset(pairs, E_adv, delta: float, noise_seed: int, sensitivity_value: float | None = None
                    ) -> NoisyEmbeddingDataset:
    """Look up every token of prompt+response in ``E_adv`` and add Laplace noise once.

    One independent d-vector per token position; the generator for pair i is
    derived from (noise_seed, i).
    """
    E = np.asarray(E_adv)
    V = E.shape[0]
    if sensitivity_value is None:
        sensitivity_value = sensitivity(E)
    items = []
    for pid, (prompt, response) in enumerate(pairs):
        toks = np.asarray(list(prompt) + list(response), dtype=np.int64)
        if toks.size and (toks.min() < 0 or toks.max() >= V):
            raise ValueError(f"pair {pid}: token id out of range for V={V}")
        rng = pair_rng(noise_seed, pid)
        noise = sample_laplace((len(toks), E.shape[1]), delta, rng)
        emb = (E[toks].astype(np.float64) + noise).astype(np.float32)
        items.append(NoisyItem(pid, toks, emb, len(prompt)))
    return NoisyEmbeddingDataset(items, noise_seed, delta, sensitivity_value)


def density_ratio_bound_holds(x: float, x_prime: float, outputs, delta: float) -> bool:
    """Check f(o | x) / f(o | x') <= exp(|x - x'| / delta) at every output o."""
    mech = LaplaceMechanism(delta, abs(x - x_prime))
    o = np.asarray(outputs, dtype=np.float64)
    ratio = mech.density(o, x) / mech.density(o, x_prime)
    return bool(np.all(ratio <= np.exp(mech.epsilon) * (1 + 1e-12)))
