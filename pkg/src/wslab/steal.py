"""Provider/adversary roles of the embedding-noise stealing attack.

The adversary only ever receives ``ProviderService.query`` (prompt, seed) ->
continuation; nothing else of the provider is passed to adversary-side
functions.
"""
from __future__ import annotations

import dataclasses
import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ldp, lm
from .watermark import DetectionReport

NOISE_LOCATIONS = ("embedding_train", "pre_logits", "embedding_inference")


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from a tuple of nonnegative ints."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


@dataclass
class ProviderService:
    model: lm.ModelParams
    scheme: object
    gen_len: int = 32
    serve_seed: int = 0

    def query(self, prompt, rng_seed: int) -> tuple[int, ...]:
        return provider_query(self, prompt, rng_seed)


def provider_query(svc: ProviderService, prompt, rng_seed: int) -> tuple[int, ...]:
    """Watermarked continuation of ``prompt`` (prompt itself not included)."""
    prompt = list(prompt)
    if not prompt:
        raise ValueError("empty prompt")
    full = lm.generate(svc.model, prompt, svc.gen_len, svc.scheme.sampler(),
                       derive_seed(svc.serve_seed, rng_seed))
    return tuple(full[len(prompt):])


def _call(args):
    fn, a, b = args
    return fn(a, b)


def _map(fn, a_list, b_list, workers: int):
    if workers <= 1 or len(a_list) < 2:
        return [fn(a, b) for a, b in zip(a_list, b_list)]
    with ProcessPoolExecutor(workers) as ex:
        return list(ex.map(_call, [(fn, a, b) for a, b in zip(a_list, b_list)], chunksize=8))


def collect_pairs(query: Callable, prompts: Sequence, query_seed: int, workers: int = 1):
    """One (prompt, response) pair per prompt; prompt i is served with seed (query_seed, i)."""
    if not prompts:
        raise ValueError("no prompts")
    prompts = [tuple(int(t) for t in p) for p in prompts]
    seeds = [derive_seed(query_seed, i) for i in range(len(prompts))]
    responses = _map(query, prompts, seeds, workers)
    return list(zip(prompts, (tuple(r) for r in responses)))


@dataclass(frozen=True)
class AdversaryConfig:
    surrogate: lm.ModelConfig
    train: lm.TrainConfig
    delta: float = 0.01
    noise_location: str = "embedding_train"
    n_queries: int = 500
    query_seed: int = 1
    noise_seed: int = 2
    init_seed: int = 3
    mask_prompt: bool = True
    pretrain_epochs: int = 0
    freeze_embedding: bool = True

    def __post_init__(self):
        if self.noise_location not in NOISE_LOCATIONS:
            raise ValueError(f"noise_location must be one of {NOISE_LOCATIONS}")
        if self.n_queries < 1:
            raise ValueError("n_queries must be >= 1")
        if not self.delta > 0:
            raise ValueError("delta must be positive")


@dataclass
class TrainReport:
    noise_location: str
    delta: float
    sensitivity: float
    epsilon: float
    loss_curve: list[float]
    dataset_digest: str
    clean_digest: str
    pretrain_curve: list[float] = field(default_factory=list)


def clean_dataset(pairs, E) -> ldp.NoisyEmbeddingDataset:
    """Same container as the noisy dataset, with exact lookups."""
    E = np.asarray(E)
    items = []
    for pid, (prompt, response) in enumerate(pairs):
        toks = np.asarray(list(prompt) + list(response), dtype=np.int64)
        items.append(ldp.NoisyItem(pid, toks, E[toks].astype(np.float32), len(prompt)))
    return ldp.NoisyEmbeddingDataset(items, noise_seed=0, delta=0.0)


def _pre_logit_noise(pairs, d, delta, seed):
    out = []
    for pid, (prompt, response) in enumerate(pairs):
        n = len(prompt) + len(response) - 1
        out.append(ldp.sample_laplace((n, d), delta, ldp.pair_rng(seed, pid, stream=1)).astype(np.float32))
    return out


def pretrain_surrogate(adv: AdversaryConfig, seqs=None):
    """Fresh surrogate, optionally trained for ``adv.pretrain_epochs`` on clean text."""
    model = lm.init_model(adv.surrogate, adv.init_seed)
    if not (adv.pretrain_epochs and seqs):
        return model, []
    cfg = dataclasses.replace(adv.train, epochs=adv.pretrain_epochs, seed=derive_seed(adv.train.seed, 7))
    return lm.train(model, lm.lm_dataset(seqs), cfg)


def finetune_surrogate(adv: AdversaryConfig, pairs, surrogate: lm.ModelParams | None = None,
                       pretrain_seqs=None):
    """Fine-tune a freshly initialized surrogate on harvested pairs.

    ``embedding_train`` trains on one-shot noisy embeddings (the embedding table
    itself is then not updated), ``pre_logits`` trains on clean tokens with a
    cached Laplace vector added to the final hidden state, and
    ``embedding_inference`` trains clean and defers noise to generation.
    """
    if not pairs:
        raise ValueError("no training pairs")
    pre_curve = []
    if surrogate is None:
        surrogate, pre_curve = pretrain_surrogate(adv, pretrain_seqs)

    E = surrogate.embedding
    sens = ldp.sensitivity(E)
    clean = clean_dataset(pairs, E)
    loc = adv.noise_location
    if loc == "embedding_train":
        data = ldp.perturb_dataset(pairs, E, adv.delta, adv.noise_seed, sens)
        items = data.training_items(adv.mask_prompt)
        digest = data.digest()
    else:
        items = []
        for prompt, response in pairs:
            seq = np.asarray(list(prompt) + list(response), dtype=np.int64)
            targets = seq[1:].copy()
            if adv.mask_prompt:
                targets[:max(0, len(prompt) - 1)] = -1
            items.append((seq[:-1], targets))
        if loc == "pre_logits":
            noise = _pre_logit_noise(pairs, adv.surrogate.d, adv.delta, adv.noise_seed)
            items = [(x, t, n) for (x, t), n in zip(items, noise)]
            digest = hashlib.sha256(clean.to_bytes() + b"".join(n.tobytes() for n in noise)).hexdigest()
        else:
            digest = clean.digest()
    train_cfg = adv.train
    if adv.freeze_embedding:
        train_cfg = dataclasses.replace(train_cfg, frozen=tuple({*train_cfg.frozen, "embedding"}))
    trained, curve = lm.train(surrogate, items, train_cfg)
    report = TrainReport(loc, adv.delta, sens, ldp.privacy_budget(sens, adv.delta), curve,
                         digest, clean.digest(), pre_curve)
    return trained, report


@dataclass
class AuditResult:
    attack_sr: float
    per_prompt: list[DetectionReport]
    n_test: int
    outputs: list[tuple[int, ...]] = field(default_factory=list, repr=False)

    @property
    def flags(self) -> int:
        return sum(r.watermarked for r in self.per_prompt)


def attack_success_rate(reports: Sequence[DetectionReport]) -> float:
    """1 - (flagged outputs) / N_test."""
    n = len(reports)
    if n == 0:
        raise ValueError("no test outputs")
    return (n - sum(bool(r.watermarked) for r in reports)) / n


class _SuspectGen:
    def __init__(self, model, gen_len, noise):
        self.model, self.gen_len, self.noise = model, gen_len, noise

    def __call__(self, prompt, seed):
        return tuple(lm.generate(self.model, prompt, self.gen_len, lm.multinomial_sampler, seed,
                                 embedding_noise=self.noise))


def audit_suspect(svc: ProviderService, suspect: lm.ModelParams, suspect_mode: str,
                  test_prompts: Sequence, gen_seed: int, delta: float = 0.0, workers: int = 1) -> AuditResult:
    """Generate y_j = suspect(x_j) and run the provider's detector on each."""
    if not test_prompts:
        raise ValueError("no test prompts")
    noise = delta if suspect_mode == "embedding_inference" else 0.0
    prompts = [tuple(int(t) for t in p) for p in test_prompts]
    seeds = [derive_seed(gen_seed, j) for j in range(len(prompts))]
    outputs = _map(_SuspectGen(suspect, svc.gen_len, noise), prompts, seeds, workers)
    reports = [svc.scheme.detect(list(y), len(p)) for p, y in zip(prompts, outputs)]
    return AuditResult(attack_success_rate(reports), reports, len(reports), outputs)


def nearest_neighbors(E) -> np.ndarray:
    """For each row, the index of the closest other row under L2."""
    E = np.asarray(E, dtype=np.float64)
    sq = (E * E).sum(axis=1)
    dist = sq[:, None] + sq[None, :] - 2 * E @ E.T
    np.fill_diagonal(dist, np.inf)
    return np.argmin(dist, axis=1)


def substitution_baseline(seq, rate: float, E, rng_seed: int, prompt_len: int = 0) -> list[int]:
    """Replace each post-prompt token with its embedding nearest neighbor w.p. ``rate``."""
    if not 0 <= rate <= 1:
        raise ValueError("rate must be in [0, 1]")
    nn = nearest_neighbors(E)
    seq = [int(t) for t in seq]
    rng = np.random.default_rng(rng_seed)
    hits = rng.random(len(seq)) < rate
    return [int(nn[t]) if (i >= prompt_len and hits[i]) else t for i, t in enumerate(seq)]
