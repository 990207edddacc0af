"""Perplexity, the one-sample t-test, and the steal+audit experiment sweeps.

Results CSV (``format_version`` 1), one ExperimentRecord per row, columns in
``RECORD_COLUMNS`` order. Wallclock time is kept out of the CSV so reruns are
byte-identical; it appears in the JSON summary only.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import corpus, ldp, lm
from . import watermark as wm
from .config import ExperimentConfig
from .steal import (AdversaryConfig, ProviderService, audit_suspect, collect_pairs, derive_seed,
                    finetune_surrogate, pretrain_surrogate)

FORMAT_VERSION = 1


# ---------------------------------------------------------------- metrics

def mean_perplexity(scorer: lm.ModelParams, outputs, start: int = 0) -> float:
    """Arithmetic mean of per-sequence perplexities; scoring begins at ``start``."""
    ppls, skipped = [], 0
    for seq in outputs:
        if len(seq) < 2 or len(seq) <= max(start, 1):
            skipped += 1
            continue
        ppls.append(lm.perplexity(scorer, seq, start))
    if skipped:
        warnings.warn(f"skipped {skipped} sequence(s) too short to score", RuntimeWarning, stacklevel=2)
    if not ppls:
        raise ValueError("no sequence long enough to score")
    return float(np.mean(ppls))


@dataclass(frozen=True)
class TTestResult:
    sample_mean: float
    reference_mean: float
    t_statistic: float
    degrees_of_freedom: int
    p_value: float


def _betacf(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation of the incomplete beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must be in [0, 1]")
    if x in (0.0, 1.0):
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    # the fraction converges fast only on this side of the mean
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail P(|T| >= |t|) = I_{df/(df+t^2)}(df/2, 1/2)."""
    if t == 0:
        return 1.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def one_sample_t_test(samples: Sequence[float], reference_mean: float) -> TTestResult:
    x = np.asarray(samples, dtype=np.float64)
    n = x.size
    if n < 2:
        raise ValueError("need at least two samples")
    s = float(np.std(x, ddof=1))
    if s == 0:
        raise ValueError("degenerate sample")
    mean = float(x.mean())
    t = (mean - reference_mean) / (s / math.sqrt(n))
    return TTestResult(mean, float(reference_mean), t, n - 1, min(1.0, student_t_sf2(t, n - 1)))


# ---------------------------------------------------------------- records

@dataclass
class ExperimentRecord:
    id: str
    scheme: str
    setting: str          # sweep point label, e.g. "eps=6" or "delta=0.05"
    delta: float
    epsilon: float
    sensitivity: float
    noise_location: str
    n_train: int
    seed_tuple: int
    seeds: str            # query/noise/init/train/audit
    attack_sr: float
    n_flagged: int
    n_test: int
    mean_ppl: float
    baseline_ppl: float
    final_loss: float
    wallclock: float = field(default=0.0, compare=False)


RECORD_COLUMNS = [f.name for f in dataclasses.fields(ExperimentRecord) if f.name != "wallclock"]


def _cell(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def records_csv(records: Sequence[ExperimentRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["format_version", *RECORD_COLUMNS])
    for r in records:
        w.writerow([FORMAT_VERSION, *(_cell(getattr(r, c)) for c in RECORD_COLUMNS)])
    return buf.getvalue()


def read_records_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def aggregate(records: Sequence[ExperimentRecord]) -> list[dict]:
    """Mean and sample std of attack_sr and mean_ppl per sweep point, over seed tuples."""
    groups: dict[tuple, list[ExperimentRecord]] = {}
    for r in records:
        groups.setdefault((r.scheme, r.setting, r.noise_location, r.n_train), []).append(r)
    out = []
    for (scheme, setting, loc, n), rs in groups.items():
        sr = np.array([r.attack_sr for r in rs])
        ppl = np.array([r.mean_ppl for r in rs])
        out.append({
            "scheme": scheme, "setting": setting, "noise_location": loc, "n_train": n,
            "n_seeds": len(rs),
            "attack_sr_mean": float(sr.mean()),
            "attack_sr_std": float(sr.std(ddof=1)) if len(rs) > 1 else 0.0,
            "mean_ppl_mean": float(ppl.mean()),
            "mean_ppl_std": float(ppl.std(ddof=1)) if len(rs) > 1 else 0.0,
            "delta_mean": float(np.mean([r.delta for r in rs])),
        })
    return out


def summary_json(records: Sequence[ExperimentRecord], incomplete: bool = False, **extra) -> str:
    doc = {"format_version": FORMAT_VERSION, "incomplete": bool(incomplete), **extra,
           "records": {r.id: dataclasses.asdict(r) for r in records},
           "aggregate": aggregate(records)}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_results(records, out_dir, stem: str, incomplete: bool = False, **extra) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
    csv_path.write_text(records_csv(records), encoding="utf-8")
    json_path.write_text(summary_json(records, incomplete, **extra), encoding="utf-8")
    return csv_path, json_path


class SweepError(RuntimeError):
    """A sweep point failed; ``records`` holds the points finished before it."""

    def __init__(self, msg, records):
        super().__init__(msg)
        self.records = records


# ---------------------------------------------------------------- experiment

@dataclass(frozen=True)
class SeedTuple:
    query: int
    noise: int
    init: int
    train: int
    audit: int

    def __str__(self):
        return "/".join(str(v) for v in dataclasses.astuple(self))


def seed_tuple(master: int, r: int) -> SeedTuple:
    return SeedTuple(*(derive_seed(master, 10 + k, r) for k in range(5)))


def model_config(sec, V: int) -> lm.ModelConfig:
    return lm.ModelConfig(V=V, d=sec.d, context=sec.context, hidden=sec.hidden,
                          n_layers=sec.n_layers, block=sec.block)


def window_len(cfg: ExperimentConfig) -> int:
    return min(cfg.data.prompt_len + cfg.data.gen_len, cfg.provider.context, cfg.surrogate.context) + 1


def load_documents(cfg: ExperimentConfig) -> list[str]:
    path = cfg.data.corpus or None
    if path is not None and not Path(path).is_file():
        raise FileNotFoundError(f"corpus not found: {path}")
    docs = corpus.read_corpus(path)
    if not docs:
        raise ValueError(f"empty corpus: {path or corpus.BUNDLED_CORPUS}")
    return docs


def build_vocab(cfg: ExperimentConfig, docs) -> corpus.Vocabulary:
    return corpus.build_vocabulary("\n".join(docs), cfg.data.vocab_mode, cfg.data.vocab_size)


def provider_text(cfg, docs, vocab):
    """Even-indexed documents; the odd half is the adversary's clean text."""
    return corpus.training_windows(docs, vocab, window_len(cfg), exclude=range(1, len(docs), 2))


def adversary_text(cfg, docs, vocab):
    return corpus.training_windows(docs, vocab, window_len(cfg), exclude=range(0, len(docs), 2))


def train_provider(cfg: ExperimentConfig, docs, vocab) -> tuple[lm.ModelParams, list[float]]:
    m = cfg.seeds.master
    p = cfg.provider
    model = lm.init_model(model_config(p, vocab.size), derive_seed(m, 2))
    tcfg = lm.TrainConfig(epochs=p.epochs, lr=p.lr, batch=p.batch, seed=derive_seed(m, 3))
    return lm.train(model, lm.lm_dataset(provider_text(cfg, docs, vocab)), tcfg)


def make_watermark(cfg: ExperimentConfig, V: int):
    w = cfg.watermark
    if w.scheme == "kgw":
        return wm.make_scheme("kgw", V, gamma=w.gamma, delta_wm=w.delta_wm, key=w.key, h=w.h,
                              z_threshold=w.z_threshold)
    if w.scheme == "exp":
        return wm.make_scheme("exp", V, key=w.key, key_len=w.key_len, perm_trials=w.perm_trials,
                              p_threshold=w.p_threshold)
    return wm.make_scheme("none", V)


@dataclass
class RunOutput:
    record: ExperimentRecord
    surrogate: lm.ModelParams
    audit: object
    report: object


class Lab:
    """Everything one experiment config fixes: data split, provider, watermark.

    Harvested pairs and pretrained surrogate inits are cached per seed tuple,
    so sweep points share them; each point still trains its own surrogate.
    """

    def __init__(self, cfg: ExperimentConfig, provider: lm.ModelParams | None = None,
                 vocab: corpus.Vocabulary | None = None, docs=None, workers: int | None = None):
        self.cfg = cfg
        self.workers = cfg.run.workers if workers is None else workers
        self.docs = load_documents(cfg) if docs is None else docs
        self.vocab = build_vocab(cfg, self.docs) if vocab is None else vocab
        self.provider = train_provider(cfg, self.docs, self.vocab)[0] if provider is None else provider
        if self.provider.config.V != self.vocab.size:
            raise ValueError(f"provider vocabulary size {self.provider.config.V} != {self.vocab.size}")
        self.scheme = make_watermark(cfg, self.vocab.size)
        m = cfg.seeds.master
        self.service = ProviderService(self.provider, self.scheme, cfg.data.gen_len, derive_seed(m, 4))
        self._pool = max(cfg.data.n_train, *cfg.attack.train_sizes) if cfg.attack.train_sizes else cfg.data.n_train
        train, test = corpus.make_prompt_pairs(self.docs, self.vocab, cfg.data.prompt_len, self._pool,
                                               cfg.data.n_test, derive_seed(m, 1), ref_len=cfg.data.gen_len)
        self.train_prompts = [p.prompt for p in train]
        self.test_prompts = [p.prompt for p in test]
        self._pairs: dict[int, list] = {}
        self._inits: dict[int, tuple] = {}
        self._baseline: float | None = None
        self._adv_text = None

    # adversary-side caches
    def pairs(self, r: int, n: int):
        if n > len(self.train_prompts):
            raise ValueError(f"n_train {n} exceeds the prompt pool of {len(self.train_prompts)}")
        if r not in self._pairs:
            self._pairs[r] = collect_pairs(self.service.query, self.train_prompts, seed_tuple(self.cfg.seeds.master, r).query,
                                           self.workers)
        return self._pairs[r][:n]

    def adversary(self, r: int, delta: float, location: str, n_train: int) -> AdversaryConfig:
        s, st = self.cfg.surrogate, seed_tuple(self.cfg.seeds.master, r)
        return AdversaryConfig(
            surrogate=model_config(s, self.vocab.size),
            train=lm.TrainConfig(epochs=s.epochs, lr=s.lr, batch=s.batch, seed=st.train),
            delta=delta, noise_location=location, n_queries=n_train, query_seed=st.query,
            noise_seed=st.noise, init_seed=st.init, mask_prompt=s.mask_prompt,
            pretrain_epochs=s.pretrain_epochs, freeze_embedding=s.freeze_embedding)

    def surrogate_init(self, r: int):
        if r not in self._inits:
            if self._adv_text is None:
                self._adv_text = adversary_text(self.cfg, self.docs, self.vocab)
            adv = self.adversary(r, 1.0, "embedding_train", 1)
            self._inits[r] = pretrain_surrogate(adv, self._adv_text)
        return self._inits[r]

    def baseline_ppl(self) -> float:
        """Scorer PPL of the provider's own watermarked outputs on the test prompts."""
        if self._baseline is None:
            outs = collect_pairs(self.service.query, self.test_prompts, derive_seed(self.cfg.seeds.master, 5),
                                 self.workers)
            self._baseline = mean_perplexity(self.provider, [p + r for p, r in outs], self.cfg.data.prompt_len)
        return self._baseline

    def run(self, r: int = 0, *, location: str | None = None, n_train: int | None = None,
            delta: float | None = None, epsilon: float | None = None) -> RunOutput:
        """One steal + audit at seed tuple ``r``.

        Give either an absolute ``delta`` or an ``epsilon`` (delta = sensitivity / epsilon);
        with neither, the config's [attack] delta/epsilon apply.
        """
        t0 = time.perf_counter()
        a = self.cfg.attack
        location = location or a.noise_location
        n_train = n_train or self.cfg.data.n_train
        if delta is None and epsilon is None:
            delta, epsilon = a.delta, (None if a.delta is not None else a.epsilon)
        init, _ = self.surrogate_init(r)
        sens = ldp.sensitivity(init.embedding)
        if delta is None:
            delta = ldp.noise_scale(sens, epsilon)
            setting = f"eps={epsilon:g}"
        else:
            setting = f"delta={delta:g}"
        adv = self.adversary(r, delta, location, n_train)
        sur, report = finetune_surrogate(adv, self.pairs(r, n_train), init)
        st = seed_tuple(self.cfg.seeds.master, r)
        audit = audit_suspect(self.service, sur, location, self.test_prompts, st.audit, delta, self.workers)
        ppl = mean_perplexity(self.provider, audit.outputs, self.cfg.data.prompt_len)
        key = json.dumps({"config": self.cfg.to_ini(), "r": r, "location": location, "n_train": n_train,
                          "delta": repr(float(delta)), "setting": setting}, sort_keys=True)
        rec = ExperimentRecord(
            id=hashlib.sha256(key.encode()).hexdigest()[:16], scheme=self.scheme.name, setting=setting,
            delta=float(delta), epsilon=ldp.privacy_budget(sens, delta), sensitivity=sens,
            noise_location=location, n_train=n_train, seed_tuple=r, seeds=str(st),
            attack_sr=audit.attack_sr, n_flagged=audit.flags, n_test=audit.n_test, mean_ppl=ppl,
            baseline_ppl=self.baseline_ppl(), final_loss=float(report.loss_curve[-1]),
            wallclock=time.perf_counter() - t0)
        return RunOutput(rec, sur, audit, report)


def _seed_range(lab: Lab, seeds):
    return range(lab.cfg.seeds.n_tuples) if seeds is None else seeds


def _sweep(points, seeds, lab: Lab):
    records = []
    for kw in points:
        for r in seeds:
            try:
                records.append(lab.run(r, **kw).record)
            except Exception as e:
                raise SweepError(f"sweep point {kw} seed tuple {r}: {e}", records) from e
    return records


def sweep_noise(lab: Lab, deltas=None, epsilons=None, seeds=None) -> list[ExperimentRecord]:
    """One run per noise level and seed tuple, sorted by delta.

    Absolute ``deltas`` or budgets ``epsilons`` (delta = sensitivity / epsilon);
    defaults to the config's sweep grid.
    """
    a = lab.cfg.attack
    if deltas is None and epsilons is None:
        deltas, epsilons = (a.sweep_deltas or None), (None if a.sweep_deltas else a.sweep_epsilons)
    values = list(deltas if deltas is not None else epsilons)
    if not values or any(not v > 0 for v in values):
        raise ValueError("noise levels must be nonempty and positive")
    name = "delta" if deltas is not None else "epsilon"
    recs = _sweep([{name: v} for v in values], _seed_range(lab, seeds), lab)
    return sorted(recs, key=lambda r: (r.delta, r.seed_tuple))


def sweep_train_size(lab: Lab, sizes=None, seeds=None) -> list[ExperimentRecord]:
    sizes = list(lab.cfg.attack.train_sizes if sizes is None else sizes)
    if not sizes:
        raise ValueError("no training sizes")
    for n in sizes:
        if not 1 <= n <= len(lab.train_prompts):
            raise ValueError(f"training size {n} exceeds the prompt pool of {len(lab.train_prompts)}")
    return _sweep([{"n_train": n} for n in sizes], _seed_range(lab, seeds), lab)


def ablate_noise_location(lab: Lab, seeds=None) -> list[ExperimentRecord]:
    from .steal import NOISE_LOCATIONS
    return _sweep([{"location": loc} for loc in NOISE_LOCATIONS], _seed_range(lab, seeds), lab)


# ---------------------------------------------------------------- audit file

AUDIT_COLUMNS = ["prompt_id", "scheme", "statistic", "threshold", "p_value", "flagged", "attack_sr",
                 "delta", "epsilon", "noise_location", "seeds"]


def audit_csv(audit, scheme: str, delta: float, epsilon: float, noise_location: str, seeds: str) -> str:
    """One row per test prompt; attack_sr is repeated on every row."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["format_version", *AUDIT_COLUMNS])
    for j, rep in enumerate(audit.per_prompt):
        w.writerow([FORMAT_VERSION, j, scheme, _cell(rep.statistic), _cell(rep.threshold),
                    "" if rep.p_value is None else _cell(rep.p_value), int(rep.watermarked),
                    _cell(audit.attack_sr), _cell(delta), _cell(epsilon), noise_location, seeds])
    return buf.getvalue()
