"""Command line runner: ``wslab <subcommand> --config exp.ini``.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import corpus, ldp, lm
from . import evaluation as ev
from .config import ConfigError, load_config
from .steal import NOISE_LOCATIONS, ProviderService, audit_suspect, derive_seed, substitution_baseline


class UsageError(Exception):
    pass


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def resolve(args):
    cfg = load_config(args.config)
    if getattr(args, "out_dir", None):
        cfg = cfg.replace(run={"out_dir": args.out_dir})
    if getattr(args, "workers", None):
        cfg = cfg.replace(run={"workers": args.workers})
    return cfg


def echo_config(cfg) -> Path:
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.to_ini(), encoding="utf-8")
    return out


def load_lab(cfg) -> ev.Lab:
    out = Path(cfg.run.out_dir)
    ckpt, vocab = out / "provider.ckpt", out / "vocab.tsv"
    for p in (ckpt, vocab):
        if not p.is_file():
            raise UsageError(f"missing {p}; run train-provider first")
    docs = _docs(cfg)
    return ev.Lab(cfg, provider=lm.load_checkpoint(ckpt), vocab=corpus.Vocabulary.load(vocab), docs=docs)


def _docs(cfg):
    try:
        return ev.load_documents(cfg)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None


# ---------------------------------------------------------------- commands

def cmd_train_provider(cfg) -> int:
    docs = _docs(cfg)
    out = echo_config(cfg)
    vocab = ev.build_vocab(cfg, docs)
    t0 = time.perf_counter()
    model, curve = ev.train_provider(cfg, docs, vocab)
    lm.save_checkpoint(model, out / "provider.ckpt")
    vocab.save(out / "vocab.tsv")
    _log(f"provider: V={vocab.size} loss {curve[0]:.4f} -> {curve[-1]:.4f} "
         f"({time.perf_counter() - t0:.1f}s), digest {model.digest()[:16]}")
    return 0


def cmd_steal(cfg, samples: int = 0) -> int:
    lab = load_lab(cfg)
    out = echo_config(cfg)
    stage = "collect_pairs"
    try:
        lab.pairs(0, cfg.data.n_train)
        stage = "pretrain"
        lab.surrogate_init(0)
        stage = "finetune/audit"
        res = lab.run(0)
        stage = "write"
        rec = res.record
        lm.save_checkpoint(res.surrogate, out / "surrogate.ckpt")
        (out / "audit.csv").write_text(
            ev.audit_csv(res.audit, rec.scheme, rec.delta, rec.epsilon, rec.noise_location, rec.seeds),
            encoding="utf-8")
        summary = {
            "format_version": ev.FORMAT_VERSION, "attack_sr": rec.attack_sr, "delta": rec.delta,
            "epsilon": rec.epsilon, "sensitivity": rec.sensitivity, "noise_location": rec.noise_location,
            "scheme": rec.scheme, "n_train": rec.n_train, "n_test": rec.n_test, "n_flagged": rec.n_flagged,
            "mean_ppl": rec.mean_ppl, "baseline_ppl": rec.baseline_ppl, "seeds": rec.seeds,
            "loss_curve": res.report.loss_curve, "pretrain_curve": res.report.pretrain_curve,
            "dataset_digest": res.report.dataset_digest, "surrogate_digest": res.surrogate.digest(),
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        if samples:
            _write_samples(lab, res.audit.outputs[:samples], out / "samples.txt")
    except Exception as e:
        raise RuntimeError(f"steal failed during {stage}: {e}") from e
    _log(f"steal: {rec.noise_location} delta={rec.delta:.4g} eps={rec.epsilon:.4g} "
         f"attack_sr={rec.attack_sr:.3f} ppl={rec.mean_ppl:.2f} (baseline {rec.baseline_ppl:.2f}) "
         f"{rec.wallclock:.1f}s")
    return 0


def _write_samples(lab, outputs, path):
    P = lab.cfg.data.prompt_len
    lines = []
    for j, y in enumerate(outputs):
        prompt, cont = corpus.detokenize(y[:P], lab.vocab), corpus.detokenize(y[P:], lab.vocab)
        lines.append(f"{j}\t{prompt!r}\t{cont!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_audit(cfg, suspect: str | None, mode: str | None, baseline: str | None, output: str | None) -> int:
    """Audit a suspect checkpoint, or one of the reference baselines."""
    lab = load_lab(cfg)
    out = Path(cfg.run.out_dir)
    st = ev.seed_tuple(cfg.seeds.master, 0)
    P = cfg.data.prompt_len
    if baseline:
        outs = [p + r for p, r in ev.collect_pairs(lab.service.query, lab.test_prompts, st.audit, lab.workers)]
        if baseline == "substitution":
            E = lab.provider.embedding
            outs = [tuple(substitution_baseline(y, cfg.attack.substitution_rate, E, derive_seed(st.audit, j), P))
                    for j, y in enumerate(outs)]
        reports = [lab.scheme.detect(list(y), P) for y in outs]
        from .steal import AuditResult, attack_success_rate
        audit = AuditResult(attack_success_rate(reports), reports, len(reports), outs)
        delta = eps = 0.0
        label = baseline
    else:
        path = Path(suspect) if suspect else out / "surrogate.ckpt"
        if not path.is_file():
            raise UsageError(f"missing suspect checkpoint {path}")
        model = lm.load_checkpoint(path)
        label = mode or cfg.attack.noise_location
        delta = cfg.attack.delta if cfg.attack.delta is not None else \
            ldp.noise_scale(ldp.sensitivity(model.embedding), cfg.attack.epsilon)
        eps = ldp.privacy_budget(ldp.sensitivity(model.embedding), delta)
        audit = audit_suspect(lab.service, model, label, lab.test_prompts, st.audit, delta, lab.workers)
    ppl = ev.mean_perplexity(lab.provider, audit.outputs, P)
    dest = Path(output) if output else out / f"audit_{label}.csv"
    dest.write_text(ev.audit_csv(audit, lab.scheme.name, delta, eps, label, str(st)), encoding="utf-8")
    print(json.dumps({"suspect": label, "attack_sr": audit.attack_sr, "mean_ppl": ppl, "csv": str(dest)}))
    return 0


def cmd_sweep(cfg, axis: str) -> int:
    lab = load_lab(cfg)
    out = echo_config(cfg)
    fn = {"delta": ev.sweep_noise, "train_size": ev.sweep_train_size, "location": ev.ablate_noise_location}[axis]
    try:
        records, incomplete, err = fn(lab), False, None
    except ev.SweepError as e:
        records, incomplete, err = e.records, True, e
    csv_path, _ = ev.write_results(records, out, f"sweep_{axis}", incomplete, axis=axis)
    for row in ev.aggregate(records):
        _log(f"{row['setting']:>12} {row['noise_location']:<20} n={row['n_train']:<5} "
             f"sr={row['attack_sr_mean']:.3f}±{row['attack_sr_std']:.3f} ppl={row['mean_ppl_mean']:.2f}")
    if err is not None:
        raise RuntimeError(f"sweep incomplete, partial results in {csv_path}: {err}")
    return 0


def cmd_stats(path: str, bins: int) -> int:
    if not Path(path).is_file():
        raise UsageError(f"missing checkpoint {path}")
    model = lm.load_checkpoint(path)
    st = lm.embedding_stats(model, bins)
    print(json.dumps({"checkpoint": str(path), "V": model.config.V, "d": model.config.d,
                      "mean": st.mean, "std": st.std, "sensitivity": ldp.sensitivity(model.embedding),
                      "histogram": st.histogram}, indent=2))
    return 0


def cmd_ttest(path: str, column: str, reference: float, where: list[str]) -> int:
    if not Path(path).is_file():
        raise UsageError(f"missing CSV {path}")
    rows = ev.read_records_csv(path)
    for cond in where:
        key, _, val = cond.partition("=")
        rows = [r for r in rows if r.get(key) == val]
    if not rows or column not in rows[0]:
        raise UsageError(f"no rows with column {column!r} in {path}")
    res = ev.one_sample_t_test([float(r[column]) for r in rows], reference)
    print(json.dumps(res.__dict__))
    return 0


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wslab", description="Embedding-noise watermark stealing testbed.")
    p.add_argument("--workers", type=int, default=None, help="parallel processes for per-prompt work")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="INI experiment config (defaults if omitted)")
        sp.add_argument("--out-dir", help="override [run] out_dir")
        return sp

    with_config(sub.add_parser("train-provider", help="train the watermarking provider model"))
    s = with_config(sub.add_parser("steal", help="query, perturb, fine-tune and audit"))
    s.add_argument("--samples", type=int, default=0, help="dump this many audited generations")
    a = with_config(sub.add_parser("audit", help="audit a suspect checkpoint or a baseline"))
    a.add_argument("--suspect", help="checkpoint path (default out_dir/surrogate.ckpt)")
    a.add_argument("--mode", choices=NOISE_LOCATIONS, help="how the suspect generates")
    a.add_argument("--baseline", choices=("provider", "substitution"))
    a.add_argument("--output", help="CSV path")
    w = with_config(sub.add_parser("sweep", help="noise, training-size or location sweep"))
    w.add_argument("--axis", required=True, choices=("delta", "train_size", "location"))
    st = sub.add_parser("stats", help="embedding statistics and sensitivity of a checkpoint")
    st.add_argument("checkpoint")
    st.add_argument("--bins", type=int, default=50)
    t = sub.add_parser("ttest", help="one-sample t-test on a CSV column")
    t.add_argument("csv")
    t.add_argument("--column", default="attack_sr")
    t.add_argument("--reference", type=float, required=True)
    t.add_argument("--where", action="append", default=[], metavar="KEY=VALUE")
    sub.add_parser("show-config", help="print the resolved config").add_argument("--config")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "stats":
            return cmd_stats(args.checkpoint, args.bins)
        if args.command == "ttest":
            return cmd_ttest(args.csv, args.column, args.reference, args.where)
        if args.workers is not None and args.workers < 1:
            raise UsageError("--workers must be >= 1")
        cfg = resolve(args)
        if args.command == "show-config":
            print(cfg.to_ini(), end="")
            return 0
        if args.command == "train-provider":
            return cmd_train_provider(cfg)
        if args.command == "steal":
            return cmd_steal(cfg, args.samples)
        if args.command == "audit":
            return cmd_audit(cfg, args.suspect, args.mode, args.baseline, args.output)
        return cmd_sweep(cfg, args.axis)
    except (UsageError, ConfigError) as e:
        _log(f"wslab: error: {e}")
        return 2
    except FileNotFoundError as e:
        _log(f"wslab: error: {e}")
        return 2
    except Exception as e:  # runtime failure in some stage
        _log(f"wslab: {args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
