"""Run the noise, training-size and noise-location sweeps at desk scale.

    python3 scripts/run_sweeps.py --out-dir runs/sweeps --seeds 3

Writes sweep_<axis>.csv/.json plus baselines.json under --out-dir and prints
markdown tables of the per-point means (± sample std over seed tuples).
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from wslab import evaluation as ev
from wslab import lm, steal
from wslab.config import load_config


def baselines(lab, rate):
    """AttackSR/PPL of the provider's own outputs and of nearest-neighbor substitution."""
    P = lab.cfg.data.prompt_len
    seed = ev.seed_tuple(lab.cfg.seeds.master, 0).audit
    outs = [p + r for p, r in steal.collect_pairs(lab.service.query, lab.test_prompts, seed, lab.workers)]
    subs = [tuple(steal.substitution_baseline(y, rate, lab.provider.embedding, steal.derive_seed(seed, j), P))
            for j, y in enumerate(outs)]
    rows = {}
    for name, seqs in (("provider (watermarked)", outs), (f"substitution rate={rate:g}", subs)):
        reports = [lab.scheme.detect(list(y), P) for y in seqs]
        rows[name] = {"attack_sr": steal.attack_success_rate(reports),
                      "mean_ppl": ev.mean_perplexity(lab.provider, seqs, P)}
    return rows


def table(rows):
    lines = ["| noise | location | N | AttackSR | PPL |", "|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['setting']} | {r['noise_location']} | {r['n_train']} | "
                     f"{r['attack_sr_mean']:.3f} ± {r['attack_sr_std']:.3f} | "
                     f"{r['mean_ppl_mean']:.2f} ± {r['mean_ppl_std']:.2f} |")
    return "\n".join(lines)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out-dir", default="runs/sweeps")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--axes", default="delta,train_size,location")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--train-size-epsilon", type=float, default=30.0,
                    help="privacy budget for the training-size sweep (at small budgets noise swamps N)")
    args = ap.parse_args()

    cfg = load_config(args.config).replace(seeds={"n_tuples": args.seeds},
                                           run={"out_dir": args.out_dir, "workers": args.workers})
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.to_ini())
    t0 = time.perf_counter()
    lab = ev.Lab(cfg)
    lm.save_checkpoint(lab.provider, out / "provider.ckpt")
    lab.vocab.save(out / "vocab.tsv")
    print(f"provider ready ({time.perf_counter() - t0:.1f}s), baseline PPL {lab.baseline_ppl():.2f}")

    base = baselines(lab, cfg.attack.substitution_rate)
    (out / "baselines.json").write_text(json.dumps(base, indent=2, sort_keys=True) + "\n")
    for name, r in base.items():
        print(f"{name}: AttackSR {r['attack_sr']:.3f}, PPL {r['mean_ppl']:.2f}")

    sweeps = {"delta": ev.sweep_noise, "train_size": ev.sweep_train_size, "location": ev.ablate_noise_location}
    for axis in args.axes.split(","):
        t1 = time.perf_counter()
        run_lab = lab
        if axis == "train_size":
            run_lab = ev.Lab(cfg.replace(attack={"epsilon": args.train_size_epsilon, "delta": None}),
                             provider=lab.provider, vocab=lab.vocab, docs=lab.docs)
        recs = sweeps[axis](run_lab)
        ev.write_results(recs, out, f"sweep_{axis}", axis=axis)
        sens = np.mean([r.sensitivity for r in recs])
        print(f"\n### {axis} ({time.perf_counter() - t1:.0f}s, mean sensitivity {sens:.3f})\n")
        print(table(ev.aggregate(recs)))
    print(f"\ntotal {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
