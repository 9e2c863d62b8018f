"""Single-term vs multi-term vs multi-task scores on a synthetic corpus.

Usage: python3 scripts/stage_trend.py [--config configs/desk.yaml] [--synth]
"""
from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from mtfusion import pipeline
from mtfusion.bundle import Bundle
from mtfusion.config import parse_config
from mtfusion.metrics import evaluate
from mtfusion.synthetic import SyntheticSpec, write_corpus
from mtfusion.windowing import load_windowed

ROOT = Path(__file__).resolve().parents[1]


def stage_scores(cfg) -> dict:
    """Validation scores of every stage from a trained bundle."""
    lay = pipeline.Layout(cfg)
    b = Bundle(lay.bundle())
    data = {fam: load_windowed(lay.windowed(fam, "valid"))
            for fam in pipeline.family_tasks(cfg)}
    out: dict = {}

    def score(stage, term="short"):
        preds, truth = {}, {}
        for fam, tasks in pipeline.family_tasks(cfg).items():
            ds = data[fam]
            for task, p in pipeline.predict_dataset(b, ds, tasks, stage, term).items():
                preds[task] = p[0] if task == "expression" else p
                truth[task] = ds.label(task, "short")
        return evaluate(preds, truth).to_dict()

    terms = next(iter(data.values())).terms
    for term in terms:
        out[f"single-term.{term}"] = score("single-term", term)
    out["multi-term"] = score("multi-term")
    if set(cfg.tasks) == {"valence", "arousal", "expression"}:
        out["fusion"] = score("fusion")
    return out


def run(cfg, synth: bool) -> dict:
    t0 = time.perf_counter()
    if synth:
        write_corpus(SyntheticSpec(), cfg.resolve(cfg.corpus))
    pipeline.run_extract(cfg)
    if cfg.balance.enabled:
        pipeline.run_balance(cfg)
    pipeline.run_train(cfg)
    scores = stage_scores(cfg)
    scores["seconds"] = round(time.perf_counter() - t0, 1)
    return scores


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.yaml"))
    ap.add_argument("--synth", action="store_true", help="regenerate the default corpus first")
    args = ap.parse_args()
    cfg = parse_config(args.config)
    scores = run(cfg, args.synth)
    for stage, s in scores.items():
        if stage == "seconds":
            continue
        cv, ca = s.get("ccc_valence"), s.get("ccc_arousal")
        line = f"{stage:<22} ccc_valence={cv:.4f} ccc_arousal={ca:.4f}"
        if s.get("expr_score") is not None:
            line += f" expr_score={s['expr_score']:.4f}"
        print(line)
    print(f"elapsed {scores['seconds']} s")
    out = pipeline.Layout(cfg).root / "reports" / "stage_trend.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(scores, indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
