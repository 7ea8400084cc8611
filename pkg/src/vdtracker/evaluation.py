"""Metrics and the ablation runner.

Accuracy is exact-match over the fixed candidate set, reported overall, per
question category and split by coreference use. BLEU-4 is corpus-level with
clipped modified n-gram precisions, a brevity penalty, a single reference per
candidate and no smoothing: if the corpus has no candidate 4-grams or any
aggregated precision is zero, the score is 0.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .data import CATEGORIES
from .model import (
    ModelConfig,
    answer_target_ids,
    build_embedder,
    init_params,
    predict_answer,
    run_dialog,
    run_dialog_generate,
)
from .optim import OptimState, ScheduleConfig, TrainConfig, train_loop


def config_hash(cfg: ModelConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class EvalReport:
    overall_accuracy: float
    per_category: dict            # category -> {"correct", "count", "accuracy"}
    coref_accuracy: float | None
    non_coref_accuracy: float | None
    coref_count: int
    total: int
    bleu4: float | None = None
    manifest: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "per_category": self.per_category,
            "coref_accuracy": self.coref_accuracy,
            "non_coref_accuracy": self.non_coref_accuracy,
            "coref_count": self.coref_count,
            "total": self.total,
            "bleu4": self.bleu4,
            "manifest": self.manifest,
        }


def accuracy_by_category(predictions, episodes) -> EvalReport:
    """Exact-match accuracy for predictions aligned one-to-one with the
    flattened turns of ``episodes``."""
    turns = [t for ep in episodes for t in ep.turns]
    if len(predictions) != len(turns):
        raise ValueError(
            f"{len(predictions)} predictions for {len(turns)} turns"
        )
    per_cat = {c: {"correct": 0, "count": 0} for c in CATEGORIES}
    coref_correct = coref_count = 0
    plain_correct = plain_count = 0
    correct = 0
    for pred, turn in zip(predictions, turns):
        hit = int(pred == turn.answer_index)
        correct += hit
        stats = per_cat[turn.category]
        stats["correct"] += hit
        stats["count"] += 1
        if turn.coref:
            coref_correct += hit
            coref_count += 1
        else:
            plain_correct += hit
            plain_count += 1
    for stats in per_cat.values():
        stats["accuracy"] = (stats["correct"] / stats["count"]
                             if stats["count"] else None)
    return EvalReport(
        overall_accuracy=correct / len(turns) if turns else 0.0,
        per_category=per_cat,
        coref_accuracy=coref_correct / coref_count if coref_count else None,
        non_coref_accuracy=plain_correct / plain_count if plain_count else None,
        coref_count=coref_count,
        total=len(turns),
    )


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidates, references) -> float:
    """Corpus-level BLEU with n up to 4 over token lists, single reference."""
    if len(candidates) != len(references):
        raise ValueError("candidate/reference count mismatch")
    if not candidates:
        raise ValueError("empty corpus")
    if any(len(r) == 0 for r in references):
        raise ValueError("empty reference")
    clipped = [0] * 4
    totals = [0] * 4
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand = list(cand)
        ref = list(ref)
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, 5):
            cgrams = _ngrams(cand, n)
            rgrams = _ngrams(ref, n)
            totals[n - 1] += max(len(cand) - n + 1, 0)
            clipped[n - 1] += sum(min(c, rgrams[g]) for g, c in cgrams.items())
    if any(t == 0 for t in totals) or any(c == 0 for c in clipped):
        return 0.0
    log_p = sum(math.log(c / t) for c, t in zip(clipped, totals)) / 4.0
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)


# ---------------------------------------------------------------------------
# Model evaluation
# ---------------------------------------------------------------------------

def predict_episodes(params, cfg: ModelConfig, episodes, embedder=None):
    """Discriminative predictions for every turn, ground-truth history."""
    embedder = embedder or build_embedder(cfg)
    predictions = []
    for ep in episodes:
        outputs, _ = run_dialog(ep, params, cfg, embedder)
        predictions.extend(predict_answer(o.logits) for o in outputs)
    return predictions


def evaluate_discriminative(params, cfg: ModelConfig, episodes,
                            embedder=None, manifest=None) -> EvalReport:
    predictions = predict_episodes(params, cfg, episodes, embedder)
    report = accuracy_by_category(predictions, episodes)
    report.manifest = dict(manifest or {}, config_hash=config_hash(cfg),
                           history="ground-truth")
    return report


def evaluate_generative(params, cfg: ModelConfig, episodes,
                        embedder=None, manifest=None) -> EvalReport:
    """Greedy generation per turn (model answers feed the history); BLEU-4
    against the reference answer tokens, plus exact-match accuracy."""
    embedder = embedder or build_embedder(cfg)
    hyps, refs, exact = [], [], []
    for ep in episodes:
        decoded = run_dialog_generate(ep, params, cfg, embedder)
        for tokens, turn in zip(decoded, ep.turns):
            target = answer_target_ids(turn.answer)
            hyps.append(tokens)
            refs.append(target)
            exact.append(1 if tokens == target else 0)
    preds = [ep_turn.answer_index if hit else -1
             for hit, ep_turn in zip(exact, (t for ep in episodes for t in ep.turns))]
    report = accuracy_by_category(preds, episodes)
    report.bleu4 = bleu4(hyps, refs)
    report.manifest = dict(manifest or {}, config_hash=config_hash(cfg),
                           history="model-generated")
    return report


def evaluate(params, cfg: ModelConfig, episodes, embedder=None,
             manifest=None) -> EvalReport:
    if cfg.mode == "generative":
        return evaluate_generative(params, cfg, episodes, embedder, manifest)
    return evaluate_discriminative(params, cfg, episodes, embedder, manifest)


# ---------------------------------------------------------------------------
# Ablation runner
# ---------------------------------------------------------------------------

def tracker_grid(base: ModelConfig):
    """The tracker on/off study grid, weakest configuration first."""
    from dataclasses import replace

    return [
        ("no-tracker", replace(base, use_ost=False, use_lst=False)),
        ("ost-only", replace(base, use_ost=True, use_lst=False)),
        ("lst-only", replace(base, use_ost=False, use_lst=True)),
        ("full", replace(base, use_ost=True, use_lst=True)),
    ]


def run_ablation(grid, train_episodes, eval_episodes, schedule: ScheduleConfig,
                 train_cfg: TrainConfig, seed: int = 0):
    """Train every configuration in ``grid`` with a shared seed and evaluate
    it; per-cell failures are recorded without aborting the grid.

    Returns a list of {"name", "config", "report"|"error"} rows.
    """
    rows = []
    for name, cfg in grid:
        try:
            embedder = build_embedder(cfg)
            params = init_params(cfg, seed)
            optim = OptimState.for_params(params)
            train_loop(train_episodes, params, optim, cfg, schedule,
                       train_cfg, embedder)
            report = evaluate(params, cfg, eval_episodes, embedder,
                              manifest={"seed": seed, "cell": name})
            rows.append({"name": name, "config": cfg.to_dict(),
                         "report": report.to_dict()})
        except Exception as exc:  # per-cell isolation
            rows.append({"name": name, "config": cfg.to_dict(),
                         "error": f"{type(exc).__name__}: {exc}"})
    return rows


def _fmt_pct(x) -> str:
    return "-" if x is None else f"{100 * x:.2f}"


def ablation_markdown(rows) -> str:
    lines = [
        "| cell | overall acc [%] | coref acc [%] | non-coref acc [%] | BLEU-4 |",
        "|------|-----------------|---------------|-------------------|--------|",
    ]
    for row in rows:
        if "error" in row:
            lines.append(f"| {row['name']} | error: {row['error']} | | | |")
            continue
        rep = row["report"]
        bleu = rep.get("bleu4")
        lines.append(
            "| {name} | {acc} | {coref} | {plain} | {bleu} |".format(
                name=row["name"],
                acc=_fmt_pct(rep["overall_accuracy"]),
                coref=_fmt_pct(rep["coref_accuracy"]),
                plain=_fmt_pct(rep["non_coref_accuracy"]),
                bleu="-" if bleu is None else f"{bleu:.4f}",
            )
        )
    return "\n".join(lines) + "\n"


def write_reports(rows, out_dir, stem: str):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.json").write_text(
        json.dumps(rows, indent=1, sort_keys=True), encoding="utf-8"
    )
    (out_dir / f"{stem}.md").write_text(ablation_markdown(rows), encoding="utf-8")
