"""Metric suite and the knowledge-integration ablation harness.

The report score is ROUGE-L F-measure alone. A composite with an
embedding-based similarity would need a pretrained encoder, which this
package does not ship.
"""

from __future__ import annotations

import logging
import math
import statistics
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .data import InstructionExample
from .decode import DecodeConfig, decode
from .kg import KnowledgeGraph
from .model import LanguageModel, ModelConfig
from .tokenizer import Vocabulary, build_input, build_vocab, tokenize
from .training import TrainConfig, encode_example, train

log = logging.getLogger(__name__)

NON_PATHOLOGY_CATEGORIES = ("location", "relation")
REPORT_SCORE_NOTE = "report_score = ROUGE-L F-measure only (no embedding-similarity component)"


# -- label extraction -------------------------------------------------------

def extract_labels(response_text: str, catalog: Iterable[str]) -> set[str]:
    """Catalog names mentioned in the text, skipping mentions negated as ``no <name>``."""
    names = set(catalog)
    toks = tokenize(response_text)
    return {t for i, t in enumerate(toks) if t in names and not (i > 0 and toks[i - 1] == "no")}


def parse_ranking(response_text: str) -> list[str]:
    """``ddx : a , b , c`` -> [a, b, c]; anything else -> []."""
    toks = tokenize(response_text)
    if len(toks) < 3 or toks[:2] != ["ddx", ":"]:
        return []
    items = " ".join(toks[2:]).split(",")
    ranking = [item.strip() for item in items]
    if any(not r or " " in r for r in ranking):
        return []
    return ranking


# -- metrics ----------------------------------------------------------------

@dataclass(frozen=True)
class LabelScore:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float

    @property
    def support(self) -> int:
        return self.tp + self.fn


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def f1_scores(predicted: Sequence[set], gold: Sequence[set], catalog: Iterable[str]):
    """Returns (macro_f1, micro_f1, {label: LabelScore}).

    Macro averages only labels with gold support. With no supported labels
    (and so nothing to find) macro and micro are 1.0 if nothing was
    predicted, else 0.0.
    """
    if len(predicted) != len(gold):
        raise ValueError("predicted and gold must have the same length")
    table = {}
    TP = FP = FN = 0
    for label in catalog:
        tp = sum(1 for p, g in zip(predicted, gold) if label in p and label in g)
        fp = sum(1 for p, g in zip(predicted, gold) if label in p and label not in g)
        fn = sum(1 for p, g in zip(predicted, gold) if label not in p and label in g)
        table[label] = LabelScore(tp, fp, fn, *_prf(tp, fp, fn))
        TP, FP, FN = TP + tp, FP + fp, FN + fn
    supported = [s.f1 for s in table.values() if s.support > 0]
    if supported:
        macro = sum(supported) / len(supported)
    else:
        macro = 1.0 if FP == 0 else 0.0
    micro = _prf(TP, FP, FN)[2] if TP + FP + FN else 1.0
    return macro, micro, table


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence, reference: Sequence) -> float:
    if not candidate or not reference:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(candidate), lcs / len(reference)
    return 2 * p * r / (p + r)


def _norm_answer(s: str) -> str:
    return " ".join(s.lower().split())


def vqa_accuracy(predicted: Sequence[str], gold: Sequence[str]) -> float:
    if len(predicted) != len(gold) or not gold:
        raise ValueError("need equally many predicted and gold answers, at least one")
    return sum(_norm_answer(p) == _norm_answer(g) for p, g in zip(predicted, gold)) / len(gold)


def mrr(rankings: Sequence[Sequence[str]], gold_top: Sequence[str]) -> float:
    if len(rankings) != len(gold_top) or not gold_top:
        raise ValueError("need equally many rankings and gold answers, at least one")
    total = 0.0
    for ranking, g in zip(rankings, gold_top):
        ranking = list(ranking)
        if g in ranking:
            total += 1.0 / (ranking.index(g) + 1)
    return total / len(gold_top)


def error_rates(predicted: Sequence[set], gold: Sequence[set]) -> tuple[float, float]:
    """(hallucination rate, missing-findings rate) as fractions of instances."""
    if len(predicted) != len(gold) or not gold:
        raise ValueError("need equally many predicted and gold sets, at least one")
    n = len(gold)
    halluc = sum(1 for p, g in zip(predicted, gold) if set(p) - set(g)) / n
    missing = sum(1 for p, g in zip(predicted, gold) if set(g) - set(p)) / n
    return halluc, missing


# -- report -----------------------------------------------------------------

@dataclass
class MetricReport:
    macro_f1: float | None = None
    micro_f1: float | None = None
    report_score: float | None = None
    vqa_accuracy: float | None = None
    ddx_mrr: float | None = None
    hallucination_rate: float | None = None
    missing_rate: float | None = None
    label_query_accuracy: float | None = None
    group_macro_f1: dict = field(default_factory=dict)
    per_label: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    SCALARS = ("macro_f1", "micro_f1", "report_score", "vqa_accuracy", "ddx_mrr",
               "hallucination_rate", "missing_rate", "label_query_accuracy")

    def scalars(self) -> dict[str, float | None]:
        return {k: getattr(self, k) for k in self.SCALARS}

    def has_nan(self) -> bool:
        vals = list(self.scalars().values()) + list(self.group_macro_f1.values())
        return any(v is not None and math.isnan(v) for v in vals)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_label"] = {k: asdict(v) if isinstance(v, LabelScore) else v for k, v in self.per_label.items()}
        d["note"] = REPORT_SCORE_NOTE
        return d

    def to_table(self) -> str:
        lines = [f"# {REPORT_SCORE_NOTE}", f"{'metric':<24}{'value':>10}"]
        for k, v in self.scalars().items():
            lines.append(f"{k:<24}{'n/a' if v is None else f'{v:.4f}':>10}")
        for k, v in self.group_macro_f1.items():
            lines.append(f"{'macro_f1[' + k + ']':<24}{'n/a' if v is None else f'{v:.4f}':>10}")
        if self.per_label:
            lines.append("")
            lines.append(f"{'label':<28}{'P':>8}{'R':>8}{'F1':>8}{'support':>9}")
            for label, s in self.per_label.items():
                lines.append(f"{label:<28}{s.precision:>8.3f}{s.recall:>8.3f}{s.f1:>8.3f}{s.support:>9d}")
        return "\n".join(lines)


def pathology_catalog(kg: KnowledgeGraph) -> list[str]:
    return [c.name for c in kg.concepts if c.category not in NON_PATHOLOGY_CATEGORIES]


@dataclass
class Prediction:
    example: InstructionExample
    response: str


def predict(lm: LanguageModel, dataset: Sequence[InstructionExample], config: DecodeConfig = DecodeConfig()) -> list[Prediction]:
    out = []
    for ex in dataset:
        S = build_input(lm.vocab.encode_text(ex.image_text), lm.vocab.encode_text(ex.instruction), lm.vocab, lm.config.max_seq_len)
        out.append(Prediction(ex, lm.vocab.decode_text(decode(lm, S, config))))
    return out


def score_predictions(preds: Sequence[Prediction], kg: KnowledgeGraph, rare: set[str] = frozenset()) -> MetricReport:
    catalog = pathology_catalog(kg)
    critical = {c.name for c in kg.concepts if c.is_critical}
    by_kind: dict[str, list[Prediction]] = {}
    for p in preds:
        by_kind.setdefault(p.example.task_kind, []).append(p)
    rep = MetricReport(counts={k: len(v) for k, v in sorted(by_kind.items())})

    reports = by_kind.get("report", [])
    if reports:
        pred_sets = [extract_labels(p.response, catalog) for p in reports]
        gold_sets = [set(p.example.gold_labels) for p in reports]
        rep.macro_f1, rep.micro_f1, rep.per_label = f1_scores(pred_sets, gold_sets, catalog)
        rep.report_score = sum(rouge_l(tokenize(p.response), tokenize(p.example.response)) for p in reports) / len(reports)
        rep.hallucination_rate, rep.missing_rate = error_rates(pred_sets, gold_sets)
        groups = {"critical": critical, "non_critical": set(catalog) - critical}
        if rare:
            groups.update({"common": set(catalog) - rare, "rare": set(rare)})
        for name, labels in groups.items():
            sub = [l for l in catalog if l in labels]
            if any(rep.per_label[l].support for l in sub):
                rep.group_macro_f1[name] = f1_scores(pred_sets, gold_sets, sub)[0]
    vqa = by_kind.get("vqa_yesno", []) + by_kind.get("vqa_factoid", [])
    if vqa:
        rep.vqa_accuracy = vqa_accuracy([p.response for p in vqa], [p.example.response for p in vqa])
    lq = by_kind.get("label_query", [])
    if lq:
        rep.label_query_accuracy = vqa_accuracy([p.response for p in lq], [p.example.response for p in lq])
    ddx = by_kind.get("ddx_rank", [])
    if ddx:
        rep.ddx_mrr = mrr([parse_ranking(p.response) for p in ddx], [p.example.gold_ranking[0] for p in ddx])
    return rep


def evaluate(lm: LanguageModel, dataset: Sequence[InstructionExample], kg: KnowledgeGraph, config: DecodeConfig = DecodeConfig(), rare: set[str] = frozenset()) -> MetricReport:
    return score_predictions(predict(lm, dataset, config), kg, rare)


# -- ablation ---------------------------------------------------------------

@dataclass
class AblationResult:
    seeds: list[int]
    reports: dict[str, list[MetricReport]]            # arm -> one report per seed
    losses: dict[str, list[list[float]]]

    def median(self, arm: str, metric: str) -> float | None:
        vals = [getattr(r, metric) for r in self.reports[arm]]
        vals = [v for v in vals if v is not None]
        return statistics.median(vals) if vals else None

    def to_dict(self) -> dict:
        arms = {}
        for arm, reps in self.reports.items():
            arms[arm] = {
                "per_seed": [r.to_dict() for r in reps],
                "median": {m: self.median(arm, m) for m in MetricReport.SCALARS},
            }
        return {"seeds": self.seeds, "arms": arms}

    def to_table(self) -> str:
        arms = list(self.reports)
        lines = [f"{'median metric':<24}" + "".join(f"{a:>12}" for a in arms)]
        for m in MetricReport.SCALARS:
            vals = [self.median(a, m) for a in arms]
            if all(v is None for v in vals):
                continue
            lines.append(f"{m:<24}" + "".join(f"{'n/a' if v is None else f'{v:.4f}':>12}" for v in vals))
        return "\n".join(lines)


def ablation_run(
    dataset: Sequence[InstructionExample],
    kg: KnowledgeGraph,
    model_config: ModelConfig,
    train_config: TrainConfig,
    seeds: Sequence[int],
    decode_config: DecodeConfig = DecodeConfig(),
    fractions: Sequence[float] = (0.75, 0.0, 0.25),
    arms: dict[str, bool] | None = None,
    vocab: Vocabulary | None = None,
) -> AblationResult:
    """Trains one model per (seed, arm) and scores it on the seed's held-out split.

    ``arms`` maps an arm name to its ``disable_kg`` flag; by default the full
    model is paired with the NoKG variant. Within a seed the arms share the
    data split, initialization and batch order.
    """
    from .data import split, vocab_corpus  # local: keeps module import order simple

    arms = arms if arms is not None else {"full": False, "nokg": True}
    vocab = vocab or build_vocab(vocab_corpus(dataset, kg))
    model_config = replace(model_config, vocab_size=len(vocab), n_concepts=kg.n_concepts, d_know=kg.d_know)
    from .kg import ConceptIndex
    index = ConceptIndex(kg, vocab)
    reports = {a: [] for a in arms}
    losses = {a: [] for a in arms}
    for seed in seeds:
        train_set, _, test_set = split(dataset, fractions, seed)
        encoded = [encode_example(ex.image_text, ex.instruction, ex.response, vocab, index, model_config.max_seq_len) for ex in train_set]
        for arm, disable in arms.items():
            cfg = replace(train_config, seed=seed, disable_kg=disable)
            result = train(encoded, kg, model_config, cfg)
            lm = LanguageModel(result.params, vocab, kg, use_kg=not disable)
            rep = evaluate(lm, test_set, kg, decode_config)
            log.info("seed %d arm %s: final loss %.4f, %s", seed, arm, result.losses[-1] if result.losses else float("nan"), rep.scalars())
            reports[arm].append(rep)
            losses[arm].append(result.losses)
    return AblationResult(list(seeds), reports, losses)
