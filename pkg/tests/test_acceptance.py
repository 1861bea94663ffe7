"""Acceptance gate: one test per criterion, each reported as PASS/FAIL at the end of the run."""

import contextlib
import itertools
import statistics
import subprocess
import sys
import time

import numpy as np
import pytest

from cxrlm.checkpoint import dumps, load_checkpoint, save_checkpoint
from cxrlm.data import GeneratorConfig, build_kg, dumps_jsonl, generate_dataset, read_jsonl, vocab_corpus, write_jsonl
from cxrlm.decode import DecodeConfig, beam, greedy, nucleus_filter, sample_nucleus, sequence_log_prob
from cxrlm.evaluation import ablation_run, error_rates, f1_scores, mrr, rouge_l
from cxrlm.findings import parse_findings, serialize_findings
from cxrlm.kg import ConceptIndex, ConceptMatchSet, load_kg, save_kg
from cxrlm.model import LanguageModel, ModelConfig, forward, init_params, softmax
from cxrlm.tokenizer import EOS, SPECIAL_TOKENS, build_vocab, load_vocab, save_vocab, tokenize
from cxrlm.training import TrainConfig, batch_loss, encode_example, gradient_check, random_problem, train

import conftest
from conftest import tiny_lm


@contextlib.contextmanager
def criterion(n: int, name: str):
    """Records PASS/FAIL for the summary; ``detail`` is filled in by the body."""
    info = {"detail": ""}
    try:
        yield info
    except BaseException as exc:
        conftest.ACCEPTANCE_RESULTS[n] = (name, "FAIL", info["detail"] or f"{type(exc).__name__}: {exc}".splitlines()[0])
        raise
    conftest.ACCEPTANCE_RESULTS[n] = (name, "PASS", info["detail"])


def test_1_gradient_fidelity():
    with criterion(1, "gradient fidelity") as c:
        start = time.perf_counter()
        config = ModelConfig(d_model=8, n_layers=2, n_heads=2, d_ff=16, d_know=4, vocab_size=20, max_seq_len=8, n_concepts=6)
        assert config.d_head == 4
        worst = 0.0
        for seed in range(3):
            examples, params = random_problem(config, seed, n_examples=3)
            assert all(len(ex.full_ids) <= 8 for ex in examples)
            errors = gradient_check(examples, params, use_kg=True, h=1e-5)
            assert set(errors) >= {"W_proj_k", "b_proj_k", "concept_embeddings"}
            worst = max(worst, max(errors.values()))
        elapsed = time.perf_counter() - start
        c["detail"] = f"max relative error {worst:.2e} (< 1e-6), {elapsed:.1f}s (< 60s)"
        assert worst < 1e-6
        assert elapsed < 60


def test_2_causality():
    with criterion(2, "causality") as c:
        rng = np.random.default_rng(0)
        checked = 0
        for i in range(100):
            lm = tiny_lm(seed=i % 10, max_seq_len=12)
            V, T = lm.config.vocab_size, int(rng.integers(2, 13))
            seq = rng.integers(0, V, size=T)
            knowledge = None if i % 4 == 0 else lm.concepts(seq.tolist())   # held fixed across the perturbation
            base = forward(seq, lm.params, knowledge).logits
            for j in range(T):
                other = seq.copy()
                other[j] = (other[j] + 1 + rng.integers(0, V - 1)) % V
                if j + 1 < T:
                    other[j + 1 :] = rng.integers(0, V, size=T - j - 1)
                out = forward(other, lm.params, knowledge).logits
                assert out[:j].tobytes() == base[:j].tobytes(), (i, j)
                checked += 1
        c["detail"] = f"100 inputs, {checked} perturbations, prefix logits bit-identical"


def test_3_normalization():
    with criterion(3, "normalization") as c:
        rng = np.random.default_rng(1)
        worst, rows = 0.0, 0
        for i in range(1000):
            lm = tiny_lm(seed=i % 20, scale=float(rng.choice([0.1, 1.0, 10.0, 100.0])))
            seq = rng.integers(0, lm.config.vocab_size, size=int(rng.integers(1, 13)))
            trace = forward(seq, lm.params, lm.concepts(seq.tolist()))
            probs = trace.probs()
            tau = float(rng.choice([0.3, 1.0, 2.5]))
            scaled = softmax(trace.logits[-1] / tau)
            _, kept = nucleus_filter(scaled, float(rng.uniform(0.05, 1.0)))
            sums = np.concatenate([probs.sum(axis=-1), [scaled.sum(), kept.sum()]])
            worst = max(worst, float(np.abs(sums - 1.0).max()))
            rows += len(sums)
        c["detail"] = f"1000 forwards, {rows} distributions, max |sum - 1| = {worst:.1e} (<= 1e-12)"
        assert worst <= 1e-12


def _overfit_setup():
    cfg = GeneratorConfig(seed=11, n_examples=32)
    data, kg = generate_dataset(cfg), build_kg(cfg)
    vocab = build_vocab(vocab_corpus(data, kg))
    index = ConceptIndex(kg, vocab)
    encoded = [encode_example(ex.image_text, ex.instruction, ex.response, vocab, index) for ex in data]
    T = max(len(ex.full_ids) for ex in encoded)
    model = ModelConfig(d_model=32, n_layers=2, n_heads=4, d_ff=64, d_know=cfg.d_know, vocab_size=len(vocab),
                        max_seq_len=T + 1, n_concepts=kg.n_concepts)
    return encoded, kg, vocab, model


def test_4_overfit():
    with criterion(4, "overfit run") as c:
        start = time.perf_counter()
        encoded, kg, vocab, model = _overfit_setup()
        result = train(encoded, kg, model, TrainConfig(learning_rate=3e-3, batch_size=32, total_steps=500, seed=0))
        final = batch_loss(encoded, result.params)
        lm = LanguageModel(result.params, vocab, kg)
        exact = sum(greedy(lm, list(ex.input_ids), DecodeConfig(max_new_tokens=64)) == list(ex.response_ids[:-1]) for ex in encoded)
        elapsed = time.perf_counter() - start
        c["detail"] = f"mean loss {final:.4f} (< 0.05), exact match {exact}/32 (>= 95%), {elapsed:.0f}s (< 300s)"
        assert final < 0.05
        assert exact / 32 >= 0.95
        assert elapsed < 300


ABLATION_DATA = dict(seed=7, n_examples=400, task_mix={"label_query": 1.0}, max_findings=2, p_normal=0.0,
                     p_attribute=0.0, p_relation=0.0, alias_rate=0.6, n_aliases=10, d_know=8)


def test_5_ablation_direction():
    with criterion(5, "ablation direction") as c:
        start = time.perf_counter()
        cfg = GeneratorConfig(**ABLATION_DATA)
        data, kg = generate_dataset(cfg), build_kg(cfg)
        model = ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, d_know=8, vocab_size=1, max_seq_len=24)
        result = ablation_run(data, kg, model, TrainConfig(learning_rate=3e-3, batch_size=32, total_steps=600), seeds=[0, 1, 2])
        full = [r.label_query_accuracy for r in result.reports["full"]]
        nokg = [r.label_query_accuracy for r in result.reports["nokg"]]
        gap = statistics.median(full) - statistics.median(nokg)
        elapsed = time.perf_counter() - start
        c["detail"] = (f"median label-query accuracy full {statistics.median(full):.3f} vs NoKG {statistics.median(nokg):.3f}, "
                       f"gap {100 * gap:.1f}pp (>= 5pp), {elapsed:.0f}s (< 1200s)")
        assert gap >= 0.05
        assert elapsed < 1200


def _exhaustive(lm, S, max_len):
    content = range(len(SPECIAL_TOKENS), lm.config.vocab_size)
    best = None
    for n in range(max_len + 1):
        for toks in itertools.product(content, repeat=n):
            done = n < max_len
            key = (-sequence_log_prob(lm, S, toks, done), toks + ((EOS,) if done else ()))
            best = key if best is None or key < best else best
    toks = best[1]
    return list(toks[:-1]) if toks and toks[-1] == EOS else list(toks)


def test_6_decoder_oracles():
    with criterion(6, "decoder oracles") as c:
        S = [5, 6, 1, 5]
        for seed in range(10):
            lm = tiny_lm(seed=seed, n_content=4, scale=1.5)   # emittable vocabulary: EOS + 4 tokens
            width = 5**4
            assert beam(lm, S, DecodeConfig(strategy="beam", beam_width=width, max_new_tokens=4)) == _exhaustive(lm, S, 4)
        for seed in range(100):
            lm = tiny_lm(seed=seed, scale=2.0)
            cfg = DecodeConfig(strategy="beam", beam_width=1, max_new_tokens=6)
            assert beam(lm, S, cfg) == greedy(lm, S, cfg)
        rng = np.random.default_rng(2024)
        n = 100_000
        counts = np.bincount([sample_nucleus(np.log([0.6, 0.3, 0.1]), 0.8, 1.0, rng) for _ in range(n)], minlength=3)
        z = []
        for tok, p in enumerate([2 / 3, 1 / 3, 0.0]):
            sigma = np.sqrt(n * p * (1 - p))
            assert abs(counts[tok] - n * p) <= 3 * sigma
            z.append(abs(counts[tok] - n * p) / sigma if sigma else 0.0)
        c["detail"] = f"beam = exhaustive on 10 models, width-1 beam = greedy on 100, nucleus max |z| = {max(z):.2f} (<= 3)"


def test_7_metric_oracles():
    with criterion(7, "metric oracles") as c:
        assert f1_scores([{"A"}], [{"A", "B"}], ["A", "B"])[:2] == (0.5, 2 / 3)
        assert abs(mrr([["g"], ["x", "g"], ["x", "y", "z", "g"]], ["g"] * 3) - 7 / 12) <= 1e-15
        assert abs(rouge_l(list("abc"), list("ac")) - 0.8) <= 1e-15
        rng = np.random.default_rng(7)
        labels = ["a", "b", "c", "d"]
        sets = lambda k: [set(rng.choice(labels, size=int(rng.integers(0, 4)), replace=False).tolist()) for _ in range(k)]
        for _ in range(50):
            k = int(rng.integers(1, 7))
            pred, gold = sets(k), sets(k)
            macro, micro, table = f1_scores(pred, gold, labels)
            f1s, pooled = [], [0, 0, 0]
            for l in labels:
                tp = sum(l in p and l in g for p, g in zip(pred, gold))
                fp = sum(l in p and l not in g for p, g in zip(pred, gold))
                fn = sum(l not in p and l in g for p, g in zip(pred, gold))
                assert (table[l].tp, table[l].fp, table[l].fn) == (tp, fp, fn)
                pooled = [pooled[0] + tp, pooled[1] + fp, pooled[2] + fn]
                if tp + fn:
                    f1s.append(2 * tp / (2 * tp + fp + fn) if tp else 0.0)
            if f1s:
                assert abs(macro - sum(f1s) / len(f1s)) <= 1e-12
            if sum(pooled):
                assert abs(micro - (2 * pooled[0] / (2 * pooled[0] + pooled[1] + pooled[2]) if pooled[0] else 0.0)) <= 1e-12
            h, m = error_rates(pred, gold)
            assert h == sum(bool(p - g) for p, g in zip(pred, gold)) / k
            assert m == sum(bool(g - p) for p, g in zip(pred, gold)) / k

            rankings = [rng.permutation(labels)[: int(rng.integers(0, 5))].tolist() for _ in range(k)]
            top = rng.choice(labels, size=k).tolist()
            ref = sum(1 / (r.index(t) + 1) if t in r else 0.0 for r, t in zip(rankings, top)) / k
            assert abs(mrr(rankings, top) - ref) <= 1e-12

            a = rng.choice(list("xyz"), size=int(rng.integers(1, 10))).tolist()
            b = rng.choice(list("xyz"), size=int(rng.integers(1, 10))).tolist()
            lcs = max((r for r in range(len(a) + 1) for idx in itertools.combinations(range(len(a)), r)
                       if _is_subsequence([a[i] for i in idx], b)), default=0)
            ref = 0.0 if lcs == 0 else 2 * lcs / (len(a) + len(b))
            assert abs(rouge_l(a, b) - ref) <= 1e-12
        c["detail"] = "worked examples exact; 50 random instances each for f1_scores, mrr, rouge_l, error_rates"


def _is_subsequence(sub, seq):
    it = iter(seq)
    return all(any(x == y for y in it) for x in sub)


def test_8_round_trips(tmp_path):
    with criterion(8, "round-trips") as c:
        cfg = GeneratorConfig(seed=5, n_examples=300, n_aliases=2, alias_rate=0.3)
        data, kg = generate_dataset(cfg), build_kg(cfg)
        for ex in data:
            assert parse_findings(serialize_findings(ex.image_repr)) == ex.image_repr
        vocab = build_vocab(vocab_corpus(data, kg))
        for ex in data:
            for text in (ex.image_text, ex.instruction, ex.response):
                assert vocab.decode(vocab.encode_text(text)) == tokenize(text)
        save_vocab(vocab, tmp_path / "v.tsv")
        assert load_vocab(tmp_path / "v.tsv") == vocab
        save_kg(kg, tmp_path / "kg.json")
        assert load_kg(tmp_path / "kg.json") == kg
        write_jsonl(data, tmp_path / "d.jsonl")
        assert read_jsonl(tmp_path / "d.jsonl") == data

        config = ModelConfig(d_model=16, n_layers=2, n_heads=4, d_ff=32, d_know=kg.d_know, vocab_size=len(vocab), max_seq_len=64, n_concepts=kg.n_concepts)
        params = init_params(config, 3, kg.embeddings)
        params["b_out"] = np.random.default_rng(0).normal(size=len(vocab))
        save_checkpoint(params, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert back.equals(params)
        index = ConceptIndex(kg, vocab)
        for ex in data[:20]:
            enc = encode_example(ex.image_text, ex.instruction, ex.response, vocab, index)
            assert forward(enc.full_ids, back, enc.concepts).logits.tobytes() == forward(enc.full_ids, params, enc.concepts).logits.tobytes()
        c["detail"] = "findings, vocabulary, KG file, dataset file, checkpoint (bit-identical logits)"


def _run_pipeline(workdir):
    """Full CLI pipeline in a fresh interpreter; returns the artifacts' bytes."""
    (workdir / "gen.json").write_text('{"seed": 4, "n_examples": 40}')
    (workdir / "model.json").write_text('{"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "max_seq_len": 64}')
    (workdir / "train.json").write_text('{"learning_rate": 0.003, "total_steps": 15, "batch_size": 8, "seed": 9}')
    (workdir / "f.txt").write_text("1: edema @left_lower_lobe\n2: pleural_effusion @left_apex ->adjacent_to#1\n")
    cli = [sys.executable, "-m", "cxrlm.cli"]
    run = lambda *args: subprocess.run(cli + list(args), cwd=workdir, check=True, capture_output=True, text=True).stdout
    run("gen-data", "--config", "gen.json", "--out", "d.jsonl", "--kg-out", "kg.json")
    run("train", "--data", "d.jsonl", "--kg", "kg.json", "--model-config", "model.json", "--train-config", "train.json", "--out", "m.ckpt")
    outs = []
    for strategy in ("greedy", "beam"):
        outs.append(run("generate", "--checkpoint", "m.ckpt", "--kg", "kg.json", "--findings", "f.txt",
                        "--instruction", "describe the findings", "--strategy", strategy, "--max-new-tokens", "12"))
    return {
        "dataset": (workdir / "d.jsonl").read_bytes(),
        "checkpoint": (workdir / "m.ckpt").read_bytes(),
        "greedy": outs[0],
        "beam": outs[1],
    }


def test_9_determinism(tmp_path):
    with criterion(9, "determinism") as c:
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        first, second = _run_pipeline(tmp_path / "a"), _run_pipeline(tmp_path / "b")
        for key in first:
            assert first[key] == second[key], key
        cfg = GeneratorConfig(seed=4, n_examples=40)
        assert dumps_jsonl(generate_dataset(cfg)).encode() == first["dataset"]
        c["detail"] = "two independent CLI runs: dataset, checkpoint, greedy and beam outputs byte-identical"
