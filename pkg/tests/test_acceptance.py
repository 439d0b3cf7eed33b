"""Acceptance criteria.

Each test records a single PASS/FAIL line (see ``criterion_log`` in
conftest); the lines are repeated in the pytest terminal summary.  Training
criteria are marked ``slow``.
"""

import math
import statistics

import pytest
import torch

from ar2diff.bench import latency_benchmark, linear_fit_r2
from ar2diff.data import Batch, collate, make_pair_example
from ar2diff.decoding import SamplerSettings, ar_generate
from ar2diff.losses import DiffusionSettings, ar_loss, ar_objective, sundae_loss, sundae_objective
from ar2diff.metrics import evaluate, sweep
from ar2diff.model import (
    AttentionMode,
    ModelConfig,
    build_attention_mask,
    forward,
    init_weights,
    value_and_grad,
)
from ar2diff.tasks import (
    CopyTask,
    PythonLikeTemplateTask,
    SubstitutionCipherTask,
    generate_task_pairs,
    train_test_split,
)
from ar2diff.training import CorpusStream, Stage, StagePlan, TaskStream, run_ar2diff, train

from conftest import random_tokens

# -- 1. gradient fidelity -----------------------------------------------------------------

FD_STEP = 1e-3
FD_TOL = 1e-3
FD_COORDS = 120


def _fd_check(weights, fn, n_coords, seed):
    """Worst relative error between autograd and central differences over random coordinates."""
    _, grads, _ = value_and_grad(weights, lambda w: (fn(w), {}))
    g = torch.Generator().manual_seed(seed)
    names = sorted(weights.tensors)
    sizes = torch.tensor([weights[n].numel() for n in names], dtype=torch.float64)
    worst = 0.0
    for _ in range(n_coords):
        # sample tensors proportionally to size so every coordinate is equally likely
        name = names[int(torch.multinomial(sizes, 1, generator=g))]
        idx = int(torch.randint(weights[name].numel(), (1,), generator=g))
        flat = weights[name].view(-1)
        old = float(flat[idx])
        flat[idx] = old + FD_STEP
        up = float(fn(weights))
        flat[idx] = old - FD_STEP
        down = float(fn(weights))
        flat[idx] = old
        fd = (up - down) / (2 * FD_STEP)
        a = float(grads[name].view(-1)[idx])
        worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-12))
    return worst


def test_criterion_01_gradient_fidelity(criterion_log):
    cfg = ModelConfig(vocab_size=11, d_model=8, n_layers=1, n_heads=2, d_ff=32, max_seq_len=12, seed=3)
    # finite differences are taken in float64 so that rounding noise stays far below the tolerance
    w = init_weights(cfg).to(torch.float64)
    tokens = random_tokens(4, 10, 3, 11, seed=1)
    prefix = torch.tensor([3, 4, 5, 2])
    pos = torch.arange(10)
    batch = Batch(tokens, prefix, pos[None] >= prefix[:, None], torch.full((4,), 10))

    ar_worst = _fd_check(w, lambda m: ar_objective(m, batch)[0], FD_COORDS, 0)

    gen = torch.Generator().manual_seed(5)
    corrupted = tokens.clone()
    noise = torch.randint(3, 11, tokens.shape, generator=gen)
    pick = (torch.rand(tokens.shape, generator=gen) < 0.5) & batch.loss_mask
    corrupted[pick] = noise[pick]
    _, _, aux = value_and_grad(w, lambda m: sundae_objective(m, batch, corrupted, DiffusionSettings(), gen))
    pinned = aux["unrolled"]
    sundae_worst = _fd_check(
        w, lambda m: sundae_objective(m, batch, corrupted, DiffusionSettings(), None, pinned)[0], FD_COORDS, 1
    )
    ok = ar_worst <= FD_TOL and sundae_worst <= FD_TOL
    criterion_log(1, "gradient fidelity", ok,
                  f"max rel err ar={ar_worst:.2e} sundae={sundae_worst:.2e} over {FD_COORDS} coords each "
                  f"(tol {FD_TOL:g})")
    assert ok


# -- 2. init-loss sanity --------------------------------------------------------------------


def test_criterion_02_init_loss(criterion_log, vocab):
    cfg = ModelConfig(vocab_size=len(vocab), seed=0)
    w = init_weights(cfg)
    g = torch.Generator().manual_seed(0)
    exs = []
    for _ in range(32):
        src = torch.randint(vocab.first_regular_id, len(vocab), (20,), generator=g).tolist()
        tgt = torch.randint(vocab.first_regular_id, len(vocab), (24,), generator=g).tolist()
        exs.append(make_pair_example(src, tgt, 24, 64))
    batch = collate(exs, 45)
    ar, _ = ar_loss(w, batch)
    _, _, aux = sundae_loss(w, batch, vocab, torch.Generator().manual_seed(1))
    ref = math.log(len(vocab))
    ar_dev, l1_dev = abs(float(ar) - ref) / ref, abs(aux["L1"] - ref) / ref
    ok = ar_dev < 0.05 and l1_dev < 0.05
    criterion_log(2, "init loss", ok, f"ln V={ref:.3f} ar={float(ar):.3f} ({ar_dev:.1%}) "
                  f"L1={aux['L1']:.3f} ({l1_dev:.1%}), tol 5%")
    assert ok


# -- 3. mask soundness -------------------------------------------------------------------------


def test_criterion_03_mask_soundness(criterion_log, vocab):
    # one layer: position i can depend on token j iff the mask allows i -> j
    cfg = ModelConfig(vocab_size=len(vocab), d_model=16, n_layers=1, n_heads=2, d_ff=32, max_seq_len=16, seed=7)
    w = init_weights(cfg)
    checked = violations = 0
    for s in range(1, 17):
        modes = [AttentionMode.causal(), AttentionMode.full()] + [AttentionMode.prefix(p) for p in range(s + 1)]
        x = random_tokens(1, s, vocab.first_regular_id, len(vocab), seed=s)
        for mode in modes:
            mask = build_attention_mask(mode, s)
            base = forward(w, x, mask)[0]
            for j in range(s):
                y = x.clone()
                y[0, j] = vocab.first_regular_id + (int(x[0, j]) - vocab.first_regular_id + 1) % 96
                changed = (forward(w, y, mask)[0] != base).any(-1)
                checked += s
                violations += int((changed != mask[:, j]).sum())
    ok = violations == 0
    criterion_log(3, "mask soundness", ok, f"{violations} leaks or dead links in {checked} (i, j, mode) checks")
    assert ok


# -- 4. KV-cache equivalence -------------------------------------------------------------------


def test_criterion_04_kv_cache(criterion_log, vocab):
    w = init_weights(ModelConfig(vocab_size=len(vocab), max_seq_len=64, seed=2))
    g = torch.Generator().manual_seed(0)
    worst, mismatched = 0.0, 0
    for i in range(100):
        plen = int(torch.randint(1, 17, (1,), generator=g))
        prompt = torch.randint(vocab.first_regular_id, len(vocab), (1, plen), generator=g)
        a, la = ar_generate(w, prompt, 24, use_cache=True, stop_at_pad=False, return_logits=True)
        b, lb = ar_generate(w, prompt, 24, use_cache=False, stop_at_pad=False, return_logits=True)
        worst = max(worst, float((la - lb).abs().max()))
        mismatched += int(not torch.equal(a, b))
    ok = worst <= 1e-5 and mismatched == 0
    criterion_log(4, "kv-cache equivalence", ok,
                  f"max |dlogit|={worst:.2e} (tol 1e-5), {mismatched}/100 greedy outputs differ")
    assert ok


# -- 5. memorization ---------------------------------------------------------------------------

MEMO_STEPS = 500


def memorization_pairs():
    """32 pairs of unrelated random words; nothing to learn but the table itself."""
    words = CopyTask(min_len=4, max_len=10)
    src = [s for s, _ in generate_task_pairs(words, 101, 32)]
    tgt = [s for s, _ in generate_task_pairs(words, 202, 32)]
    return list(zip(src, tgt))


@pytest.fixture(scope="module")
def memorized(vocab, tmp_path_factory):
    pairs = memorization_pairs()
    cfg = ModelConfig(vocab_size=len(vocab), d_model=128, n_layers=4, n_heads=4, d_ff=768, max_seq_len=32, seed=0)
    stream = TaskStream(vocab, pairs, 12, batch_size=32, seq_len=32, seed=0, name="memo")
    res = train(Stage("memo", "diffusion", MEMO_STEPS), init_weights(cfg), stream, vocab,
                tmp_path_factory.mktemp("memo"))
    return res, pairs


@pytest.mark.slow
def test_criterion_05_memorization(criterion_log, memorized, vocab):
    res, pairs = memorized
    task = CopyTask(min_len=4, max_len=10, target_window=12)
    rep = evaluate(res.weights, task, pairs, vocab, SamplerSettings(target_window=12))
    ok = rep.value >= 0.95
    criterion_log(5, "memorization", ok, f"exact match {rep.value:.3f} on 32 pairs (bar 0.95), "
                  f"{res.weights.num_parameters()} params, {MEMO_STEPS} steps, T=10 N=8 tau=0.2")
    assert ok


# -- 6. toy-task competence --------------------------------------------------------------------

CIPHER_STEPS = 2500


def small_config(vocab, max_seq_len=40, seed=0):
    return ModelConfig(vocab_size=len(vocab), d_model=64, n_layers=2, n_heads=4, d_ff=256,
                       max_seq_len=max_seq_len, seed=seed)


@pytest.mark.slow
def test_criterion_06_cipher_from_scratch(criterion_log, vocab, tmp_path):
    task = SubstitutionCipherTask()
    train_pairs, test_pairs = train_test_split(task, 0, 10_000, 200)
    stream = TaskStream(vocab, train_pairs, task.target_window, 32, 40, 0, "cipher")
    scores = {}
    for kind in ("diffusion", "ar"):
        res = train(Stage(kind, kind, CIPHER_STEPS), init_weights(small_config(vocab)), stream, vocab, tmp_path)
        mode = "diffusion" if kind == "diffusion" else "ar"
        scores[kind] = evaluate(res.weights, task, test_pairs, vocab, SamplerSettings(), mode=mode).value
    ok = scores["diffusion"] >= 0.9 and scores["ar"] >= 0.9
    criterion_log(6, "cipher from scratch", ok,
                  f"diffusion EM {scores['diffusion']:.3f}, AR greedy EM {scores['ar']:.3f} on 200 held-out "
                  f"pairs (bar 0.90), {CIPHER_STEPS} steps each")
    assert ok


# -- 7. AR2Diff trend ----------------------------------------------------------------------------

AR2DIFF_PRETRAIN = 2000
AR2DIFF_NS = (0, 2000, 10000)
AR2DIFF_FINETUNE = 2500
AR2DIFF_SEEDS = (0, 1, 2)


@pytest.mark.slow
def test_criterion_07_ar2diff_trend(criterion_log, vocab, tmp_path):
    task = SubstitutionCipherTask()
    train_pairs, test_pairs = train_test_split(task, 0, 10_000, 200)
    cfg = small_config(vocab, max_seq_len=64)
    corpus = CorpusStream(vocab, seed=0, batch_size=32, seq_len=64, target_len=24)
    ancestor = None
    per_n = {n: [] for n in AR2DIFF_NS}
    for seed in AR2DIFF_SEEDS:
        plan = StagePlan(
            Stage("pretrain", "ar", AR2DIFF_PRETRAIN),
            Stage("adapt", "diffusion", 0, seed=seed),
            Stage("finetune", "diffusion", AR2DIFF_FINETUNE, seed=seed),
            AR2DIFF_NS,
            ancestor,
        )
        stream = TaskStream(vocab, train_pairs, task.target_window, 32, 64, seed, "cipher")
        finals, _ = run_ar2diff(plan, init_weights(cfg), corpus, stream, vocab, tmp_path / f"seed{seed}")
        ancestor = str(tmp_path / "seed0" / f"pretrain_{AR2DIFF_PRETRAIN}.ckpt")
        for n, w in finals.items():
            per_n[n].append(evaluate(w, task, test_pairs, vocab, SamplerSettings(seed=seed)).value)
    med = {n: statistics.median(v) for n, v in per_n.items()}
    ns = sorted(med)
    ok = all(med[b] >= med[a] - 0.02 for i, a in enumerate(ns) for b in ns[i + 1:])
    detail = ", ".join(f"N={n}: median {med[n]:.3f} {per_n[n]}" for n in ns)
    criterion_log(7, "AR2Diff trend", ok, detail + " (need EM(N2) >= EM(N1) - 0.02)")
    assert ok


# -- 8. inference ablation -------------------------------------------------------------------------

CODE_STEPS = 1500
CODE_SEEDS = (0, 1, 2)


@pytest.mark.slow
def test_criterion_08_steps_samples_ablation(criterion_log, vocab, tmp_path):
    task = PythonLikeTemplateTask()
    train_pairs, test_pairs = train_test_split(task, 0, 5000, 200)
    cells = {(20, 8): [], (5, 8): [], (10, 16): [], (10, 4): []}
    for seed in CODE_SEEDS:
        stream = TaskStream(vocab, train_pairs, task.target_window, 32, 64, seed, "code")
        res = train(Stage("code", "diffusion", CODE_STEPS, seed=seed), init_weights(small_config(vocab, 64, seed)),
                    stream, vocab, tmp_path / f"seed{seed}")
        base = SamplerSettings(target_window=task.target_window, seed=seed)
        for t, n in cells:
            cells[(t, n)].append(sweep(res.weights, task, test_pairs, vocab, [t], [n], base)[0][0].value)
    med = {k: statistics.median(v) for k, v in cells.items()}
    ok_t = med[(20, 8)] >= med[(5, 8)] - 0.02
    ok_n = med[(10, 16)] >= med[(10, 4)] - 0.02
    detail = ", ".join(f"(T={t},N={n}) {med[(t, n)]:.3f} {cells[(t, n)]}" for t, n in cells)
    criterion_log(8, "steps/samples ablation", ok_t and ok_n, detail)
    assert ok_t and ok_n


# -- 9. latency crossover -------------------------------------------------------------------------

BENCH_LENGTHS = (64, 128, 256, 512)
BENCH_TRIALS = 3


def test_criterion_09_latency_crossover(criterion_log, vocab):
    cfg = ModelConfig(vocab_size=len(vocab), d_model=32, n_layers=1, n_heads=2, d_ff=128, max_seq_len=520)
    w = init_weights(cfg)
    trials = [latency_benchmark(w, vocab, BENCH_LENGTHS, num_steps=10, reps=7, seed=t) for t in range(BENCH_TRIALS)]

    def med(kind, length, field="median_ms"):
        return statistics.median(getattr(r, field) for recs in trials for r in recs
                                 if r.kind == kind and r.length == length)

    ar = [med("ar", n) for n in BENCH_LENGTHS]
    diff = [med("diffusion", n) for n in BENCH_LENGTHS]
    r2 = linear_fit_r2(BENCH_LENGTHS, ar)
    ratio = [a / d for a, d in zip(ar, diff)]
    increasing = all(b > a for a, b in zip(ratio, ratio[1:]))
    per_step = [med("diffusion", n, "per_unit_ms") for n in BENCH_LENGTHS]
    per_tok = [med("ar", n, "per_unit_ms") for n in BENCH_LENGTHS]
    step_gt_token = all(s > t for s, t in zip(per_step, per_tok))
    ok = r2 >= 0.95 and increasing and step_gt_token
    criterion_log(9, "latency crossover", ok,
                  f"(a) AR R^2={r2:.4f} (b) ratio AR/diff={[round(x, 2) for x in ratio]} "
                  f"(c) ms/step={[round(x, 3) for x in per_step]} > ms/token={[round(x, 3) for x in per_tok]}")
    assert ok


# -- 10. determinism and restart ----------------------------------------------------------------------


def test_criterion_10_determinism(criterion_log, vocab, tmp_path):
    cfg = ModelConfig(vocab_size=len(vocab), d_model=32, n_layers=2, n_heads=2, d_ff=64, max_seq_len=40, seed=4)
    pairs = generate_task_pairs(SubstitutionCipherTask(), 0, 500)
    stream = TaskStream(vocab, pairs, 16, 16, 40, 0, "cipher")
    checks = []
    for kind in ("ar", "diffusion"):
        stage = Stage(kind, kind, 60, warmup_steps=10, batch_size=16, checkpoint_every=25, seed=9)
        a = train(stage, init_weights(cfg), stream, vocab, tmp_path / f"{kind}_a")
        b = train(stage, init_weights(cfg), stream, vocab, tmp_path / f"{kind}_b")
        r = train(stage, init_weights(cfg), stream, vocab, tmp_path / f"{kind}_r",
                  resume_from=tmp_path / f"{kind}_a" / f"{kind}_25.ckpt")
        checks.append((kind, a.losses == b.losses, a.weights.equal(b.weights), r.weights.equal(a.weights)))
    ok = all(all(c[1:]) for c in checks)
    criterion_log(10, "determinism and restart", ok,
                  "; ".join(f"{k}: curves identical={c}, weights identical={w}, resume identical={r}"
                            for k, c, w, r in checks))
    assert ok
