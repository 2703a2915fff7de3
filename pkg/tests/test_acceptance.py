"""Acceptance criteria, one test and one summary line each.

The desk-scale criteria share one pretraining per seed and one joint run per
(lambda, rho, frozen) setting on the default world; the whole file takes
roughly a quarter of an hour on one core. Run alone with

    pytest tests/test_acceptance.py -v
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from psst import autodiff as ad
from psst.estimators import CategoricalDist, gumbel_max_sample, gumbel_softmax_relax, make_config
from psst.experiment import RunConfig, WorldContext, joint_train, pretrain, reference_recall
from psst.metrics import interpolate_recall
from psst.oracle import estimator_report, random_instance, unbiasedness_gate
from psst.world import generate_world

SEEDS = range(5)
RHOS = (0.0, 0.25, 0.5, 0.75, 1.0)
LAMS = (0.7, 0.85, 0.93, 0.97, 0.99, 1.0)
TESTS = Path(__file__).parent


# --------------------------------------------------------------- estimators


@pytest.fixture(scope="module")
def gate():
    rng = np.random.default_rng(0)
    instances = [random_instance(rng, 3, 2, "table") for _ in range(3)]
    t0 = time.perf_counter()
    ok, reports = unbiasedness_gate(instances, n_samples=200_000, seed=0)
    return ok, reports, time.perf_counter() - t0


def test_unbiasedness_gate(gate, acceptance):
    ok, reports, seconds = gate
    worst = max(r.max_abs_z() for r in reports)
    passed = ok and seconds < 120
    acceptance("estimator unbiasedness gate", passed,
               f"3 instances x 2 baselines, max |bias|/se = {worst:.2f} (< 3), {seconds:.0f}s (< 120s)")
    assert passed


def test_baseline_variance_reduction(gate, acceptance):
    _, reports, _ = gate
    red = [1 - reports[2 * i + 1].mean_variance / reports[2 * i].mean_variance for i in range(3)]
    passed = all(r > 0 for r in red) and max(red) >= 0.2
    acceptance("ground-truth baseline variance reduction", passed,
               "reductions " + ", ".join(f"{r:.0%}" for r in red) + " (all > 0, one >= 20%)")
    assert passed


def test_psst_reductions(tiny_world, acceptance):
    ctx = WorldContext(tiny_world)
    small = dict(hidden=8, embed=6, listener_hidden=8, batch_size=8, max_len=6, joint_epochs=2,
                 pretrain_speaker_epochs=2, pretrain_listener_epochs=2)
    sp, li, _ = pretrain(tiny_world, RunConfig(**small), ctx=ctx)

    def run(method, rho):
        _, points, (s, l) = joint_train(tiny_world, RunConfig(method=method, rho=rho, **small), sp, li, ctx=ctx)
        return [(p.cider, p.recall1, p.recall5, p.recall10) for p in points], np.concatenate([s.flat(), l.flat()])

    same = []
    for family in ("mn", "gs"):
        a, b = run(f"psst-{family}", 0.0), run(f"st-{family}", None)
        same.append(a[0] == b[0] and np.array_equal(a[1], b[1]))
    r1, r2 = run("psst-mn", 1.0), run("psst-mn", 1.0)
    repeat = r1[0] == r2[0] and np.array_equal(r1[1], r2[1])
    passed = all(same) and repeat
    acceptance("PSST reductions", passed,
               f"rho=0 replays ST (mn {same[0]}, gs {same[1]}); rho=1 bit-identical on repeat {repeat}")
    assert passed


def test_variance_ordering(acceptance):
    rng = np.random.default_rng(0)
    detail, passed = [], True
    for loss in ("table", "listener"):
        worst = 0
        for _ in range(3):
            inst, params = random_instance(rng, 3, 2, loss)
            inversions = 0
            for rep in range(10):
                v = [estimator_report(inst, params, make_config("psst-mn", rho=rho), 20_000,
                                      np.random.default_rng([rep])).mean_variance for rho in RHOS]
                inversions += any(b > a for a, b in zip(v, v[1:]))
            worst = max(worst, inversions)
        passed &= worst <= 1
        detail.append(f"{loss} losses: worst {worst}/10 repetitions inverted")
    acceptance("variance non-increasing in rho", passed, "; ".join(detail) + " (<= 1 allowed)")
    assert passed


def test_sampling_correctness(acceptance):
    rng = np.random.default_rng(0)
    pvals = []
    for vocab in (2, 8, 32):
        p = rng.dirichlet(np.ones(vocab))
        draws = gumbel_max_sample(np.tile(p, (100_000, 1)), rng)
        pvals.append(stats.chisquare(np.bincount(draws, minlength=vocab), 100_000 * p).pvalue)
    tape = ad.Tape()
    dist = CategoricalDist.from_logits(tape.constant(rng.normal(size=(4, 6))))
    equal = gumbel_softmax_relax(dist, np.full((4, 6), 0.3), 1.0).value
    sharp = gumbel_softmax_relax(dist, -np.log(-np.log(rng.uniform(size=(4, 6)))), 1e-4).value
    probs_err = float(np.abs(equal - dist.probs.value).max())
    passed = min(pvals) > 0.01 and probs_err <= 1e-12 and sharp.max(axis=1).min() >= 1 - 1e-6
    acceptance("sampling correctness", passed,
               "chi-square p " + ", ".join(f"{p:.3f}" for p in pvals)
               + f"; equal-noise error {probs_err:.1e}; min max-entry at tau=1e-4 {sharp.max(axis=1).min():.8f}")
    assert passed


# --------------------------------------------------------------- desk scale


class Desk:
    """Default world, five pretrained seeds, memoised joint runs."""

    def __init__(self):
        t0 = time.perf_counter()
        self.world = generate_world()
        self.ctx = WorldContext(self.world)
        self.base = RunConfig()
        self.pretrained, self.history = {}, {}
        for s in SEEDS:
            sp, li, hist = pretrain(self.world, self.base.replace(seed=s), ctx=self.ctx)
            self.pretrained[s] = (sp, li)
            self.history[s] = hist
        self.pretrain_seconds = time.perf_counter() - t0
        self.runs = {}
        self.seconds = {}

    def run(self, **changes):
        key = tuple(sorted(self.base.replace(**changes).to_dict().items()))
        if key not in self.runs:
            t0 = time.perf_counter()
            self.runs[key] = {
                s: joint_train(self.world, self.base.replace(seed=s, **changes), *self.pretrained[s], ctx=self.ctx)[1]
                for s in SEEDS
            }
            self.seconds[key] = time.perf_counter() - t0
        return self.runs[key], self.seconds[key]


@pytest.fixture(scope="module")
def desk():
    return Desk()


@pytest.mark.slow
def test_pretraining_progress(desk, acceptance):
    """Supporting check, not a headline criterion."""
    nll = [(h["speaker_val_nll"][0], h["speaker_val_nll"][-1]) for h in desk.history.values()]
    r1 = [reference_recall(desk.ctx, li, "val", ks=(1,), pool=32)["recall1"] for _, li in desk.pretrained.values()]
    passed = all(b < a for a, b in nll) and min(r1) >= 5 / 32
    acceptance("(supporting) pretraining progress", passed,
               f"val NLL {np.mean([a for a, _ in nll]):.3f} -> {np.mean([b for _, b in nll]):.3f}; "
               f"listener recall@1 with 31 distractors min {min(r1):.3f} (>= 5x chance {5 / 32:.3f})")
    assert passed


@pytest.mark.slow
def test_fig4_rho_robustness(desk, acceptance):
    curves, seconds = {}, desk.pretrain_seconds
    for rho in RHOS:
        curves[rho], t = desk.run(rho=rho)
        seconds += t
    every = [p.cider for runs in curves.values() for pts in runs.values() for p in pts]
    level = float(np.median(every))
    med = {
        rho: float(np.median([interpolate_recall([(p.cider, p.recall1) for p in pts], level) for pts in runs.values()]))
        for rho, runs in curves.items()
    }
    passed = med[0.5] >= med[0.0] and med[0.5] >= med[1.0] and seconds < 1800
    acceptance("rho robustness at matched CIDEr", passed,
               f"CIDEr level {level:.3f}; median recall@1 "
               + ", ".join(f"rho={r:g}: {v:.3f}" for r, v in med.items())
               + f"; needs rho=0.5 >= rho=0 and rho=1; {seconds:.0f}s (< 1800s)")
    assert passed


@pytest.mark.slow
def test_fig3_tradeoff(desk, acceptance):
    recall, cider = [], []
    for lam in LAMS:
        runs, _ = desk.run(lam=lam)
        recall.append(float(np.median([pts[-1].recall1 for pts in runs.values()])))
        cider.append(float(np.median([pts[-1].cider for pts in runs.values()])))
    r_rho = stats.spearmanr(LAMS, recall)[0]
    c_rho = stats.spearmanr(LAMS, cider)[0]
    passed = r_rho >= 0.6 and c_rho <= -0.6
    acceptance("discriminability/naturalness trade-off over lambda", passed,
               f"Spearman(lambda, recall@1) = {r_rho:+.2f} (>= +0.6), Spearman(lambda, CIDEr) = {c_rho:+.2f} (<= -0.6); "
               + "medians " + ", ".join(f"{l:g}: {r:.2f}/{c:.3f}" for l, r, c in zip(LAMS, recall, cider)))
    assert passed


@pytest.mark.slow
def test_joint_beats_frozen(desk, acceptance):
    joint, _ = desk.run()
    frozen, _ = desk.run(freeze_speaker=True)
    j = np.array([pts[-1].recall1 for pts in joint.values()])
    f = np.array([pts[-1].recall1 for pts in frozen.values()])
    sd = max(j.std(ddof=1), f.std(ddof=1))
    gap = float(np.median(j) - np.median(f))
    passed = gap >= sd
    acceptance("joint training beats frozen speaker", passed,
               f"median recall@1 joint {np.median(j):.3f} vs frozen {np.median(f):.3f}; gap {gap:.3f} >= seed sd {sd:.3f}")
    assert passed


# ---------------------------------------------------------------- unit suites


def test_metric_and_gradient_suites(acceptance):
    files = ["test_metrics.py", "test_autodiff.py", "test_agents.py", "test_oracle.py"]
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           *[str(TESTS / f) for f in files]], capture_output=True, text=True)
    summary = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()[-200:]
    passed = proc.returncode == 0
    acceptance("metric and finite-difference suites", passed, summary)
    assert passed, proc.stdout[-3000:]
