"""Acceptance criteria, one test each; every test prints a PASS/FAIL line with the measured values.

Run standalone with ``python tests/test_acceptance.py`` or via pytest.
"""
import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from conftest import textured_raster
from qprobe import cli, evaluation, grpo, rank, rewards, sim, wavelet
from qprobe.model import Region, read_manifest, save_raster

SEEDS = range(5)
MATH_TOL = 1e-9


@pytest.fixture
def emit(capsys):
    def _emit(n, ok, detail, elapsed=None, limit=None):
        timing = "" if elapsed is None else f" [{elapsed:.1f}s{'' if limit is None else f' / limit {limit}s'}]"
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}{timing}")
    return _emit


def _random_box(rng, size=200):
    x, y = rng.integers(0, size, 2)
    w, h = rng.integers(1, size, 2)
    return int(x), int(y), int(w), int(h)


def test_1_reward_math_matches_oracles(emit):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = {"ranking": 0.0, "objective": 0.0, "accuracy": 0.0, "localization": 0.0, "total": 0.0}
    for _ in range(1000):
        qi, qj = rng.uniform(1, 5, (2, 6))
        y = float(rng.choice([0.0, 0.5, 1.0]))
        got = rank.pair_rewards(qi, qj, y)
        want = oracles.pair_rewards(list(qi), list(qj), y, 1e-3)
        worst["ranking"] = max(worst["ranking"], float(np.max(np.abs(got - want))))

        new, ref = -rng.uniform(0.1, 3, (2, 6))
        old = new + rng.normal(0, 0.3, 6)
        r = rng.random(6)
        value, _ = grpo.grpo_terms(new, old, ref, grpo.group_advantages(r))
        worst["objective"] = max(worst["objective"],
                                 abs(value - oracles.grpo_objective(new, old, ref, r, 0.2, 0.01)))

        s, mos = rng.uniform(1, 5, 2)
        worst["accuracy"] = max(worst["accuracy"], abs(rewards.acc_reward(s, mos) - oracles.acc(s, mos, 0.5)))

        a, b = _random_box(rng), _random_box(rng)
        worst["localization"] = max(worst["localization"],
                                    abs(rewards.iou(Region(*a), Region(*b)) - oracles.rect_iou(a, b)))

        ra, rl, rf = rng.random(3)
        total = rewards.total_reward(ra, rl, rf).r_total
        worst["total"] = max(worst["total"], abs(total - (1.0 * ra + 0.15 * rl + 0.1 * rf)))
    # pixel-set definition on small boxes cross-checks the closed-form IoU oracle itself
    for _ in range(200):
        a, b = _random_box(rng, 12), _random_box(rng, 12)
        worst["localization"] = max(worst["localization"],
                                    abs(rewards.iou(Region(*a), Region(*b)) - oracles.pixel_iou(a, b)))
    defaults = (grpo.DEFAULT_K == 6 and grpo.DEFAULT_EPSILON == 0.2
                and rewards.RewardWeights() == rewards.RewardWeights(1.0, 0.15, 0.1)
                and sim.SimConfig().k == 6 and sim.SimConfig().epsilon == 0.2
                and (sim.SimConfig().alpha, sim.SimConfig().beta_loc) == (1.0, 0.15))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= MATH_TOL and defaults and elapsed < 5
    emit(1, ok, "max abs error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
         + f"; defaults K=6 eps=0.2 alpha=1 beta=0.15: {defaults}", elapsed, 5)
    assert ok


def test_2_gradient_fidelity(emit):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    errors = []
    for i in range(50):
        n_act, n_feat, n = int(rng.integers(2, 8)), int(rng.integers(1, 6)), 6
        pol = grpo.ToyPolicy(rng.normal(size=(n_act, n_feat)))
        obs = rng.normal(size=(n, n_feat))
        acts = rng.integers(n_act, size=n)
        if i % 2 == 0:
            old = pol.logp(obs, acts) + rng.normal(0, 0.3, n)
            ref = pol.logp(obs, acts) + rng.normal(0, 0.5, n)
            adv = grpo.group_advantages(rng.random(n))

            def objective(p, obs=obs, acts=acts, old=old, ref=ref, adv=adv):
                value, coef = grpo.grpo_terms(p.logp(obs, acts), old, ref, adv)
                return value, p.grad_logp(obs, acts, coef)
        else:
            def objective(p, obs=obs, acts=acts):
                return grpo.bc_loss_and_grad(p, obs, acts)
        errors.append(grpo.grad_check(pol, objective))
    elapsed = time.perf_counter() - t0
    worst = max(errors)
    ok = worst <= 1e-4 and elapsed < 30
    emit(2, ok, f"50 instances (25 policy-gradient, 25 cloning), max relative error {worst:.2e}", elapsed, 30)
    assert ok


def test_3_wavelet_correctness(emit):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    rec_err, energy_err, n_parseval = 0.0, 0.0, 0
    for i in range(1000):
        levels = int(rng.integers(1, 4))
        unit = 2 ** levels
        if i % 2:
            h, w = (int(rng.integers(1, 256 // unit + 1)) * unit for _ in range(2))
        else:
            h, w = (int(rng.integers(unit, 257)) for _ in range(2))
        x = rng.random((h, w))
        pyr = wavelet.dwt2(x, levels)
        rec_err = max(rec_err, float(np.max(np.abs(wavelet.idwt2_array(pyr) - x))))
        if h % unit == 0 and w % unit == 0:
            n_parseval += 1
            e = float(np.sum(x ** 2))
            energy_err = max(energy_err, abs(wavelet.pyramid_energy(pyr) - e) / e)
    elapsed = time.perf_counter() - t0
    ok = rec_err <= 1e-6 and energy_err <= 1e-6 and n_parseval >= 500 and elapsed < 60
    emit(3, ok, f"1000 rasters, max reconstruction error {rec_err:.1e}; "
                f"Parseval relative error {energy_err:.1e} on {n_parseval} evenly divisible sizes", elapsed, 60)
    assert ok


def test_4_metric_correctness(emit):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(200):
        n = int(rng.integers(3, 60))
        # half the vectors are coarsely quantized so ties are common
        p = rng.integers(0, 6, n).astype(float) if i % 2 else rng.normal(size=n)
        g = rng.integers(0, 6, n).astype(float) if i % 3 == 0 else rng.uniform(1, 5, n)
        if np.ptp(p) == 0 or np.ptp(g) == 0:
            p[0], g[0] = p[0] + 1, g[0] + 1
        worst = max(worst, abs(evaluation.srcc(p, g) - oracles.spearman(list(p), list(g))),
                    abs(evaluation.plcc(p, g) - oracles.pearson(list(p), list(g))))
    x = np.sort(rng.normal(size=100))
    monotone = evaluation.srcc(np.exp(x), x)
    elapsed = time.perf_counter() - t0
    ok = worst <= MATH_TOL and monotone == 1.0 and elapsed < 5
    emit(4, ok, f"200 vectors, max error vs brute force {worst:.1e}; monotone SRCC {monotone!r}", elapsed, 5)
    assert ok


def _fmt(rows, key):
    return " ".join(f"{v:.3f}" for v in rows[key])


def test_5_crop_strategy_ablation(emit):
    t0 = time.perf_counter()
    rep = sim.run_ablation("crop_strategy", SEEDS)
    order = [row["ordering_holds"] for row in rep["per_seed"]]
    gaps = [row["configs"]["degradation_only"]["stage2_bias_gap"] - row["configs"]["all_plus_context"]["stage2_bias_gap"]
            for row in rep["per_seed"]]
    srcc = {name: [row["configs"][name]["srcc"] for row in rep["per_seed"]] for name in sim.ABLATIONS["crop_strategy"]}
    elapsed = time.perf_counter() - t0
    n_order, n_gap = sum(order), sum(g >= 0.3 for g in gaps)
    ok = n_order >= 4 and n_gap >= 4 and elapsed < 600
    emit(5, ok, f"ordering deg<partial<all in {n_order}/5 seeds; bias-gap difference >= 0.3 bins in {n_gap}/5 "
                f"(gaps {' '.join(f'{g:.2f}' for g in gaps)}); SRCC degradation_only {_fmt(srcc, 'degradation_only')} "
                f"| partial {_fmt(srcc, 'partial')} | all_plus_context {_fmt(srcc, 'all_plus_context')}", elapsed, 600)
    assert ok


def test_6_reward_ablation(emit):
    t0 = time.perf_counter()
    rep = sim.run_ablation("rewards", SEEDS)
    wins = []
    for row in rep["per_seed"]:
        base, full = row["configs"]["acc"], row["configs"]["acc_fmt_loc"]
        wins.append(full["srcc"] > base["srcc"] and full["hit_rate"] > base["hit_rate"])
    cols = {f"{name} {metric}": [row["configs"][name][metric] for row in rep["per_seed"]]
            for name in ("acc", "acc_fmt_loc") for metric in ("srcc", "hit_rate")}
    elapsed = time.perf_counter() - t0
    ok = sum(wins) >= 4 and elapsed < 600
    emit(6, ok, f"localization reward raises SRCC and hit rate in {sum(wins)}/5 seeds; "
         + "; ".join(f"{k} {_fmt(cols, k)}" for k in cols), elapsed, 600)
    assert ok


@pytest.fixture(scope="module")
def stage_ablation():
    t0 = time.perf_counter()
    rep = sim.run_ablation("stages", SEEDS)
    return rep, time.perf_counter() - t0


def test_7_stage_ablation(emit, stage_ablation):
    rep, elapsed = stage_ablation
    names = list(sim.ABLATIONS["stages"])
    avg = {name: [row["configs"][name]["srcc_avg"] for row in rep["per_seed"]] for name in names}
    ok = rep["holds"] >= 4 and elapsed < 1200
    chain = sum(row["chain_holds"] for row in rep["per_seed"])
    emit(7, ok, f"full curriculum best in {rep['holds']}/5 seeds (strict chain in {chain}/5); mean SRCC over "
                "high/low resolution " + "; ".join(f"{n} {_fmt(avg, n)}" for n in names), elapsed, 1200)
    assert ok


def test_8_stage1_variance_contracts(emit, stage_ablation):
    rep, _ = stage_ablation
    flags = [row["configs"]["full"]["stage1_std_contracts"] for row in rep["per_seed"]]
    ok = all(flags)
    emit(8, ok, f"last-third score std below first-third in {sum(flags)}/5 seeds")
    assert ok


def test_9_end_to_end_pipeline(emit, tmp_path):
    t0 = time.perf_counter()
    src = tmp_path / "sources"
    src.mkdir()
    for i in range(20):
        save_raster(textured_raster(seed=i), src / f"img{i:02d}.png")
    cfg = tmp_path / "cfg.toml"
    cfg.write_text("[forge]\nregion_size_range = [32, 64]\n[trajectories]\ncrop = 96\n")
    out = tmp_path / "out"
    codes = [cli.main(["forge", str(src), "--config", str(cfg), "--out", str(out)])]
    manifest = read_manifest(out / "manifest.json")
    for item in manifest:
        item.validate()
    codes.append(cli.main(["trajectories", str(out / "manifest.json"), "--config", str(cfg), "--out", str(out)]))
    traces = [json.loads(line)["trace_text"] for line in (out / "corpus.jsonl").read_text().splitlines()]
    fmt_ok = bool(traces) and all(rewards.format_reward(t) == 1.0 for t in traces)
    codes.append(cli.main(["score", str(out / "manifest.json"), "--jitter", "0", "--out", str(out)]))
    codes.append(cli.main(["eval", str(out / "predictions.csv"), str(out / "manifest.json"), "--out", str(out)]))
    avg = json.loads((out / "report.json").read_text())["average"]
    elapsed = time.perf_counter() - t0
    exact = math.isclose(avg["srcc"], 1.0, abs_tol=1e-12) and math.isclose(avg["plcc"], 1.0, abs_tol=1e-12)
    ok = codes == [0, 0, 0, 0] and len(manifest) == 20 and fmt_ok and exact and elapsed < 60
    emit(9, ok, f"exit codes {codes}; {len(manifest)} items validated; {len(traces)} traces with format reward 1: "
                f"{fmt_ok}; SRCC {avg['srcc']:.12f} PLCC {avg['plcc']:.12f}", elapsed, 60)
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([str(Path(__file__)), "-q", "-p", "no:cacheprovider"]))
