"""Acceptance gate. One test per numbered criterion; each prints a single
PASS/FAIL line with the measured quantity (surfaced by the -rP addopt).

Wall-clock budgets assume the compiled backend; under the pure-numpy
fallback the same checks run but elapsed time is reported, not asserted.
The full-scale ordering run (criterion 5, hours of compute) is opt-in via
OTAGG_RUN_FULL_TOY=1; its smoke variant always runs.
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.stats

from otagg import (
    CostMatrix,
    ReferenceSet,
    SinkhornConfig,
    TrainConfig,
    backward,
    build_toy_dataset,
    embed,
    evaluate,
    forward,
    grouped_aggregate,
    init_toy_model,
    kernels,
    loss,
    make_class_set,
    sample_mixed_gamma,
    sinkhorn,
    train,
)
from otagg.cli import embedding_vs_1d_suite, run_bench, solver_vs_assignment_suite

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
TIMED = kernels.current_backend() == "numba"

# accuracy levels the full-scale configuration reached in the original
# experiments; used only for the report line of the opt-in run, never gated
FULL_SCALE_REFERENCE = {
    "stats": 20.6, "ot-2": 6.8, "ot-8": 26.4, "ot-16": 28.6, "ot-32": 29.8,
}


def report(number, name, ok, detail):
    print(f"criterion {number} ({name}): {'PASS' if ok else 'FAIL'} - {detail}")


def assert_time(elapsed, budget):
    if TIMED:
        assert elapsed < budget, f"{elapsed:.1f}s over the {budget:.0f}s budget"


@pytest.fixture(scope="module", autouse=True)
def _warm_kernels():
    # compile every kernel path before anything is timed
    rng = np.random.default_rng(0)
    C = CostMatrix(rng.random((3, 4)))
    a, b = np.full(3, 1 / 3), np.full(4, 1 / 4)
    for log_domain in (False, True):
        sinkhorn(C, a, b, SinkhornConfig(epsilon=0.5, max_iterations=5,
                                         log_domain=log_domain))
    sample = np.array([0.1, 0.0, 1.2])
    solver = SinkhornConfig(epsilon=1.0, max_iterations=3)
    for kind in ("stats", "ot", "ot-att"):
        model = init_toy_model(0, kind, n_classes=2, hidden=4, feature_dim=3,
                               ref_size=2)
        _, tape = forward(model, sample, solver)
        backward(tape, 0)


def test_criterion_1_solver_feasibility():
    rng = np.random.default_rng(10)
    epsilons = (0.1, 1.0, 2.0)
    worst = 0.0
    unconverged = 0
    t0 = time.perf_counter()
    for i in range(1000):
        nx = int(rng.integers(2, 65))
        nz = int(rng.integers(2, 65))
        d = int(rng.integers(1, 33))
        X = rng.normal(size=(nx, d)) * 0.3
        Z = rng.normal(size=(nz, d)) * 0.3
        cost = CostMatrix(kernels.squared_distances(
            np.ascontiguousarray(X), np.ascontiguousarray(Z)))
        if i % 2:
            a = rng.exponential(size=nx) + 1e-3
            a /= a.sum()
            b = rng.exponential(size=nz) + 1e-3
            b /= b.sum()
        else:
            a = np.full(nx, 1.0 / nx)
            b = np.full(nz, 1.0 / nz)
        plan = sinkhorn(cost, a, b, SinkhornConfig(
            epsilon=epsilons[i % 3], max_iterations=2000,
            convergence_tolerance=1e-7))
        if plan.converged:
            worst = max(worst, plan.marginal_residual)
        else:
            unconverged += 1
    elapsed = time.perf_counter() - t0
    ok = unconverged == 0 and worst < 1e-6 and elapsed < 10.0
    report(1, "solver feasibility", ok,
           f"1000 instances, worst residual {worst:.2e}, "
           f"{unconverged} unconverged, {elapsed:.1f}s")
    assert unconverged == 0
    assert worst < 1e-6
    assert_time(elapsed, 10.0)


def test_criterion_2_small_epsilon_exactness():
    t0 = time.perf_counter()
    result = solver_vs_assignment_suite(seed=0, trials=100)
    elapsed = time.perf_counter() - t0
    ok = result["passed"] and elapsed < 5.0
    report(2, "small-epsilon exactness", ok,
           f"100 instances, worst deviation from the assignment optimum "
           f"{result['worst_rel_err']:.4%} (limit 2%), {elapsed:.1f}s")
    assert result["worst_rel_err"] <= 0.02
    assert_time(elapsed, 5.0)


def test_criterion_3_distance_preservation():
    t0 = time.perf_counter()
    result = embedding_vs_1d_suite(seed=0, trials=200)
    elapsed = time.perf_counter() - t0
    ok = result["passed"] and elapsed < 30.0
    report(3, "distance preservation", ok,
           f"200 pairs, Spearman {result['spearman']:.4f} (floor 0.9), "
           f"{elapsed:.1f}s")
    assert result["spearman"] >= 0.9
    assert_time(elapsed, 30.0)


def test_criterion_4_gradient_correctness():
    import copy

    sample = np.array([0.0, 0.4, 1.3, 0.0, 2.1, 0.7])
    solver = SinkhornConfig(epsilon=0.8, max_iterations=3)
    h = 1e-4
    t0 = time.perf_counter()
    worst = {}
    for kind in ("stats", "ot", "ot-att"):
        model = init_toy_model(0, kind, n_classes=3, hidden=6, feature_dim=4,
                               ref_size=4)
        # keep rectifier inputs off the kink, where the finite difference
        # would straddle the nondifferentiable point
        model.b1 = model.b1 + np.linspace(0.05, 0.35, model.hidden)
        model.b2 = model.b2 + np.linspace(-0.2, 0.2, model.feature_dim)
        label = 1
        _, tape = forward(model, sample, solver)
        assert np.abs(tape.pre1).min() > 1e-3
        grads = backward(tape, label)
        excess = 0.0
        for name, base in model.parameters().items():
            for idx in range(base.size):
                up = {k: v.copy() for k, v in model.parameters().items()}
                dn = {k: v.copy() for k, v in model.parameters().items()}
                up[name].flat[idx] += h
                dn[name].flat[idx] -= h
                trial = copy.deepcopy(model)
                trial.apply_parameters(up)
                lu = loss(forward(trial, sample, solver)[0], label)
                trial = copy.deepcopy(model)
                trial.apply_parameters(dn)
                ld = loss(forward(trial, sample, solver)[0], label)
                fd = (lu - ld) / (2 * h)
                gap = abs(grads[name].flat[idx] - fd)
                excess = max(excess, gap / (abs(fd) + 1e-8 / 1e-4))
        worst[kind] = excess
    elapsed = time.perf_counter() - t0
    bad = max(worst.values())
    ok = bad < 1e-4 and elapsed < 10.0
    report(4, "gradient correctness", ok,
           "worst relative error " + ", ".join(
               f"{k} {v:.2e}" for k, v in worst.items())
           + f" (limit 1e-4), {elapsed:.1f}s")
    assert bad < 1e-4
    assert_time(elapsed, 10.0)


def _train_from_config(dataset, name, seed=None):
    config = json.loads((CONFIGS / name).read_text())
    config.pop("schema_version")
    if seed is None:
        seed = config["seed"]
    solver = SinkhornConfig(epsilon=config["epsilon"],
                            max_iterations=config["max_iterations"])
    model = init_toy_model(
        seed, config["aggregator"], n_classes=dataset.n_classes,
        hidden=config["hidden"], feature_dim=config["feature_dim"],
        ref_size=config.get("ref_size", 16),
    )
    train_config = TrainConfig(
        epochs=config["epochs"], batch_size=config["batch_size"],
        learning_rate=config["learning_rate"], seed=seed,
        sinkhorn=solver,
    )
    model, _ = train(dataset, model, train_config)
    return evaluate(model, dataset, solver)


def test_criterion_5_toy_ordering_smoke():
    gen = json.loads((CONFIGS / "gen_smoke.json").read_text())
    t0 = time.perf_counter()
    dataset = build_toy_dataset(
        gen["n_classes"], gen["train_per_class"], gen["test_per_class"],
        gen["train_set_size"], gen["test_set_size"], gen["seed"],
        max_workers=gen["threads"],
    )
    acc = {
        "ot-16": _train_from_config(dataset, "train_smoke_ot16.json"),
        "stats": _train_from_config(dataset, "train_smoke_stats.json"),
        "ot-2": _train_from_config(dataset, "train_smoke_ot2.json"),
    }
    elapsed = time.perf_counter() - t0
    ordered = acc["ot-16"] > acc["stats"] > acc["ot-2"]
    ok = ordered and elapsed < 900.0
    report(5, "toy ordering, smoke scale", ok,
           f"ot-16 {acc['ot-16']:.4f} > stats {acc['stats']:.4f} > "
           f"ot-2 {acc['ot-2']:.4f}: {ordered}, {elapsed:.0f}s (budget 900)")
    assert ordered
    assert_time(elapsed, 900.0)


@pytest.mark.skipif(
    os.environ.get("OTAGG_RUN_FULL_TOY") != "1",
    reason="hours of compute; set OTAGG_RUN_FULL_TOY=1 to run the "
           "full-scale ordering",
)
def test_criterion_5_toy_ordering_full():
    gen = json.loads((CONFIGS / "gen_full.json").read_text())
    names = ("stats", "ot-2", "ot-8", "ot-16", "ot-32")
    files = {n: f"train_full_{n.replace('-', '')}.json" for n in names}
    acc = {n: [] for n in names}
    for seed in (0, 1, 2):
        dataset = build_toy_dataset(
            gen["n_classes"], gen["train_per_class"], gen["test_per_class"],
            gen["train_set_size"], gen["test_set_size"], seed,
            max_workers=gen["threads"],
        )
        for n in names:
            acc[n].append(_train_from_config(dataset, files[n], seed=seed))
    mean = {n: float(np.mean(acc[n])) for n in names}
    ordered = (mean["ot-32"] > mean["ot-16"] > mean["ot-8"]
               > mean["stats"] > mean["ot-2"])
    gap_low = (mean["stats"] - mean["ot-2"]) * 100 >= 10.0
    gap_high = (mean["ot-32"] - mean["stats"]) * 100 >= 5.0
    ok = ordered and gap_low and gap_high
    deviations = ", ".join(
        f"{n} {mean[n]*100:.1f} (ref {FULL_SCALE_REFERENCE[n]:.1f})"
        for n in names
    )
    report(5, "toy ordering, full scale", ok,
           f"ordering {ordered}, stats-minus-ot2 "
           f"{(mean['stats']-mean['ot-2'])*100:.1f}pts (>=10), "
           f"ot32-minus-stats {(mean['ot-32']-mean['stats'])*100:.1f}pts (>=5); "
           f"absolute levels reported, not gated: {deviations}")
    assert ordered
    assert gap_low
    assert gap_high


def test_criterion_6_permutation_invariance():
    rng = np.random.default_rng(6)
    solver = SinkhornConfig(epsilon=1.0, max_iterations=10)
    worst_logits = 0.0
    for kind in ("stats", "ot", "ot-att"):
        model = init_toy_model(3, kind, n_classes=5, hidden=16, feature_dim=6,
                               ref_size=5)
        for _ in range(100):
            sample = rng.gamma(1.5, 1.0, int(rng.integers(5, 31)))
            sample[rng.random(sample.shape[0]) < 0.3] = 0.0
            base, _ = forward(model, sample, solver)
            shuffled, _ = forward(model, sample[rng.permutation(sample.shape[0])],
                                  solver)
            worst_logits = max(worst_logits, float(np.abs(base - shuffled).max()))
    worst_embed = 0.0
    reference = ReferenceSet.create(rng.normal(size=(4, 6)))
    for _ in range(100):
        nx = int(rng.integers(3, 40))
        feats = rng.normal(size=(4, nx))
        w = rng.exponential(size=nx) + 1e-3
        w /= w.sum()
        base = embed(feats, w, reference, solver)
        perm = rng.permutation(nx)
        shuffled = embed(feats[:, perm].copy(), w[perm], reference, solver)
        worst_embed = max(worst_embed,
                          float(np.abs(base.entries - shuffled.entries).max()))
    ok = worst_logits < 1e-9 and worst_embed < 1e-9
    report(6, "permutation invariance", ok,
           f"100 inputs per aggregator: worst logit gap {worst_logits:.2e}, "
           f"worst embedding gap {worst_embed:.2e} (limit 1e-9)")
    assert worst_logits < 1e-9
    assert worst_embed < 1e-9


def test_criterion_7_generator_fidelity():
    rng = np.random.default_rng(7)
    triples = make_class_set(5, rng)
    n = 100000
    t0 = time.perf_counter()
    worst_z = 0.0
    worst_ks = 0.0
    for params in triples:
        draws = sample_mixed_gamma(params, n, rng)
        frac = float(np.mean(draws == 0.0))
        sigma = np.sqrt(params.p * (1 - params.p) / n)
        worst_z = max(worst_z, abs(frac - params.p) / sigma)
        nonzero = draws[draws > 0]
        stat = scipy.stats.kstest(
            nonzero, scipy.stats.gamma(params.k, scale=params.theta).cdf
        ).statistic
        # 1.6276/sqrt(m) is the asymptotic 1% critical value
        worst_ks = max(worst_ks, stat * np.sqrt(nonzero.shape[0]) / 1.6276)
    elapsed = time.perf_counter() - t0
    ok = worst_z <= 3.0 and worst_ks < 1.0 and elapsed < 10.0
    report(7, "generator fidelity", ok,
           f"5 triples x 1e5 draws: worst zero-fraction z {worst_z:.2f} "
           f"(limit 3), worst KS vs 1% critical {worst_ks:.2f} (limit 1), "
           f"{elapsed:.1f}s")
    assert worst_z <= 3.0
    assert worst_ks < 1.0
    assert_time(elapsed, 10.0)


def test_criterion_8_grouped_layout_standin():
    # full-scale audio verification numbers are out of reach at desk scale
    # and are NOT gated; the grouped layout is held to its structural
    # contract on synthetic tensors instead
    rng = np.random.default_rng(8)
    solver = SinkhornConfig(epsilon=1.0, max_iterations=10)
    C, F, T, nz = 6, 3, 40, 4
    activations = rng.normal(size=(C, F, T))
    references = [ReferenceSet.create(rng.normal(size=(C, nz)))
                  for _ in range(F)]
    out = grouped_aggregate(activations, references, solver)
    assert out.shape == (F * C * nz,)
    segments = out.reshape(F, C * nz)
    norms = np.linalg.norm(segments, axis=1)
    assert np.allclose(norms, 1.0, rtol=0, atol=1e-12)
    shuffled = grouped_aggregate(activations[:, :, rng.permutation(T)],
                                 references, solver)
    gap = float(np.abs(out - shuffled).max())
    assert gap < 1e-9
    # a change confined to one frequency slice stays in its segment
    bumped = activations.copy()
    bumped[:, 1, :] += rng.normal(size=(C, T))
    out2 = grouped_aggregate(bumped, references, solver).reshape(F, C * nz)
    assert np.allclose(out2[0], segments[0], rtol=0, atol=1e-12)
    assert np.allclose(out2[2], segments[2], rtol=0, atol=1e-12)
    assert not np.allclose(out2[1], segments[1], atol=1e-6)
    report(8, "grouped layout stand-in", True,
           f"shape {out.shape[0]} = groups x (channels x reference), unit "
           f"norms, frame-permutation gap {gap:.2e}; full-scale audio "
           f"accuracy intentionally not gated")


def test_criterion_9_benchmark_sanity():
    config = {
        "seed": 0, "channels": 8, "frequencies": 4, "time_frames": [200],
        "ref_sizes": [8, 32], "iteration_counts": [10, 20, 40],
        "repeats": 30, "epsilon": 1.0, "compare_backends": True, "threads": 1,
    }
    rows = run_bench(config)
    ot = [r for r in rows if r[0] == "ot"]
    stats_median = next(r[6] for r in rows if r[0] == "stats")
    backends = sorted({r[1] for r in ot})
    monotone = True
    for backend in backends:
        for ref in config["ref_sizes"]:
            medians = [r[6] for r in ot
                       if r[1] == backend and r[3] == ref]
            monotone &= all(x < y for x, y in zip(medians, medians[1:]))
        for iters in config["iteration_counts"]:
            medians = [r[6] for r in ot
                       if r[1] == backend and r[4] == iters]
            monotone &= all(x < y for x, y in zip(medians, medians[1:]))
    cheapest = min(r[6] for r in ot)
    ratio = cheapest / stats_median
    report(9, "benchmark sanity", monotone,
           f"medians rise with iterations and reference size on "
           f"{backends} backends: {monotone}; cheapest transport cell costs "
           f"{ratio:.1f}x stats pooling in isolation (full systems report "
           f"~12% end-to-end slowdown; context only, no gate)")
    assert monotone
