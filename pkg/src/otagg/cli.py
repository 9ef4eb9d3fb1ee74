"""Command-line front end.

Commands: ``gen-data`` (synthetic dataset), ``solve`` (one transport plan
from CSV inputs), ``toy-train`` (train and score the set classifier),
``oracle-check`` (solver and embedding versus the exact references),
``bench`` (aggregation timing grid).

Conventions shared by all commands: JSON config files with an explicit
``schema_version`` and unknown-keys-are-errors; flags mirror config keys and
win over the file; matrices travel as RFC-4180 CSV with shortest
round-trip decimals; every run writes one JSON manifest echoing the
effective configuration and the sha256 of each output file. Exit codes:
0 success, 1 a validation or numerical failure, 2 malformed input.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, asdict

import numpy as np
from scipy.stats import spearmanr

from . import __version__, kernels
from .backend import numba_available
from .core_ot import (
    CostMatrix,
    SinkhornConfig,
    sinkhorn,
    transport_cost,
)
from .datagen import (
    build_toy_dataset,
    make_class_set,
    read_dataset,
    sample_mixed_gamma,
    write_dataset,
)
from .embedding import ReferenceSet, embed, embedding_distance, grouped_aggregate
from .oracle import exact_assignment, exact_w2_1d, stats_pool
from .toytrain import TrainConfig, evaluate, init_toy_model, save_model, train

AGGREGATOR_CHOICES = ("stats", "ot", "ot-att")


class InputError(Exception):
    """Malformed file, config, or argument; maps to exit code 2."""


class CheckFailure(Exception):
    """An internal validation did not hold; maps to exit code 1."""


# ---------------------------------------------------------------------------
# CSV matrix exchange


def write_matrix_csv(path, matrix) -> None:
    """Row-major CSV, one cell per entry, shortest round-trip decimals."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in matrix:
            writer.writerow([repr(float(x)) for x in row])


def read_matrix_csv(path) -> np.ndarray:
    """Parse a numeric CSV; malformed cells are named by row and column."""
    rows = []
    with open(path, newline="") as fh:
        for r, row in enumerate(csv.reader(fh), start=1):
            if not row:
                raise InputError(f"{path}: row {r} is empty")
            values = []
            for c, cell in enumerate(row, start=1):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise InputError(
                        f"{path}: cannot parse number at row {r}, column {c}: {cell!r}"
                    ) from None
            if rows and len(values) != len(rows[0]):
                raise InputError(
                    f"{path}: row {r} has {len(values)} cells, expected {len(rows[0])}"
                )
            rows.append(values)
    if not rows:
        raise InputError(f"{path}: no rows")
    return np.array(rows)


def read_vector_csv(path) -> np.ndarray:
    """A vector stored as a single CSV row or a single column."""
    matrix = read_matrix_csv(path)
    if matrix.shape[0] == 1 or matrix.shape[1] == 1:
        return matrix.ravel()
    raise InputError(
        f"{path}: expected a single row or column, got shape "
        f"{matrix.shape[0]}x{matrix.shape[1]}"
    )


# ---------------------------------------------------------------------------
# config files


def _check_type(key, value, kind):
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise InputError(f"config key {key!r} must be an integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InputError(f"config key {key!r} must be a number, got {value!r}")
        return float(value)
    if kind == "bool":
        if not isinstance(value, bool):
            raise InputError(f"config key {key!r} must be a boolean, got {value!r}")
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise InputError(f"config key {key!r} must be a string, got {value!r}")
        return value
    if kind == "int_list":
        if (
            not isinstance(value, list)
            or not value
            or any(isinstance(v, bool) or not isinstance(v, int) for v in value)
        ):
            raise InputError(
                f"config key {key!r} must be a nonempty list of integers, got {value!r}"
            )
        return list(value)
    raise AssertionError(kind)


def load_config(path, schema: dict) -> dict:
    """Read a versioned JSON config; unknown keys are errors, not warnings."""
    if path is None:
        data = {}
    else:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise InputError(f"{path}: config must be a JSON object")
        if "schema_version" not in data:
            raise InputError(f"{path}: config is missing schema_version")
        if data["schema_version"] != 1:
            raise InputError(
                f"{path}: unsupported schema_version {data['schema_version']!r}"
            )
    unknown = sorted(set(data) - set(schema) - {"schema_version"})
    if unknown:
        raise InputError(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for key, (default, kind) in schema.items():
        out[key] = _check_type(key, data.get(key, default), kind)
    return out


GEN_DATA_SCHEMA = {
    "seed": (0, "int"),
    "n_classes": (100, "int"),
    "train_per_class": (10000, "int"),
    "test_per_class": (1000, "int"),
    "train_set_size": (25, "int"),
    "test_set_size": (50, "int"),
    "threads": (1, "int"),
}

TOY_TRAIN_SCHEMA = {
    "seed": (0, "int"),
    "aggregator": ("ot", "str"),
    "ref_size": (16, "int"),
    "hidden": (64, "int"),
    "feature_dim": (16, "int"),
    "ref_init_scale": (0.1, "float"),
    "epochs": (20, "int"),
    "batch_size": (128, "int"),
    "learning_rate": (1e-3, "float"),
    "optimizer": ("adam", "str"),
    "epsilon": (1.0, "float"),
    "max_iterations": (20, "int"),
    "threads": (1, "int"),
}

# Default grid is sized so the scaling loop, not call plumbing, dominates
# each timed aggregation; otherwise the iteration/ref-size trends drown in
# per-call overhead noise.
BENCH_SCHEMA = {
    "seed": (0, "int"),
    "channels": (8, "int"),
    "frequencies": (4, "int"),
    "time_frames": ([200], "int_list"),
    "ref_sizes": ([8, 32], "int_list"),
    "iteration_counts": ([10, 20, 40], "int_list"),
    "repeats": (30, "int"),
    "epsilon": (1.0, "float"),
    "compare_backends": (True, "bool"),
    "threads": (1, "int"),
}


# ---------------------------------------------------------------------------
# run manifests


@dataclass(frozen=True)
class RunManifest:
    """What ran, with what configuration, producing which bytes."""

    command: str
    config: dict
    seed: int | None
    version: str
    duration_seconds: float
    outputs: dict


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(path, command, config, seed, output_paths, started) -> None:
    manifest = RunManifest(
        command=command,
        config=config,
        seed=seed,
        version=__version__,
        duration_seconds=round(time.perf_counter() - started, 6),
        outputs={str(p): _sha256(p) for p in output_paths},
    )
    with open(path, "w") as fh:
        json.dump(asdict(manifest), fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    started = time.perf_counter()
    config = load_config(args.config, GEN_DATA_SCHEMA)
    if args.seed is not None:
        config["seed"] = args.seed
    if args.threads is not None:
        config["threads"] = args.threads
    try:
        dataset = build_toy_dataset(
            config["n_classes"],
            config["train_per_class"],
            config["test_per_class"],
            config["train_set_size"],
            config["test_set_size"],
            config["seed"],
            max_workers=config["threads"],
        )
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    write_dataset(dataset, args.output)
    reread = read_dataset(args.output)
    same = all(
        np.array_equal(a, b)
        for a, b in zip(
            dataset.train_samples + dataset.test_samples,
            reread.train_samples + reread.test_samples,
        )
    )
    if not same:
        raise CheckFailure(f"{args.output}: dataset did not round-trip bitwise")
    manifest_path = args.manifest or f"{args.output}.manifest.json"
    write_manifest(
        manifest_path, "gen-data", config, config["seed"], [args.output], started
    )
    n_train = dataset.n_classes * dataset.train_per_class
    n_test = dataset.n_classes * dataset.test_per_class
    print(
        f"wrote {args.output}: {dataset.n_classes} classes, "
        f"{n_train} train / {n_test} test samples "
        f"(set sizes {dataset.train_set_size}/{dataset.test_set_size})"
    )
    print(f"manifest {manifest_path}")
    return 0


# ---------------------------------------------------------------------------
# solve


def cmd_solve(args) -> int:
    started = time.perf_counter()
    cost_entries = read_matrix_csv(args.cost)
    a = read_vector_csv(args.a)
    b = read_vector_csv(args.b)
    n, m = cost_entries.shape
    if a.shape[0] != n or b.shape[0] != m:
        raise InputError(
            f"intensity length mismatch: cost is {n}x{m} but a has {a.shape[0]} "
            f"and b has {b.shape[0]} entries"
        )
    try:
        cost = CostMatrix(cost_entries)
        config = SinkhornConfig(
            epsilon=args.epsilon,
            max_iterations=args.max_iters,
            log_domain=args.log_domain,
        )
        plan = sinkhorn(cost, a, b, config)
        value = transport_cost(plan, cost)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    write_matrix_csv(args.output, plan.entries)
    config_echo = {
        "epsilon": args.epsilon,
        "max_iterations": args.max_iters,
        "log_domain": args.log_domain,
        "cost": args.cost,
        "a": args.a,
        "b": args.b,
    }
    manifest_path = args.manifest or f"{args.output}.manifest.json"
    write_manifest(manifest_path, "solve", config_echo, None, [args.output], started)
    print(f"transport_cost {value!r}")
    print(f"marginal_residual {plan.marginal_residual!r}")
    print(f"iterations_used {plan.iterations_used}")
    print(f"converged {'true' if plan.converged else 'false'}")
    return 0


# ---------------------------------------------------------------------------
# toy-train


def cmd_toy_train(args) -> int:
    started = time.perf_counter()
    config = load_config(args.config, TOY_TRAIN_SCHEMA)
    for flag, key in (
        ("seed", "seed"),
        ("epsilon", "epsilon"),
        ("max_iters", "max_iterations"),
        ("ref_size", "ref_size"),
        ("aggregator", "aggregator"),
        ("threads", "threads"),
    ):
        value = getattr(args, flag)
        if value is not None:
            config[key] = value
    if config["aggregator"] not in AGGREGATOR_CHOICES:
        raise InputError(
            f"aggregator must be one of {', '.join(AGGREGATOR_CHOICES)}, "
            f"got {config['aggregator']!r}"
        )
    try:
        dataset = read_dataset(args.dataset)
    except (ValueError, OSError) as exc:
        raise InputError(f"{args.dataset}: {exc}") from exc
    try:
        sinkhorn_config = SinkhornConfig(
            epsilon=config["epsilon"], max_iterations=config["max_iterations"]
        )
        train_config = TrainConfig(
            epochs=config["epochs"],
            batch_size=config["batch_size"],
            learning_rate=config["learning_rate"],
            seed=config["seed"],
            sinkhorn=sinkhorn_config,
            optimizer_kind=config["optimizer"],
        )
        model = init_toy_model(
            config["seed"],
            config["aggregator"],
            n_classes=dataset.n_classes,
            hidden=config["hidden"],
            feature_dim=config["feature_dim"],
            ref_size=config["ref_size"],
            ref_init_scale=config["ref_init_scale"],
        )
    except ValueError as exc:
        raise InputError(str(exc)) from exc

    def progress(epoch, value):
        print(f"epoch {epoch} train_loss {value!r}", flush=True)

    model, trace = train(dataset, model, train_config, progress=progress)
    accuracy = evaluate(model, dataset, sinkhorn_config)

    model_path = args.model if args.model.endswith(".npz") else args.model + ".npz"
    save_model(model, model_path)
    metrics_path = args.metrics or os.path.splitext(model_path)[0] + ".metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "epoch", "value"])
        for epoch, value in enumerate(trace, start=1):
            writer.writerow(["train_loss", epoch, repr(value)])
        writer.writerow(["test_accuracy", len(trace), repr(accuracy)])
    manifest_path = args.manifest or f"{model_path}.manifest.json"
    write_manifest(
        manifest_path, "toy-train", config, config["seed"],
        [model_path, metrics_path], started,
    )
    print(f"test_accuracy {accuracy!r}")
    print(f"model {model_path}")
    print(f"metrics {metrics_path}")
    return 0


# ---------------------------------------------------------------------------
# oracle-check


def solver_vs_assignment_suite(seed: int, trials: int) -> dict:
    """Entropic solve at small epsilon versus the exact assignment optimum.

    Random square instances with uniform marginals: N in 2..8, cost entries
    iid uniform on [0, 4]. The cost scale keeps permutation gaps well above
    epsilon, so the entropic plan concentrates on the optimal matching and
    the comparison probes solver exactness rather than the entropy offset.
    Reports the worst relative cost deviation.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    config = SinkhornConfig(
        epsilon=0.01,
        max_iterations=5000,
        convergence_tolerance=1e-8,
        log_domain=True,
    )
    for _ in range(trials):
        n = int(rng.integers(2, 9))
        cost = CostMatrix(rng.random((n, n)) * 4.0)
        _, best = exact_assignment(cost)
        marg = np.full(n, 1.0 / n)
        plan = sinkhorn(cost, marg, marg, config)
        approx = transport_cost(plan, cost)
        worst = max(worst, abs(approx - best) / best)
    return {"trials": trials, "worst_rel_err": worst, "passed": bool(worst <= 0.02)}


def embedding_vs_1d_suite(seed: int, trials: int, ref_size: int = 16) -> dict:
    """Embedding distances versus the closed-form 1D transport distance.

    Sample-set pairs are drawn from random mixed-Gamma triples with sizes in
    25..50; the shared reference holds the quantiles of a pooled pilot
    sample, so its points cover the support the data actually occupies.
    Reports the Spearman rank correlation.
    """
    rng = np.random.default_rng(seed)
    pilot_triples = make_class_set(8, rng)
    pilot = np.concatenate([sample_mixed_gamma(t, 500, rng) for t in pilot_triples])
    quantiles = (np.arange(ref_size) + 0.5) / ref_size
    reference = ReferenceSet.create(np.quantile(pilot, quantiles).reshape(1, -1))
    config = SinkhornConfig(epsilon=1.0)
    approx = np.empty(trials)
    exact = np.empty(trials)
    for t in range(trials):
        params = make_class_set(2, rng)
        nx = int(rng.integers(25, 51))
        ny = int(rng.integers(25, 51))
        x = sample_mixed_gamma(params[0], nx, rng)
        y = sample_mixed_gamma(params[1], ny, rng)
        ex = embed(x.reshape(1, -1), np.full(nx, 1.0 / nx), reference, config)
        ey = embed(y.reshape(1, -1), np.full(ny, 1.0 / ny), reference, config)
        approx[t] = embedding_distance(ex, ey)
        exact[t] = exact_w2_1d(x, y)
    rho = float(spearmanr(approx, exact).statistic)
    return {"trials": trials, "spearman": rho, "passed": bool(rho >= 0.9)}


def cmd_oracle_check(args) -> int:
    started = time.perf_counter()
    if args.trials < 1:
        raise InputError(f"trials must be at least 1, got {args.trials}")
    solver = solver_vs_assignment_suite(args.seed, args.trials)
    distance = embedding_vs_1d_suite(args.seed, args.trials)
    print(f"{'suite':<24} {'worst_rel_err':>14} {'spearman':>10} {'pass':>6}")
    print(
        f"{'solver-vs-assignment':<24} {solver['worst_rel_err']:>14.6f} "
        f"{'-':>10} {'yes' if solver['passed'] else 'NO':>6}"
    )
    print(
        f"{'embedding-vs-1d':<24} {'-':>14} "
        f"{distance['spearman']:>10.4f} {'yes' if distance['passed'] else 'NO':>6}"
    )
    manifest_path = args.manifest or "oracle-check.manifest.json"
    write_manifest(
        manifest_path, "oracle-check",
        {"seed": args.seed, "trials": args.trials}, args.seed, [], started,
    )
    return 0 if (solver["passed"] and distance["passed"]) else 1


# ---------------------------------------------------------------------------
# bench


def _stats_grouped(activations: np.ndarray) -> np.ndarray:
    """Per-frequency mean/std pooling, the baseline the transport path is
    timed against."""
    C, F, T = activations.shape
    return np.concatenate([stats_pool(activations[:, f, :]) for f in range(F)])


def run_bench(config: dict) -> list:
    """Timing rows over the (time_frames x ref_sizes x iteration_counts) grid.

    Row layout: method, backend, time_frames, ref_size, iterations, repeats,
    median_seconds, p95_seconds. Stats pooling does not involve the solver,
    so its rows leave ref_size/iterations empty; it runs outside the kernel
    dispatch, so its backend column is empty too.

    Samples are taken round-robin across all grid cells rather than cell by
    cell: a brief slowdown of the host then inflates a few samples of every
    cell instead of an entire cell's distribution, and the per-cell medians
    stay comparable.
    """
    if config["repeats"] < 30:
        raise InputError(
            f"repeats must be at least 30 for stable percentiles, "
            f"got {config['repeats']}"
        )
    rng = np.random.default_rng(config["seed"])
    C, F = config["channels"], config["frequencies"]
    repeats = config["repeats"]
    backends = ["numpy"]
    if numba_available():
        backends = ["numba", "numpy"] if config["compare_backends"] else ["numba"]
    previous = kernels.current_backend()

    cells = []  # (row_prefix, backend or None, callable)
    for T in config["time_frames"]:
        activations = rng.normal(size=(C, F, T))
        cells.append((
            ("stats", "", T, "", "", repeats), None,
            lambda activations=activations: _stats_grouped(activations),
        ))
        for ref_size in config["ref_sizes"]:
            references = [
                ReferenceSet.create(rng.normal(size=(C, ref_size)))
                for _ in range(F)
            ]
            for iterations in config["iteration_counts"]:
                solver = SinkhornConfig(
                    epsilon=config["epsilon"],
                    max_iterations=iterations,
                    convergence_tolerance=1e-300,
                )
                for backend in backends:
                    def call(activations=activations, references=references,
                             solver=solver):
                        return grouped_aggregate(activations, references, solver)
                    cells.append((
                        ("ot", backend, T, ref_size, iterations, repeats),
                        backend, call,
                    ))

    times = [np.empty(repeats) for _ in cells]
    try:
        for _, backend, call in cells:  # warm every path, compilation included
            if backend is not None:
                kernels.set_backend(backend)
            call()
        for r in range(repeats):
            for i, (_, backend, call) in enumerate(cells):
                if backend is not None:
                    kernels.set_backend(backend)
                t0 = time.perf_counter()
                call()
                times[i][r] = time.perf_counter() - t0
    finally:
        kernels.set_backend(previous)
    return [
        (*prefix, float(np.median(ts)), float(np.percentile(ts, 95)))
        for (prefix, _, _), ts in zip(cells, times)
    ]


def cmd_bench(args) -> int:
    started = time.perf_counter()
    config = load_config(args.config, BENCH_SCHEMA)
    if args.seed is not None:
        config["seed"] = args.seed
    if args.threads is not None:
        config["threads"] = args.threads
    rows = run_bench(config)
    header = (
        "method", "backend", "time_frames", "ref_size", "iterations",
        "repeats", "median_seconds", "p95_seconds",
    )
    with open(args.output, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([
                repr(v) if isinstance(v, float) else v for v in row
            ])
    print(",".join(header))
    for row in rows:
        print(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    manifest_path = args.manifest or f"{args.output}.manifest.json"
    write_manifest(
        manifest_path, "bench", config, config["seed"], [args.output], started
    )
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="otagg",
        description="Transport-oriented feature aggregation tools",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a mixed-Gamma toy dataset")
    p.add_argument("config", nargs="?", default=None, help="JSON config (defaults used if omitted)")
    p.add_argument("output", help="dataset file to write")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("solve", help="solve one transport problem from CSV inputs")
    p.add_argument("cost", help="cost matrix CSV")
    p.add_argument("a", help="source intensities CSV (row or column)")
    p.add_argument("b", help="reference intensities CSV (row or column)")
    p.add_argument("output", help="plan matrix CSV to write")
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--max-iters", type=int, default=20)
    p.add_argument("--log-domain", action="store_true")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("toy-train", help="train the toy set classifier")
    p.add_argument("config", nargs="?", default=None, help="JSON config (defaults used if omitted)")
    p.add_argument("dataset", help="dataset file from gen-data")
    p.add_argument("model", help="model checkpoint to write (.npz)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--ref-size", type=int, default=None)
    p.add_argument("--aggregator", choices=AGGREGATOR_CHOICES, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--metrics", default=None, help="metrics CSV path")
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_toy_train)

    p = sub.add_parser("oracle-check", help="validate solver and embedding against exact references")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("bench", help="time transport aggregation against stats pooling")
    p.add_argument("config", nargs="?", default=None, help="JSON config (defaults used if omitted)")
    p.add_argument("output", help="timing CSV to write")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CheckFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return 1
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
