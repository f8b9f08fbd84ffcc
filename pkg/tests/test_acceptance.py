"""End-to-end acceptance checks; each test prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` to see the lines as
they happen; they are also repeated in the terminal summary.
"""
import filecmp
import os
import statistics
import threading
import time
import zlib

import numpy as np

from factorbird import dataprep
from factorbird.cli import main
from factorbird.client import ParamClient
from factorbird.edges import make_edges, write_edges
from factorbird.evaluation import holdout_rmse, load_model, select_best
from factorbird.model import EdgeContext, HyperGrid, Hyperparameters, sgd_step
from factorbird.pipeline import RunConfig, run_local, run_worker
from factorbird.server import ServerConfig, serve
from factorbird.synthetic import SyntheticSpec, biased_low_rank
from factorbird.trainer import iter_blocks

from conftest import make_prep
from oracles import central_difference, edge_objective, rel_error

SEEDS = range(5)
EXPORTS = ("U.fbmx", "V.fbmx", "g.json")


def same_files(dir_a, dir_b, names):
    return all(filecmp.cmp(os.path.join(dir_a, n), os.path.join(dir_b, n), shallow=False)
               for n in names)


def rmse_of(cfg, split):
    U, V, g, grid, _ = load_model(cfg.out_dir)
    return holdout_rmse(os.path.join(cfg.prep_dir, f"{split}.fbed"), U, V, g, grid)


# 1 ---------------------------------------------------------------------------

def test_gradient_oracle(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(1, 9))
        theta = rng.uniform(-1, 1, 2 * k + 3).tolist()
        a, w = float(rng.uniform(-2, 2)), float(rng.uniform(0.1, 3))
        lam = float(rng.uniform(0, 1))
        n_i, n_j = int(rng.integers(1, 40)), int(rng.integers(1, 40))
        eta = 1e-3
        u = np.array(theta[1:2 + k])
        v = np.array(theta[2 + k:])
        g, _ = sgd_step(u, v, theta[0], EdgeContext(a, w, n_i, n_j),
                        Hyperparameters(eta, lam, k=k), eta)
        step = [(x1 - x0) / -eta for x0, x1 in zip(theta, [g] + u.tolist() + v.tolist())]
        grad = central_difference(lambda t: edge_objective(t, a, w, lam, n_i, n_j, k), theta)
        worst = max(worst, rel_error(step, grad))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 5
    criterion(1, "gradient oracle", ok, f"max rel error {worst:.2e}, {elapsed:.2f}s")
    assert ok


# 2 ---------------------------------------------------------------------------

def test_packed_equals_separate(tmp_path, criterion):
    start = time.perf_counter()
    spec = SyntheticSpec(rows=1000, cols=1000, rank=5, density=0.05, noise=0.2)
    prep = make_prep(tmp_path / "data", spec, seed=1)
    grid = HyperGrid(tuple(Hyperparameters(eta, lam, 0.95, k=5)
                           for eta in (0.01, 0.02) for lam in (0.05, 0.1)))
    common = dict(passes=3, seed=1, init_stddev=0.1, negative_rate=1.0)
    packed = RunConfig(prep, str(tmp_path / "packed"), grid, **common)
    run_local(packed)
    U, V, g, _, _ = load_model(packed.out_dir)
    packed_rmse = rmse_of(packed, "test")
    mismatches = []
    for p in range(grid.c):
        single = RunConfig(prep, str(tmp_path / f"single{p}"), grid.subgrid(p), **common)
        run_local(single)
        U1, V1, g1, _, _ = load_model(single.out_dir)
        s = grid.layout.slice(p)
        if not (np.array_equal(U.ids, U1.ids) and np.array_equal(V.ids, V1.ids)):
            mismatches.append(f"ids {p}")
        if U.rows[:, s].tobytes() != U1.rows.tobytes():
            mismatches.append(f"U slice {p}")
        if V.rows[:, s].tobytes() != V1.rows.tobytes():
            mismatches.append(f"V slice {p}")
        if g[p] != g1[0]:
            mismatches.append(f"g {p}")
        if packed_rmse[p] != rmse_of(single, "test")[0]:
            mismatches.append(f"rmse {p}")
    elapsed = time.perf_counter() - start
    ok = not mismatches and elapsed < 60
    criterion(2, "packed equals separate", ok,
              f"{len(mismatches)} mismatches {mismatches[:4]}, {elapsed:.1f}s")
    assert ok


# 3 ---------------------------------------------------------------------------

KINDS = (("global", dict(rank=0, learn_biases=False)), ("biases", dict(rank=0)),
         ("k=2", dict(rank=2)), ("k=5", dict(rank=5)))
LAMBDAS = (0.02, 0.1)


def complexity_grid():
    return HyperGrid(tuple(Hyperparameters(0.02, lam, 0.95, k=5, **kw)
                           for lam in LAMBDAS for _, kw in KINDS))


def criterion3_prep(root, seed):
    return make_prep(root, SyntheticSpec(density=0.1, noise=0.2), seed=seed)


def test_model_complexity_ordering(tmp_path, criterion):
    start = time.perf_counter()
    grid = complexity_grid()
    per_kind = {name: [] for name, _ in KINDS}
    for seed in SEEDS:
        prep = criterion3_prep(tmp_path / f"s{seed}", seed)
        cfg = RunConfig(prep, str(tmp_path / f"m{seed}"), grid, passes=15, seed=seed,
                        init_stddev=0.1, fetch_batch_size=2048)
        run_local(cfg)
        val, test = rmse_of(cfg, "validation"), rmse_of(cfg, "test")
        for q, (name, _) in enumerate(KINDS):
            members = [q + len(KINDS) * r for r in range(len(LAMBDAS))]
            best, _ = select_best(val[members])
            per_kind[name].append(float(test[members[best]]))
    med = [statistics.median(per_kind[name]) for name, _ in KINDS]
    elapsed = time.perf_counter() - start
    ordered = all(a > b for a, b in zip(med, med[1:]))
    ok = ordered and med[3] < 0.5 * med[0] and elapsed < 300
    detail = ", ".join(f"{name} {m:.4f}" for (name, _), m in zip(KINDS, med))
    criterion(3, "model-complexity ordering", ok,
              f"median test RMSE {detail}; {elapsed:.0f}s")
    assert ok


# 4 ---------------------------------------------------------------------------

def test_distributed_equivalence(tmp_path, criterion):
    start = time.perf_counter()
    prep = criterion3_prep(tmp_path / "data", 0)
    grid = HyperGrid.product([0.02], [0.05, 0.1], [0.95], k=5)
    local = RunConfig(prep, str(tmp_path / "local"), grid, passes=2, init_stddev=0.1,
                      negative_rate=0.5)
    run_local(local)
    net = RunConfig(prep, str(tmp_path / "net"), grid, passes=2, init_stddev=0.1,
                    negative_rate=0.5)
    with serve(net.server_config()) as handle:
        net.servers = [handle.address]
        run_worker(net, 0)
    same = same_files(os.path.join(local.out_dir, "part-00000"),
                      os.path.join(net.out_dir, "part-00000"), EXPORTS)
    elapsed = time.perf_counter() - start
    ok = same and elapsed < 120
    criterion(4, "local equals networked", ok, f"exports identical={same}, {elapsed:.1f}s")
    assert ok


# 5 ---------------------------------------------------------------------------

def test_hogwild_tolerance(tmp_path, criterion):
    start = time.perf_counter()
    grid = HyperGrid((Hyperparameters(0.02, 0.05, 0.95, k=5),))
    results = {1: [], 4: []}
    for seed in SEEDS:
        prep = criterion3_prep(tmp_path / f"s{seed}", seed)
        for threads in results:
            cfg = RunConfig(prep, str(tmp_path / f"m{seed}-{threads}"), grid, passes=15,
                            threads=threads, seed=seed, init_stddev=0.1)
            run_local(cfg)
            results[threads].append(float(rmse_of(cfg, "validation")[0]))
    one, four = statistics.median(results[1]), statistics.median(results[4])
    rel = abs(four - one) / one
    elapsed = time.perf_counter() - start
    ok = rel < 0.05 and elapsed < 300
    criterion(5, "hogwild tolerance", ok,
              f"median validation RMSE 1 thread {one:.4f}, 4 threads {four:.4f}, "
              f"relative difference {rel:.2%}; {elapsed:.0f}s")
    assert ok


# 6 ---------------------------------------------------------------------------

def test_v_locality(tmp_path, criterion):
    spec = SyntheticSpec(rows=500, cols=400, rank=3, density=0.1)
    prep = make_prep(tmp_path / "data", spec, seed=2, partitions=3)
    grid = HyperGrid.product([0.02], [0.05, 0.1], k=3)
    cfg = RunConfig(prep, str(tmp_path / "m"), grid, passes=2, threads=2, negative_rate=2.0,
                    fetch_batch_size=256, init_stddev=0.1)
    reports = run_local(cfg)
    problems = []
    v_ops = u_total = events_total = 0
    for part, reps in reports.items():
        for r in reps:
            t = r.traffic
            events = r.positives + r.negatives
            v_ops += t.count("v")
            u_total += t.count("u", "fetched")
            events_total += events
            if t.count("u", "fetched") != r.distinct_rows or r.distinct_rows > events:
                problems.append(f"u accounting p{part} pass{r.pass_index}")
            if t.count("g", "fetched") != grid.c * r.blocks:
                problems.append(f"g accounting p{part} pass{r.pass_index}")
            both_remote = 2 * events  # a u and a v vector per event, per direction
            for direction in ("fetched", "written"):
                ours = t.count("u", direction) + t.count("g", direction)
                if ours > 0.5 * both_remote + grid.c * r.blocks:
                    problems.append(f"{direction} bound p{part} pass{r.pass_index}")
            if t.by_class.keys() - {"u_fetched", "u_written", "g_fetched", "g_written"}:
                problems.append(f"unexpected classes {sorted(t.by_class)}")
    ok = v_ops == 0 and not problems
    criterion(6, "V locality", ok, f"V-key operations {v_ops}, U keys fetched {u_total} "
                                   f"for {events_total} events, problems {problems[:3]}")
    assert ok


# 7 ---------------------------------------------------------------------------

WIDTH7 = 8


def tagged(tag: int) -> np.ndarray:
    vec = np.empty(WIDTH7, dtype=np.float32)
    vec[0] = tag
    vec[1:-1] = np.random.default_rng(tag).random(WIDTH7 - 2)
    vec[-1] = zlib.crc32(vec[:-1].tobytes()) % (1 << 24)
    return vec


def is_whole(vec: np.ndarray) -> bool:
    return vec[-1] == zlib.crc32(vec[:-1].tobytes()) % (1 << 24)


def test_atomicity_stress(criterion):
    start = time.perf_counter()
    keys = np.arange(100, dtype=np.uint64)
    torn, checked, errors = [0], [0], []
    lock = threading.Lock()
    with serve(ServerConfig(width=WIDTH7)) as handle:
        with ParamClient([handle.address], WIDTH7) as client:
            client.write_batch(keys, np.stack([tagged(int(k) << 20) for k in keys]))

        def work(worker):
            rng = np.random.default_rng(worker)
            bad = seen = 0
            try:
                with ParamClient([handle.address], WIDTH7) as client:
                    for n in range(1250):
                        batch = rng.choice(keys, int(rng.integers(1, 9)), replace=False)
                        if rng.random() < 0.5:
                            vecs = client.fetch_batch(batch)
                            bad += sum(not is_whole(v) for v in vecs)
                            seen += len(vecs)
                        else:
                            tags = [(worker << 28) | (n << 4) | t for t in range(len(batch))]
                            client.write_batch(batch, np.stack([tagged(t) for t in tags]))
                    vecs = client.fetch_batch(keys)
                    bad += sum(not is_whole(v) for v in vecs)
                    seen += len(vecs)
            except Exception as exc:
                errors.append(exc)
            with lock:
                torn[0] += bad
                checked[0] += seen

        threads = [threading.Thread(target=work, args=(w,)) for w in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    elapsed = time.perf_counter() - start
    ok = torn[0] == 0 and not errors and checked[0] > 0 and elapsed < 30
    criterion(7, "atomicity stress", ok, f"{torn[0]} torn of {checked[0]} vectors read, "
                                         f"{len(errors)} errors, {elapsed:.1f}s")
    assert ok


# 8 ---------------------------------------------------------------------------

def test_negative_ratio_law(tmp_path, criterion):
    rng = np.random.default_rng(8)
    cells = rng.choice(400 * 300, 10_000, replace=False)
    src = tmp_path / "pos.fbed"
    write_edges(src, make_edges(cells // 300, cells % 300, np.ones(10_000)))
    prep = tmp_path / "prep"
    dataprep.prepare(src, prep, (1, 0, 0), seed=0, num_partitions=2)
    grid = HyperGrid.product([0.02], [0.1], k=2)
    cfg = RunConfig(str(prep), str(tmp_path / "m"), grid, passes=2, negative_rate=5.0)
    reports = run_local(cfg)
    per_pass = [sum(reps[p].positives + reps[p].negatives for reps in reports.values())
                for p in range(2)]
    positives = [sum(reps[p].positives for reps in reports.values()) for p in range(2)]
    # replay each worker's event stream and check where its negatives point
    stats_rows = np.unique(cells // 300).astype(np.uint64)
    nonlocal_negatives = 0
    for entry in dataprep.load_manifest(prep)["partitions"]:
        local = dataprep.load_columns(prep, entry)
        for pass_index in range(2):
            stream_rng = np.random.default_rng([cfg.seed, 1, pass_index, entry["partition"]])
            for block in iter_blocks(prep / entry["path"], cfg.fetch_batch_size, 5.0, 1.0,
                                     local, stats_rows, stream_rng):
                neg = block[block["neg"]]
                nonlocal_negatives += int(np.count_nonzero(~np.isin(neg["j"], local)))
    ok = per_pass == [60_000, 60_000] and positives == [10_000, 10_000] \
        and nonlocal_negatives == 0
    criterion(8, "negative ratio law", ok, f"events per pass {per_pass}, "
                                           f"non-local negatives {nonlocal_negatives}")
    assert ok


# 9 ---------------------------------------------------------------------------

def test_pipeline_determinism(tmp_path, criterion):
    src = tmp_path / "all.fbed"
    write_edges(src, biased_low_rank(SyntheticSpec(rows=300, cols=200, rank=3, density=0.2), 9))
    args = ["--k", "3", "--etas", "0.01,0.02", "--lambdas", "0.05", "--decays", "0.95",
            "--passes", "3", "--negative-rate", "0.5", "--stddev", "0.1", "--seed", "9"]
    for run in ("a", "b"):
        root = tmp_path / run
        assert main(["prep", "--input", str(src), "--out", str(root / "prep"), "--seed", "9",
                     "--partitions", "2"]) == 0
        assert main(["local", "--prep", str(root / "prep"), "--out", str(root / "model")]
                    + args) == 0
        assert main(["eval", "--prep", str(root / "prep"), "--model", str(root / "model"),
                     "--out", str(root / "rmse.json")]) == 0
    same = same_files(tmp_path / "a", tmp_path / "b", ["rmse.json", "model/model.json"])
    for part in ("part-00000", "part-00001"):
        same = same and same_files(tmp_path / "a" / "model" / part,
                                   tmp_path / "b" / "model" / part, EXPORTS)
    criterion(9, "pipeline determinism", same, f"exports and RMSE reports identical={same}")
    assert same
