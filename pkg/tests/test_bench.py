import math
import os

import numpy as np
import pandas as pd
import pytest

from src.bench import (
    BenchReport,
    emit_json,
    find_panic_depth,
    parse_json,
    read_csv,
    read_json,
    run_bmc_sim,
    run_empty_bench,
    run_map_bench,
    run_map_benches,
    run_panic_storm,
    run_recursion_bench,
    run_spinlock_bench,
    steer,
    summarize,
    summary_to_frame,
    write_csv,
    write_json,
    write_raw_samples,
)
from src.bmc import cache_index
from src.core_types import HostConfig
from src.safe_interface import fnv1a_32
from src.workload import build_get, make_key, make_value

SAMPLES = 1000
# smoke setting for the timing loops; the full inner loop runs once, in a slow test
SMOKE_INNER = 20
FULL_INNER = 10_000


def test_summarize_statistics():
    report = summarize("x", np.array([1.0, 2.0, 3.0, 4.0]))
    assert report.samples == 4
    assert report.mean_ns == 2.5
    assert report.stddev_ns == pytest.approx(np.std([1, 2, 3, 4], ddof=1))
    assert report.p50_ns == 2.5
    with pytest.raises(ValueError):
        summarize("empty", np.array([]))


@pytest.mark.parametrize("samples, inner", [(999, 1), (SAMPLES, 0)])
def test_timing_benches_need_enough_samples(samples, inner):
    with pytest.raises(ValueError):
        run_empty_bench(samples=samples, inner=inner)


def test_empty_bench_report():
    report = run_empty_bench(samples=SAMPLES, inner=1)
    assert report.bench_id == "empty"
    assert report.samples == SAMPLES
    assert report.mean_ns > 0
    assert report.p50_ns <= report.p99_ns
    assert report.metadata["overhead_ns"] == pytest.approx(report.mean_ns - report.metadata["baseline_mean_ns"])
    assert report.metadata["bound_ns"] == 2_000
    assert report.metadata["within_bound"] is (report.metadata["overhead_ns"] < 2_000)
    assert report.metadata["config"]["termination_timeout_ns"] == 5_000_000_000
    assert "ebpf" in report.reference
    assert len(report.raw_samples) == SAMPLES


def test_spinlock_bench_records_one_resource_at_a_time():
    report = run_spinlock_bench(samples=SAMPLES, inner=2)
    assert report.bench_id == "spinlock"
    assert report.metadata["registry_high_water"] == 1
    assert report.mean_ns > 0
    assert report.metadata["bound_ns"] == 1_000
    assert report.metadata["within_bound"] is (report.metadata["overhead_ns"] < 1_000)


def test_panic_depth_follows_frame_size():
    assert find_panic_depth() == 16
    assert find_panic_depth(entry_frame_bytes=2048, frame_bytes=2048) == 8
    assert find_panic_depth(max_depth=4) is None


def test_recursion_bench_fits_depths():
    reports = run_recursion_bench(max_depth=3, samples=SAMPLES, inner=1)
    assert [r.bench_id for r in reports] == ["recursion-1", "recursion-2", "recursion-3"]
    for report in reports:
        assert report.metadata["panic_depth"] == 16
        assert not math.isnan(report.metadata["fit_slope_ns"])
        assert 0.0 <= report.metadata["fit_r_squared"] <= 1.0


def test_recursion_bench_rejects_depths_past_the_threshold():
    with pytest.raises(ValueError):
        run_recursion_bench(max_depth=64, samples=SAMPLES, inner=1)


def test_map_bench_ids():
    assert run_map_bench("array", samples=SAMPLES, inner=1).bench_id == "map-array"
    assert run_map_bench("atomic-static", samples=SAMPLES, inner=1).bench_id == "map-atomic-static"
    assert run_map_bench("hash", samples=SAMPLES, inner=1, hash_keys=8).bench_id == "map-hash-8"
    with pytest.raises(ValueError):
        run_map_bench("tree")


@pytest.mark.slow
def test_map_benches_include_the_large_hash():
    reports = run_map_benches(samples=SAMPLES, inner=1)
    assert [r.bench_id for r in reports] == [
        "map-atomic-static",
        "map-array",
        "map-hash-1",
        "map-hash-4096",
    ]
    assert reports[-1].metadata["ratio_to_1_key"] > 0


# Emitters


@pytest.fixture
def reports():
    rng = np.random.default_rng(0)
    return [
        summarize("empty", rng.normal(40, 4, SAMPLES), metadata={"inner_iterations": 10, "note": "a,b"},
                  reference={"ebpf": "42.1 +/- 4.1 ns"}),
        summarize("map-hash-1", rng.normal(80, 8, SAMPLES), metadata={"hash_keys": 1}),
    ]


def test_json_round_trip(reports, tmp_path):
    assert parse_json(emit_json(reports)) == reports
    assert read_json(write_json(reports, tmp_path / "r.json")) == reports


def test_csv_round_trip(reports, tmp_path):
    path = write_csv(reports, tmp_path / "out" / "r.csv")
    assert read_csv(path) == reports
    assert list(pd.read_csv(path).columns[:2]) == ["bench_id", "samples"]


def test_raw_samples_go_to_parquet(reports, tmp_path):
    path = write_raw_samples(reports, tmp_path / "raw.parquet")
    df = pd.read_parquet(path)
    assert len(df) == 2 * SAMPLES
    assert df.groupby("bench_id")["ns_per_op"].mean()["empty"] == pytest.approx(reports[0].mean_ns)


def test_report_equality_ignores_raw_samples(reports):
    stripped = BenchReport.from_dict(reports[0].to_dict())
    assert stripped.raw_samples is None
    assert stripped == reports[0]


# Cache simulation


def _distinct_slot_keys(count):
    keys, slots, i = [], set(), 0
    while len(keys) < count:
        key = make_key(i)
        slot = cache_index(fnv1a_32(key, HostConfig().hash_seed))
        if slot not in slots:
            slots.add(slot)
            keys.append(key)
        i += 1
    return keys


def test_steering_is_by_key():
    frame = build_get(b"key-1")
    assert steer(frame, 4) == steer(build_get(b"key-1", request_id=9), 4) == fnv1a_32(b"key-1") % 4
    assert steer(b"\x00" * 10, 4) == 0


@pytest.mark.slow
def test_prefilled_cache_hits_every_get():
    keys = _distinct_slot_keys(40)
    rng = np.random.default_rng(1)
    prefill = [(key, make_value(rng, 16)) for key in keys]
    frames = [build_get(keys[i % len(keys)], i) for i in range(400)]
    report = run_bmc_sim(frames, workers=2, prefill=prefill)
    assert report.requests == 400
    assert report.hit_ratio == 1.0
    assert report.verdicts == {"tx": 400}
    assert report.panics == 0
    assert len(report.per_worker_rps) == 2


@pytest.mark.slow
def test_cold_cache_misses_once_per_key():
    keys = _distinct_slot_keys(20)
    rng = np.random.default_rng(2)
    prefill = [(key, make_value(rng, 16)) for key in keys]
    frames = [build_get(keys[i % len(keys)], i) for i in range(200)]
    report = run_bmc_sim(frames, workers=2, prefill=prefill, prefill_cache=False)
    assert report.stats["miss"] == len(keys)
    assert report.stats["hit"] == 200 - len(keys)
    assert report.hit_ratio == pytest.approx(0.9)

    no_egress = run_bmc_sim(frames, workers=1, prefill=prefill, prefill_cache=False, egress=False)
    assert no_egress.hit_ratio == 0.0
    assert no_egress.verdicts == {"pass": 200}


def test_bmc_sim_needs_a_worker():
    with pytest.raises(ValueError):
        run_bmc_sim([], workers=0)


# Panic storm


def test_panic_storm_recovers():
    report = run_panic_storm(count=25, config=HostConfig(num_workers=2), seed=4)
    assert report.panics == 25
    assert report.reasons == {"OutOfBounds": 25}
    assert report.reloads == 24
    assert report.healthy_served == 25
    assert report.recovered is True

    flat = summary_to_frame(report.to_dict())
    assert flat.loc[0, "reasons.OutOfBounds"] == 25


def test_empty_storm():
    report = run_panic_storm(count=0, config=HostConfig(num_workers=1), verify_recovery=False)
    assert (report.panics, report.reloads, report.healthy_served) == (0, 0, 0)
    assert report.recovered is None
    with pytest.raises(ValueError):
        run_panic_storm(count=-1)


@pytest.mark.slow
def test_full_panic_storm():
    report = run_panic_storm()
    assert report.panics == report.count == 10_000
    assert report.healthy_served == 10_000
    assert report.recovered is True


# Overhead and scaling properties


@pytest.mark.slow
def test_guarded_paths_cost_more_than_their_baselines():
    empty = run_empty_bench(samples=SAMPLES, inner=SMOKE_INNER)
    spinlock = run_spinlock_bench(samples=SAMPLES, inner=SMOKE_INNER)
    assert empty.metadata["overhead_ns"] > 0
    assert spinlock.metadata["overhead_ns"] > 0


@pytest.mark.slow
def test_overheads_are_reported_against_their_bounds_at_full_inner_loop():
    for report, bound in [
        (run_empty_bench(samples=SAMPLES, inner=FULL_INNER), 2_000),
        (run_spinlock_bench(samples=SAMPLES, inner=FULL_INNER), 1_000),
    ]:
        assert report.metadata["inner_iterations"] == FULL_INNER
        assert report.metadata["overhead_ns"] > 0
        assert report.metadata["bound_ns"] == bound
        assert report.metadata["within_bound"] is (report.metadata["overhead_ns"] < bound)


@pytest.mark.slow
def test_lookup_latency_orders_static_array_hash():
    ordered = 0
    for _ in range(10):
        static, array, hashed = (
            run_map_bench(kind, samples=SAMPLES, inner=SMOKE_INNER) for kind in ("atomic-static", "array", "hash")
        )
        ordered += static.p50_ns <= array.p50_ns <= hashed.p50_ns
    assert ordered >= 9


@pytest.mark.slow
@pytest.mark.skipif((os.cpu_count() or 1) < 8, reason="needs 8 CPUs")
def test_cache_throughput_scales_with_workers():
    keys = [make_key(i) for i in range(256)]
    rng = np.random.default_rng(3)
    prefill = [(key, make_value(rng, 16)) for key in keys]
    frames = [build_get(keys[int(i)], n & 0xFFFF) for n, i in enumerate(rng.integers(0, len(keys), 80_000))]
    one = run_bmc_sim(frames, workers=1, prefill=prefill)
    eight = run_bmc_sim(frames, workers=8, prefill=prefill)
    assert eight.requests == one.requests == 80_000
    assert eight.aggregate_rps >= 4 * one.aggregate_rps
