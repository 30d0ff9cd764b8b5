import math

import numpy as np
import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from dualpath.cli import main
from dualpath.config import RunConfig, load_config
from dualpath.errors import ConfigurationError, InvalidComparisonError, InvalidInputError
from dualpath.experiments import (
    arm_config,
    compare_arms,
    engineered_trace,
    evaluate,
    random_policy,
    read_arm_summary,
    replay_gating,
)
from dualpath.gate import Detector, DetectorConfig, gate_rate
from dualpath.metrics import EpisodeLog, aggregate, compute_metrics, logs_from_csv, logs_to_csv
from dualpath.world import WorldConfig, load_eval_routes


def _log(i, steps=100, dist=100.0, coll=0, success=False, impacts=()):
    return EpisodeLog(i, steps=steps, distance_m=dist, speed_sum_kmh=10.0 * steps, collisions=coll,
                      collision_speed_sum_kmh=12.0 * coll, collision_steps=list(impacts), success=success)


def test_collisions_per_km():
    m = compute_metrics([_log(0, dist=250.0, coll=1, impacts=[10]), _log(1, dist=250.0, coll=1, impacts=[150])])
    assert m.DCF == pytest.approx(4.0)
    assert m.ICT == pytest.approx(140.0)
    assert m.CS == pytest.approx(12.0) and m.CR == 1.0 and m.AC == 1.0


def test_collisions_per_thousand_steps():
    m = compute_metrics([_log(0, steps=600, coll=2, impacts=[5, 300]), _log(1, steps=400, coll=1, impacts=[800])])
    assert m.TCF == pytest.approx(3.0)
    assert m.AS == pytest.approx(10.0)


def test_success_rate_over_ten_routes():
    logs = [_log(i, success=i < 6) for i in range(10)]
    assert compute_metrics(logs).SR == pytest.approx(0.60)


def test_metrics_need_logs():
    with pytest.raises(InvalidInputError):
        compute_metrics([])


def test_aggregate_over_seeds():
    a = compute_metrics([_log(0, coll=1, impacts=[3])])
    b = compute_metrics([_log(0, coll=3, impacts=[3, 30, 60])])
    agg = aggregate([a, b])
    assert agg.n_seeds == 2
    assert agg.mean.AC == 2.0 and agg.std.AC == 1.0


@given(st.lists(st.tuples(st.integers(1, 500), st.floats(0, 900), st.integers(0, 3), st.booleans()), min_size=1, max_size=8))
def test_metrics_survive_csv_round_trip(rows):
    logs = []
    for i, (steps, dist, coll, ok) in enumerate(rows):
        logs.append(_log(i, steps, dist, coll, ok, impacts=range(i * 1000, i * 1000 + coll)))
    back = logs_from_csv(logs_to_csv(logs))
    assert back == logs
    assert compute_metrics(back) == compute_metrics(logs)


def _arm(values, budget=1000):
    return {"budget": budget, "seeds": {s: {"cumulative_collisions": v} for s, v in enumerate(values)}}


def test_compare_identical_reports():
    c = compare_arms(_arm([3, 5, 7]), _arm([3, 5, 7]))
    assert c.relative == 0.0 and c.log_ratio == 0.0
    assert "no difference" in c.describe()


def test_compare_fewer_collisions():
    c = compare_arms(_arm([150, 150, 150]), _arm([500, 500, 500]))
    assert c.percent == pytest.approx(-70.0)
    assert "70.0% fewer" in c.describe()


def test_compare_swap_negates_log_ratio():
    a, b = _arm([150, 120, 190]), _arm([500, 510, 480])
    ab, ba = compare_arms(a, b), compare_arms(b, a)
    assert ab.log_ratio == pytest.approx(-ba.log_ratio)
    assert all(ab.per_seed_log_ratio[s] == pytest.approx(-ba.per_seed_log_ratio[s]) for s in range(3))
    assert math.copysign(1, ab.relative) == -math.copysign(1, ba.relative)


def test_compare_rejects_mismatches():
    with pytest.raises(InvalidComparisonError):
        compare_arms(_arm([1, 2]), _arm([1, 2], budget=2000))
    with pytest.raises(InvalidComparisonError):
        compare_arms(_arm([1, 2]), _arm([1, 2, 3]))


def test_arms_differ_only_in_their_flag():
    base = RunConfig(total_steps=5000)
    main_dump = arm_config(base, "main").dump().splitlines()
    nop_dump = arm_config(base, "no_penalty").dump().splitlines()
    diff = [(a, b) for a, b in zip(main_dump, nop_dump) if a != b]
    assert diff == [("experiment: main", "experiment: no_penalty"), ("  mode: standard", "  mode: no_penalty")]
    static = arm_config(base, "static_only")
    assert static.detector.recall == 0.0 and static.synthesis == base.synthesis


def test_config_yaml_round_trip(tmp_path):
    cfg = RunConfig(seeds=[4, 5], total_steps=123)
    p = tmp_path / "c.yaml"
    p.write_text(cfg.dump())
    assert load_config(p) == cfg
    p.write_text("world: {n_trucks: 1}\n")
    with pytest.raises(ConfigurationError):
        load_config(p)
    with pytest.raises(ConfigurationError):
        RunConfig(seeds=[])


def test_gating_fixture_rate():
    frames = engineered_trace(522, 348)
    row = replay_gating("fixture", frames, Detector(DetectorConfig(recall=1.0)))
    assert row.gated == 348 and row.gate_rate == pytest.approx(0.667, abs=0.001)
    assert row.describer_calls == 348
    assert row.time_gated_s == pytest.approx(522 * 0.021 + 348 * 1.0)


def test_random_policy_floor_on_empty_corridor():
    empty = WorldConfig(n_vehicles=0, n_pedestrians=0, n_motorcycles=0, n_bicycles=0)
    res = evaluate(lambda f, rng: random_policy(f, rng), empty, load_eval_routes(), seed=0, max_steps=3000)
    assert res.apparatus_calls == 0
    assert res.sr == 0.0


SMALL_RUN = {
    "seeds": [0, 1],
    "total_steps": 300,
    "world": {"n_vehicles": 2, "n_pedestrians": 2, "n_motorcycles": 2, "n_bicycles": 2},
    "pipeline": {"warmup": 100, "checkpoint_interval": 100},
    "learner": {"batch_size": 16, "hidden": [16, 16]},
    "eval": {"max_steps": 50},
}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    cfg = root / "small.yaml"
    cfg.write_text(yaml.safe_dump(SMALL_RUN))
    assert main(["ablate", "no_penalty", "-c", str(cfg), "-o", str(root / "a")]) == 0
    assert main(["ablate", "static_only", "-c", str(cfg), "-o", str(root / "b")]) == 0
    return root, cfg


def test_cli_training_outputs(trained):
    root, _ = trained
    d = root / "a"
    for name in ("resolved_config.yaml", "metrics.csv", "summary.txt"):
        assert (d / name).exists()
    for s in (0, 1):
        for name in ("episodes.csv", "eval.csv", "curve.csv", "checkpoint.npz", "summary.txt"):
            assert (d / f"seed_{s}" / name).exists()
    assert "mode: no_penalty" in (d / "resolved_config.yaml").read_text()


def test_cli_report_recomputes_metrics(trained, capsys):
    root, _ = trained
    d = root / "a"
    assert main(["report", str(d), "--write"]) == 0
    rows = {l.split(",")[0]: l for l in (d / "report.csv").read_text().splitlines()}
    saved = {l.split(",")[0]: l for l in (d / "metrics.csv").read_text().splitlines()}
    for s in (0, 1):
        assert rows[f"eval_seed_{s}"].split(",")[1:] == saved[f"eval_seed_{s}"].split(",")[1:]
        # training rows exist only for seeds that finished an episode
        assert (f"episodes_seed_{s}" in rows) == (f"train_seed_{s}" in saved)
        if f"train_seed_{s}" in saved:
            assert rows[f"episodes_seed_{s}"].split(",")[1:] == saved[f"train_seed_{s}"].split(",")[1:]


def test_cli_compare(trained, capsys):
    root, _ = trained
    a, b = read_arm_summary(root / "a"), read_arm_summary(root / "b")
    assert set(a["seeds"]) == {0, 1} and a["budget"] == 300
    assert main(["compare", str(root / "a"), str(root / "b")]) == 0
    assert "cumulative_collisions" in capsys.readouterr().out


def test_cli_eval(trained, tmp_path):
    root, cfg = trained
    ck = root / "a" / "seed_0" / "checkpoint.npz"
    assert main(["eval", "-c", str(cfg), "--checkpoint", str(ck), "-o", str(tmp_path / "e")]) == 0
    assert "apparatus_calls: 0" in (tmp_path / "e" / "summary.txt").read_text()


def test_cli_gating(tmp_path):
    assert main(["gating", "--frames", "60", "--seeds", "0", "-o", str(tmp_path / "g")]) == 0
    text = (tmp_path / "g" / "gating.csv").read_text().splitlines()
    assert text[0].startswith("episode,frames,gated") and len(text) == 2


def test_cli_dump_anchors(tmp_path):
    out = tmp_path / "anchors.csv"
    assert main(["dump-anchors", "-o", str(out)]) == 0
    assert out.read_text().splitlines()[0].startswith("name,v0")


def test_cli_exit_codes(tmp_path, trained):
    root, _ = trained
    bad = tmp_path / "bad.yaml"
    bad.write_text("experiment: sideways\n")
    assert main(["train", "-c", str(bad)]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.npz"), "-o", str(tmp_path / "x")]) == 3
    assert main(["report", str(tmp_path)]) == 3
    other = tmp_path / "short.yaml"
    other.write_text(yaml.safe_dump({**SMALL_RUN, "total_steps": 200, "seeds": [0]}))
    assert main(["ablate", "main", "-c", str(other), "-o", str(tmp_path / "c")]) == 0
    assert main(["compare", str(root / "a"), str(tmp_path / "c")]) == 5
