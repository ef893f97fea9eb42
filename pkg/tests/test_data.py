import itertools
import json

import numpy as np
import pytest

from ptrgps.data import (
    build_desk_grid,
    build_desk_validation_grid,
    build_training_grid,
    build_validation_grid,
    filter_convergent,
    initial_state,
    load_dataset,
    load_states,
    load_weights,
    parallel_map,
    read_metrics_csv,
    sample_test_set,
    save_dataset,
    save_states,
    save_weights,
    write_metrics_csv,
)
from ptrgps.errors import FormatError
from ptrgps.policy import DEFAULT_DIMS, Normalizer, PairDataset, forward, init_xavier
from ptrgps.ptr import PtrConfig
from ptrgps.transcription import make_grid
from ptrgps.vehicle import VehicleParams, euler_from_quat, landing_target


def factors(x):
    roll, pitch, _ = np.rad2deg(euler_from_quat(x[7:11]))
    return (x[1], x[3], x[4], x[5], round(roll, 9), round(pitch, 9))


def test_initial_state_layout():
    x = initial_state(2.0, 3.0, 0.1, -0.1, 15.0, -15.0)
    assert x[0] == 2.0 and np.array_equal(x[1:7], [2.0, 0.0, 3.0, 0.1, -0.1, -1.0])
    assert np.allclose(np.rad2deg(euler_from_quat(x[7:11])), [15, -15, 0])
    assert np.all(x[11:] == 0)


def test_training_grid():
    grid = build_training_grid()
    assert len(grid) == 729
    keys = {factors(x) for x in grid}
    assert len(keys) == 729
    assert {k[0] for k in keys} == {2.0, 2.5, 3.0}
    assert {k[4] for k in keys} == {-15.0, 0.0, 15.0}
    assert factors(grid[0]) == (2.0, 2.0, -0.1, -0.1, -15.0, -15.0)  # r_x slowest, pitch fastest
    assert factors(grid[1])[5] == 0.0


def test_validation_grids():
    val = build_validation_grid()
    assert len(val) == 36
    assert {(x[1], x[3]) for x in val} == set(itertools.product((2.25, 2.75), repeat=2))
    assert all(x[4] == 0 and x[5] == 0 for x in val)
    desk = build_desk_validation_grid()
    assert len(desk) == 8
    assert {factors(x) for x in desk} <= {factors(x) for x in val}
    train = {x.tobytes() for x in build_training_grid()}
    assert not any(x.tobytes() in train for x in val)


def test_desk_grid_is_balanced_fraction():
    desk = build_desk_grid()
    assert len(desk) == 27
    full = {factors(x) for x in build_training_grid()}
    keys = [factors(x) for x in desk]
    assert set(keys) <= full and len(set(keys)) == 27
    # every pair of factors sees each of its 9 level combinations exactly 3 times
    for i, j in itertools.combinations(range(6), 2):
        counts = {}
        for k in keys:
            counts[(k[i], k[j])] = counts.get((k[i], k[j]), 0) + 1
        assert sorted(counts.values()) == [3] * 9


def test_test_set_bounds_and_determinism():
    a = sample_test_set(50, np.random.default_rng(3))
    b = sample_test_set(50, np.random.default_rng(3))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    f = np.array([factors(x) for x in a])
    assert np.all(f[:, :2] >= 2.0) and np.all(f[:, :2] <= 3.0)
    assert np.all(np.abs(f[:, 2:4]) <= 0.1) and np.all(np.abs(f[:, 4:]) <= 15.0 + 1e-9)
    with pytest.raises(ValueError):
        sample_test_set(0, np.random.default_rng(0))


def test_desk_grid_retention():
    p = VehicleParams()
    kept, results = filter_convergent(build_desk_grid(), PtrConfig(), landing_target(p),
                                      make_grid(31, 5.0), p)
    assert len(kept) >= 24
    assert len(results) == 27


def _square(x):
    return x * x


def test_parallel_map_preserves_order():
    assert parallel_map(_square, list(range(7)), threads=2) == [x * x for x in range(7)]
    assert parallel_map(_square, [3], threads=4) == [9]


def random_dataset(n=100, seed=0):
    rng = np.random.default_rng(seed)
    return PairDataset(rng.normal(size=(n, 14)), rng.normal(size=(n, 3)),
                       rng.integers(0, 5, n), rng.integers(0, 20, n), rng.integers(0, 30, n))


def test_dataset_roundtrip(tmp_path):
    ds = random_dataset()
    save_dataset(tmp_path / "d.jsonl", ds, run_id="gps-0")
    back = load_dataset(tmp_path / "d.jsonl")
    for name in ("states", "controls", "traj_id", "sample_id", "node"):
        assert np.array_equal(getattr(back, name), getattr(ds, name))


def test_truncated_dataset_names_line(tmp_path):
    path = tmp_path / "d.jsonl"
    save_dataset(path, random_dataset(10))
    text = path.read_text()
    path.write_text(text[: text.rindex("\n", 0, len(text) - 1) + 25])
    with pytest.raises(FormatError, match="line 11"):
        load_dataset(path)


def test_malformed_record_names_line(tmp_path):
    path = tmp_path / "d.jsonl"
    save_dataset(path, random_dataset(5))
    lines = path.read_text().splitlines(keepends=True)
    rec = json.loads(lines[3])
    rec["x"] = rec["x"][:5]
    lines[3] = json.dumps(rec) + "\n"
    path.write_text("".join(lines))
    with pytest.raises(FormatError, match="line 4"):
        load_dataset(path)


def test_dataset_version_mismatch(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps({"format": "ptrgps-pairs", "version": 99}) + "\n")
    with pytest.raises(FormatError, match="version"):
        load_dataset(path)


def test_weights_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    mlp = init_xavier(DEFAULT_DIMS, rng)
    norm = Normalizer.fit(rng.normal(size=(50, 14)))
    save_weights(tmp_path / "w.json", mlp, norm)
    mlp2, norm2 = load_weights(tmp_path / "w.json")
    x = rng.normal(size=(10, 14))
    assert np.array_equal(forward(mlp, norm, x), forward(mlp2, norm2, x))


def test_weights_bad_shapes(tmp_path):
    mlp = init_xavier((14, 4, 3), np.random.default_rng(2))
    save_weights(tmp_path / "w.json", mlp, Normalizer.identity())
    doc = json.loads((tmp_path / "w.json").read_text())
    doc["dims"] = [14, 5, 3]
    (tmp_path / "w.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        load_weights(tmp_path / "w.json")


def test_metrics_csv_roundtrip(tmp_path):
    rows = [{"state": 0, "value": 0.1 + 0.2, "ok": True}, {"state": 1, "value": 1e-17, "ok": False}]
    write_metrics_csv(tmp_path / "m.csv", rows)
    back = read_metrics_csv(tmp_path / "m.csv")
    assert [float(r["value"]) for r in back] == [0.1 + 0.2, 1e-17]
    assert [r["ok"] for r in back] == ["True", "False"]


def test_state_files(tmp_path):
    states = build_desk_validation_grid()
    save_states(tmp_path / "s.json", states, "val")
    assert all(np.array_equal(a, b) for a, b in zip(load_states(tmp_path / "s.json"), states))
    (tmp_path / "one.json").write_text(json.dumps({"state": list(states[0])}))
    assert np.array_equal(load_states(tmp_path / "one.json")[0], states[0])
    (tmp_path / "bad.json").write_text("[1, 2, 3]")
    with pytest.raises(FormatError):
        load_states(tmp_path / "bad.json")
