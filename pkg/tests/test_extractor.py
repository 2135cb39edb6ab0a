import numpy as np
import pytest

from warehouse_eir.env import WarehouseEnv
from warehouse_eir.extractor import (
    ConstraintExtractor,
    ExtractorDataset,
    ExtractorNet,
    LiveExtractor,
    binarize,
    extract,
    generate_dataset,
    label_oracle,
    load_extractor,
    loss_hc,
    loss_mc,
    mean_adjacency,
    round_threshold,
    save_extractor,
    window_cells,
)
from warehouse_eir.layouts import SEVERITY, make_layout, make_layout_dict
from warehouse_eir.scenario import scenario_from_dict

from test_approximator import numeric_grad


def lone_agent_env(device_start=(4, 9), incidents=()):
    doc = make_layout_dict("A", 1, 0)
    doc["tasks"] = []
    doc["devices"][0]["start"] = list(device_start)
    doc["incidents"] = list(incidents)
    env = WarehouseEnv(scenario_from_dict(doc))
    env.reset(0)
    return env


def test_oracle_empty_window():
    m, h = label_oracle(lone_agent_env(), 0)
    assert m.shape == (5, 5) and m.sum() == 0 and h == 2


def test_oracle_marks_reachable_device():
    # device two cells east: moving right would put the agent within d_safe
    env = lone_agent_env(device_start=(2, 0))
    m, _ = label_oracle(env, 0)
    assert m.sum() == 1 and m[2, 4] == 1


def test_oracle_marks_incident_and_live_pickup():
    inc = {"tick": 0, "node": [0, 1], "type": "a", "lambda": 0.0, **SEVERITY["a"]}
    env = lone_agent_env(incidents=[inc])
    env.step([0])
    m, _ = label_oracle(env, 0)
    assert m[3, 2] == 1 and m.sum() == 1
    doc = make_layout_dict("A", 1, 0)
    env = WarehouseEnv(scenario_from_dict(doc))
    env.reset(0)
    s = env.state
    near = [t for t in s.tasks if env.manhattan(t.node, s.agents[0].node) <= 2]
    m, _ = label_oracle(env, 0)
    assert m.sum() >= len({t.node for t in near})


def test_window_cells_off_map_marked():
    cells = window_cells(lone_agent_env(), 0).reshape(5, 5)
    assert np.all(cells[:2] == -1) and np.all(cells[:, :2] == -1) and cells[2, 2] == 0


def test_mean_adjacency_rows_sum_to_one():
    a = mean_adjacency(3, [(0, 1)])
    np.testing.assert_allclose(a.sum(axis=1), 1)
    np.testing.assert_allclose(a[0], [0.5, 0.5, 0])
    assert a[2, 2] == 1


def test_binarize_and_threshold():
    assert binarize([0.5, 0.49, 0.9]).tolist() == [1, 0, 1]
    assert round_threshold([-0.4, 0.6, 2.5, 3.4]).tolist() == [0, 1, 2, 3]


def test_losses():
    assert loss_mc(np.full(4, 0.5), np.array([1, 0, 1, 0]))[0] == pytest.approx(np.log(2))
    assert loss_hc(np.array([2.0]), np.array([0]))[0] == 4.0


@pytest.fixture(scope="module")
def small_ds():
    return generate_dataset(make_layout("A", 2, 4, seed=0), 2, seed=0)


def test_dataset_sample_count(small_ds):
    env = WarehouseEnv(make_layout("A", 2, 4, seed=0))
    assert len(small_ds) == 2 * env.const.horizon * 2
    assert small_ds.frame_idx[0].tolist() == [-1, -1, -1, 0]
    assert small_ds.frames.shape[1:] == (env.g.n_nodes, 9)


def test_dataset_zero_episodes():
    ds = generate_dataset(make_layout("A", 2, 4, seed=0), 0, seed=0)
    assert len(ds) == 0
    with pytest.raises(ValueError):
        ConstraintExtractor(epochs=1).fit(ds)


def test_dataset_file_round_trip(small_ds, tmp_path):
    p = tmp_path / "d.bin"
    small_ds.save(p)
    back = ExtractorDataset.load(p)
    for f in ("frames", "frame_idx", "cells", "obs", "labels", "h"):
        np.testing.assert_array_equal(getattr(back, f), getattr(small_ds, f))
    assert back.edges == small_ds.edges and back.scenario == small_ds.scenario
    back.save(tmp_path / "e.bin")
    assert (tmp_path / "e.bin").read_bytes() == p.read_bytes()


def test_dataset_is_seeded(small_ds):
    again = generate_dataset(make_layout("A", 2, 4, seed=0), 2, seed=0)
    np.testing.assert_array_equal(again.labels, small_ds.labels)


def test_zero_heads_give_all_constrained(small_ds):
    net = ExtractorNet(small_ds.n_nodes, small_ds.edges, small_ds.window, rng=np.random.default_rng(0))
    net.cell_head.params.data[...] = 0
    net.h_head.params.data[...] = 0
    net.h_head.params["b1"][...] = -0.4
    fr, cells, obs = small_ds.batch([5])
    m, h = extract(net, fr[0], obs[0], cells[0])
    assert m.tolist() == np.ones((5, 5), int).tolist() and h == 0


def test_extractor_gradient(small_ds):
    rng = np.random.default_rng(1)
    net = ExtractorNet(small_ds.n_nodes, small_ds.edges, small_ds.window, embed=3, hidden=4, obs_embed=3, rng=rng)
    for sub in net.networks:
        for name, shape in sub.params.shapes:
            if len(shape) == 1:
                sub.params[name][...] = rng.uniform(0.05, 0.2, size=shape)
    idx = [3, 40]
    fr, cells, obs = small_ds.batch(idx)
    args = (fr, cells, obs, small_ds.labels[idx], small_ds.h[idx])
    _, grads, _ = net.loss(*args)
    for sub, g in zip(net.networks, grads):
        pick = rng.choice(g.size, size=min(25, g.size), replace=False)
        full = numeric_grad(lambda: net.loss(*args)[0], sub.params.data, eps=1e-5)
        np.testing.assert_allclose(g[pick], full[pick], rtol=1e-4, atol=1e-7)


def test_zero_epochs_records_metrics(small_ds):
    est = ConstraintExtractor(epochs=0).fit(small_ds)
    assert est.loss_curve_ == [] and 0 <= est.metrics_["cell_accuracy"] <= 1


def test_overfits_one_sample(small_ds):
    one = small_ds.subset([7])
    est = ConstraintExtractor(epochs=2000, batch_size=1, holdout=0.0, lr=3e-3, seed=0).fit(one)
    assert est.loss_curve_[-1] < 1e-3
    m, h = est.predict(one)
    assert m.reshape(-1).tolist() == one.labels[0].tolist() and h[0] == one.h[0]


def test_fit_is_deterministic_and_estimator_round_trip(small_ds, tmp_path):
    a = ConstraintExtractor(epochs=2, seed=5).fit(small_ds)
    b = ConstraintExtractor(epochs=2, seed=5).fit(small_ds)
    assert a.loss_curve_ == b.loss_curve_
    assert a.loss_curve_[1] < a.loss_curve_[0]
    assert a.metrics_["n_samples"] == round(0.2 * len(small_ds))
    save_extractor(a, tmp_path / "x.ckpt")
    c = load_extractor(tmp_path / "x.ckpt")
    for u, v in zip(a.predict(small_ds), c.predict(small_ds)):
        np.testing.assert_array_equal(u, v)
    assert c.metrics_ == a.metrics_


def test_live_extractor_matches_batch_extract(small_ds):
    sc = make_layout("A", 2, 4, seed=0)
    est = ConstraintExtractor(epochs=1, seed=0).fit(small_ds)
    live = LiveExtractor(est)
    env = WarehouseEnv(sc)
    env.reset(9)
    frames = []
    rng = np.random.default_rng(0)
    for _ in range(6):
        frames.append(env.graph_features())
        m_live, h_live = live(env)
        seq = np.stack(([np.zeros_like(frames[0])] * 4 + frames)[-4:])
        obs_all = env.observe_all()
        for i in range(2):
            from warehouse_eir.extractor import raw_window

            m, h = extract(est.net_, seq, raw_window(obs_all[i], env.window), window_cells(env, i))
            np.testing.assert_array_equal(m_live[i], m)
            assert h_live[i] == h
        env.step(rng.integers(0, 20, 2))
