import csv
import json

import numpy as np
import pytest

from harmodt import GHarmoDT, HarmoDT, MTDT, harness
from harmodt.exceptions import ConfigurationError, DataError, StateError
from harmodt.harmony import active_count
from harmodt.harness import MetricsLog, evaluate, export, load_run, save_eval, save_run, train


def test_single_update_when_E_equals_t_m(tiny_cfg):
    r = train(tiny_cfg(E=5, t_m=5, eta_max=2))
    assert r.log.column("iteration") == [5]


def test_update_count_and_sparsity(tiny_cfg):
    cfg = tiny_cfg(E=23, t_m=5)
    r = train(cfg)
    assert r.log.column("iteration") == [5, 10, 15, 20]
    n = len(r.params)
    for rec in r.log.records:
        assert rec["popcount"] == [active_count(n, cfg.S)] * 8
        assert rec["removed"] == rec["added"]


def test_degenerate_config_matches_baseline(tiny_cfg):
    a = train(tiny_cfg(algo="harmodt", S=0.0, eta_max=0))
    b = train(tiny_cfg(algo="mtdt"))
    assert a.params.values.tobytes() == b.params.values.tobytes()
    for key in ("loss_mean", "avg_harmony", "loss_per_task"):
        assert a.log.column(key) == b.log.column(key)


def test_frozen_coordinates_keep_initial_values(tiny_cfg):
    r = train(tiny_cfg(S=0.5, E=30))
    frozen = ~r.ever_active
    assert frozen.any()
    assert np.array_equal(r.params.values[frozen], r.init_params.values[frozen])


def test_missing_dataset_names_tasks(tiny_cfg, tmp_path):
    with pytest.raises(DataError, match="missing"):
        train(tiny_cfg(data_dir=str(tmp_path / "none")))
    ds = harness.load_datasets(tiny_cfg(), [0, 1])
    with pytest.raises(DataError, match=r"\[2, 3, 4, 5, 6, 7\]"):
        harness.train_harmodt(tiny_cfg(), ds)


def test_metrics_log_is_append_only():
    log = MetricsLog()
    rec = {k: 0 for k in MetricsLog.KEYS}
    log.append(**{**rec, "iteration": 5})
    with pytest.raises(StateError):
        log.append(**{**rec, "iteration": 5})
    with pytest.raises(StateError):
        log.append(iteration=10)
    assert MetricsLog.from_jsonl(log.to_jsonl()).records == log.records


def test_group_run_degenerate_counts(tiny_cfg):
    single = train(tiny_cfg(algo="gharmodt", n_groups=1, E=20, t_w=5))
    assert len(single.masks) == 1 and single.gating_report.heldout_accuracy == 1.0
    per_task = train(tiny_cfg(algo="gharmodt", n_groups=8, E=20, t_w=5))
    assert per_task.assignment.groups == {t: t for t in range(8)}
    with pytest.raises(ConfigurationError):
        train(tiny_cfg(algo="gharmodt", n_groups=9))


def test_group_run_schedule_and_sparsity(tiny_cfg):
    cfg = tiny_cfg(algo="gharmodt", n_groups=3, E=30, t_w=10)
    r = train(cfg)
    assert r.log.column("phase") == ["warmup", "warmup", "train", "train", "train", "train"]
    n = len(r.params)
    for rec in r.log.records[2:]:
        assert rec["popcount"] == [active_count(n, cfg.S)] * 3
    assert sorted(set(r.assignment.groups.values())) == [0, 1, 2]


def test_run_directory_round_trip(tiny_cfg, tmp_path):
    r = train(tiny_cfg(algo="gharmodt", n_groups=2, E=20, t_w=5))
    out = save_run(r, tmp_path / "g")
    back = load_run(out)
    assert back.params.values.tobytes() == r.params.values.tobytes()
    assert back.init_params.values.tobytes() == r.init_params.values.tobytes()
    assert all(np.array_equal(a, b) for a, b in zip(back.masks, r.masks))
    assert back.assignment == r.assignment and back.complete
    assert np.array_equal(back.ever_active, r.ever_active)
    assert back.log.records == json.loads(json.dumps(r.log.records))
    x = np.random.default_rng(0).normal(size=(3, back.gating.n_features_in_))
    assert np.array_equal(back.gating.predict(x), r.gating.predict(x))


# ---------------------------------------------------------------- evaluation


def test_provided_protocol_with_all_ones_masks_equals_baseline(tiny_cfg):
    base = train(tiny_cfg(algo="mtdt"))
    ones = harness.RunResult(base.config, base.task_ids, base.params, base.init_params,
                             [np.ones(len(base.params), dtype=bool)] * 8, [], base.log,
                             base.ever_active, base.targets)
    a = evaluate(base, "provided", episodes=3)
    b = evaluate(ones, "provided", episodes=3)
    assert [t.return_mean for t in a.tasks] == [t.return_mean for t in b.tasks]
    assert a.metric == "success" and len(a.tasks) == 8


def test_evaluation_is_seeded(tiny_cfg):
    r = train(tiny_cfg())
    a, b = evaluate(r, "provided", episodes=4), evaluate(r, "provided", episodes=4)
    assert a.to_json() == b.to_json()


def test_agnostic_protocol_requires_gating(tiny_cfg):
    r = train(tiny_cfg())
    with pytest.raises(ConfigurationError):
        evaluate(r, "agnostic")


def test_agnostic_protocol_selects_masks_by_gating(tiny_cfg, monkeypatch):
    r = train(tiny_cfg(algo="gharmodt", n_groups=2, E=20, t_w=5))
    used = []
    real = harness.rollout

    def spy(task, params, cfg, mask, prompt, target, horizon, rng, n_episodes=1, init_states=None):
        used.append((task.task_id, mask, [p.task_source for p in prompt]))
        return real(task, params, cfg, mask, prompt, target, horizon, rng, n_episodes, init_states)

    monkeypatch.setattr(harness, "rollout", spy)
    predicted = []
    real_predict = r.gating.predict
    monkeypatch.setattr(r.gating, "predict", lambda x: predicted.append(real_predict(x)) or predicted[-1])
    rep = evaluate(r, "agnostic", episodes=3)
    assert all(t.group_accuracy is not None for t in rep.tasks)
    # demonstrations come from the task being scored
    assert all(src == tid for tid, _, srcs in used for src in srcs)
    masked = [(tid, m) for tid, m, _ in used if m is not None]
    groups_used = {tid: set() for tid, _ in masked}
    for tid, m in masked:
        groups_used[tid].add(next(j for j, g in enumerate(r.masks) if g is m))
    # every masked episode runs under a group the classifier predicted
    assert set().union(*groups_used.values()) <= set(np.concatenate(predicted).tolist())


def test_unseen_protocol_and_threshold_warning(tiny_cfg):
    r = train(tiny_cfg(suite="dir8", held_out="1,5", thresh=3))
    rep = evaluate(r, "unseen", episodes=2)
    assert [t.task_id for t in rep.tasks] == [1, 5] and rep.metric == "return"
    r.config = r.config.replace(thresh=6)
    with pytest.warns(RuntimeWarning, match="all zeros"):
        rep = evaluate(r, "unseen", episodes=2)
    assert rep.warnings
    with pytest.raises(ConfigurationError):
        evaluate(train(tiny_cfg(suite="dir8")), "unseen")


# ---------------------------------------------------------------- export


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_export_schema_and_determinism(tiny_cfg, tmp_path):
    root = tmp_path / "results"
    for ng in (1, 2):
        r = train(tiny_cfg(algo="gharmodt", n_groups=ng, E=20, t_w=5))
        out = save_run(r, root / f"g{ng}")
        save_eval(evaluate(r, "provided", episodes=2), out)
        save_eval(evaluate(r, "agnostic", episodes=2), out)
    a = export(root, tmp_path / "e1")
    b = export(root, tmp_path / "e2")
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes()
    curve = read_csv(a["harmony_curve"])
    assert curve[0] == harness.CURVE_HEADER
    assert len(curve) - 1 == 2 * 4  # one row per logging interval per run
    sweep = read_csv(a["group_sweep"])
    assert sweep[0] == harness.SWEEP_HEADER
    per_protocol = {}
    for row in sweep[1:]:
        per_protocol.setdefault(row[1], []).append(row[2])
    assert per_protocol == {"agnostic": ["1", "2"], "provided": ["1", "2"]}
    assert json.loads(a["summary"].read_text())["complete"] is True


def test_export_flags_partial_runs(tiny_cfg, tmp_path):
    r = train(tiny_cfg())
    out = save_run(r, tmp_path / "res" / "a")
    (out / "status.json").write_text('{"complete": false}\n')
    paths = export(tmp_path / "res")
    assert json.loads(paths["summary"].read_text())["complete"] is False
    assert read_csv(paths["harmony_curve"])[1][-1] == "0"


# ---------------------------------------------------------------- estimators


def test_estimators_follow_the_sklearn_protocol(tiny_cfg):
    cfg = tiny_cfg()
    data = harness.load_datasets(cfg, list(range(8)))
    est = HarmoDT(config=cfg, E=10, t_m=5, eta_max=3, batch_size=4)
    assert est.get_params()["t_m"] == 5
    est.fit(data)
    assert len(est.masks_) == 8
    sampler = harness.WindowSampler(data, harness.policy_config(cfg, data))
    batch = sampler.sample(0, 2, np.random.default_rng(0))
    assert est.predict(batch, 0).shape == (2, 4, 2)
    assert 0.0 <= est.score() <= 1.0
    base = MTDT(config=cfg, E=10, batch_size=4).fit(data)
    assert base.result_.masks is None
    grouped = GHarmoDT(config=cfg, E=10, t_m=5, t_w=5, n_groups=2, eta_max=3, batch_size=4).fit(data)
    assert grouped.assignment_.n_groups == 2
    with pytest.raises(ConfigurationError):
        MTDT(config=cfg).fit({})
