"""Pipeline tests: presets, dataset collection, training, evaluation, closed loop, bench."""

from __future__ import annotations

import csv
import threading
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from ranguard import pipeline
from ranguard.databus import Broker, BusClient, FrameKind, now_us
from ranguard.kpm import (
    CLASS_ORDER,
    CSV_HEADER,
    TrafficCategory,
    TrafficClass,
    category_of,
    read_dataset,
)
from ranguard.ml import DecisionTree, TreeConfig
from ranguard.ransim import CommandAction, TimeMode, UeSpec, build_station
from ranguard.xapp import DelayModel, PolicyMap


@pytest.fixture(scope="module")
def train_rows(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "train.csv"
    pipeline.collect(pipeline.one_ue_scenario(0, duration_ms=60_000), path)
    return read_dataset(path)


@pytest.fixture(scope="module")
def dt_model(train_rows):
    model, _ = pipeline.train_model(train_rows, pipeline.TrainOptions(algo="dt"))
    return model


class ParrotModel:
    """predict_batch returns a canned vector; lets tests pin exact predictions."""

    n_features = 10

    def __init__(self, answers):
        self.answers = np.asarray(answers, dtype=np.int64)

    def predict(self, x):
        return int(self.answers[0])

    def predict_batch(self, X):
        return self.answers[: X.shape[0]]


# -- presets --


def test_one_ue_preset_shape():
    config = pipeline.one_ue_scenario(7)
    assert config.duration_ms == 600_000
    assert config.seed == 7
    assert [u.ue_id for u in config.ues] == [1]
    assert config.ues[0].script is None


def test_two_ue_preset_shape():
    config = pipeline.two_ue_scenario()
    assert [u.ue_id for u in config.ues] == [1, 2]
    assert all(u.script is None for u in config.ues)


def test_attack_demo_attacker_turns_hostile_once():
    config = pipeline.attack_demo_scenario(0)
    benign_ue, attacker = config.ues
    assert benign_ue.script is None
    assert set(benign_ue.classes) <= set(pipeline.BENIGN_CLASSES)
    lead, tail = attacker.script
    assert category_of(lead.traffic_class) is TrafficCategory.BENIGN
    assert category_of(tail.traffic_class) is TrafficCategory.ATTACK
    assert 2000 <= lead.duration_ms <= 4000
    assert lead.duration_ms % 100 == 0
    assert lead.duration_ms + tail.duration_ms == config.duration_ms


def test_attack_demo_seed_varies_onset_and_class():
    scripts = {pipeline.attack_demo_scenario(s).ues[1].script for s in range(12)}
    onsets = {script[0].duration_ms for script in scripts}
    attacks = {script[1].traffic_class for script in scripts}
    assert len(onsets) > 1
    assert len(attacks) > 1


def test_attack_demo_rejects_too_short_run():
    with pytest.raises(ValueError, match="4 s of attack"):
        pipeline.attack_demo_scenario(0, duration_ms=5000)


# -- collect --


def test_collect_row_count_and_round_trip(tmp_path):
    path = tmp_path / "ds.csv"
    n = pipeline.collect(pipeline.one_ue_scenario(0, duration_ms=20_000), path)
    assert n == 200
    rows = read_dataset(path)
    assert len(rows) == 200
    assert {r.label for r in rows} <= set(CLASS_ORDER)


def test_collect_two_ue_interleaves_both(tmp_path):
    path = tmp_path / "ds2.csv"
    n = pipeline.collect(pipeline.two_ue_scenario(1, duration_ms=10_000), path)
    assert n == 200
    rows = read_dataset(path)
    assert {r.sample.ue_id for r in rows} == {1, 2}


def test_collect_zero_duration_writes_header_only(tmp_path):
    path = tmp_path / "empty.csv"
    assert pipeline.collect(pipeline.one_ue_scenario(0, duration_ms=0), path) == 0
    with path.open() as fh:
        lines = fh.read().splitlines()
    assert lines == [",".join(CSV_HEADER)]


def test_collect_failure_leaves_no_partial_file(tmp_path, monkeypatch):
    path = tmp_path / "partial.csv"

    def explode(out_path, rows):
        Path(out_path).write_text("half a header")
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(pipeline, "write_dataset", explode)
    with pytest.raises(RuntimeError, match="disk on fire"):
        pipeline.collect(pipeline.one_ue_scenario(0, duration_ms=1000), path)
    assert not path.exists()


# -- training --


def test_dataset_matrix_shapes_and_labels(train_rows):
    X, y = pipeline.dataset_matrix(train_rows)
    assert X.shape == (len(train_rows), 10)
    assert X.dtype == np.float64
    assert y.dtype == np.int64
    assert set(np.unique(y)) <= set(range(len(CLASS_ORDER)))
    assert y[0] == CLASS_ORDER.index(train_rows[0].label)


def test_dataset_matrix_rejects_empty():
    with pytest.raises(ValueError, match="no rows"):
        pipeline.dataset_matrix([])


def test_train_options_rejects_unknown_algo():
    with pytest.raises(ValueError, match="algo"):
        pipeline.TrainOptions(algo="svm")


@pytest.mark.parametrize("algo", pipeline.ALGO_CHOICES)
def test_train_model_every_algo_predicts(train_rows, algo):
    options = pipeline.TrainOptions(algo=algo, trees=10, rounds=5, max_depth=8)
    model, summary = pipeline.train_model(train_rows[:300], options)
    assert summary.algo == algo
    assert summary.n_samples == 300
    assert summary.n_features == 10
    assert model.n_features == 10
    X, y = pipeline.dataset_matrix(train_rows[:50])
    preds = model.predict_batch(X)
    assert preds.shape == (50,)
    assert set(np.unique(preds)) <= set(range(len(CLASS_ORDER)))


def test_train_file_round_trip(tmp_path, train_rows):
    dataset = tmp_path / "ds.csv"
    pipeline.collect(pipeline.one_ue_scenario(0, duration_ms=20_000), dataset)
    model_path = tmp_path / "model.json"
    summary = pipeline.train(dataset, model_path, pipeline.TrainOptions(algo="dt"))
    assert summary.n_samples == 200
    model, classes = pipeline.load_online_model(model_path)
    assert classes == CLASS_ORDER
    X, _ = pipeline.dataset_matrix(train_rows[:5])
    assert 0 <= int(model.predict(X[0])) < len(CLASS_ORDER)


# -- evaluation --


def test_evaluate_perfect_predictions_are_diagonal(train_rows):
    rows = train_rows[:120]
    truth = [CLASS_ORDER.index(r.label) for r in rows]
    report = pipeline.evaluate(
        ParrotModel(truth), [c.value for c in CLASS_ORDER], rows, delta_i_samples=0
    )
    assert report.accuracy == 1.0
    assert report.binary_f1 == 1.0
    assert int(np.trace(report.five_class.counts)) == len(rows)
    assert report.five_class.counts.sum() == len(rows)


def test_evaluate_binary_is_block_sum_of_five_class(dt_model, tmp_path):
    path = tmp_path / "held.csv"
    pipeline.collect(pipeline.two_ue_scenario(1, duration_ms=15_000), path)
    rows = read_dataset(path)
    report = pipeline.evaluate(
        dt_model, [c.value for c in CLASS_ORDER], rows, delta_i_samples=0
    )
    five, binary = report.five_class, report.binary
    cats = [category_of(TrafficClass(l)).value for l in five.labels]
    for gi, g_true in enumerate(binary.labels):
        for gj, g_pred in enumerate(binary.labels):
            block = sum(
                int(five.counts[i, j])
                for i in range(len(cats))
                for j in range(len(cats))
                if cats[i] == g_true and cats[j] == g_pred
            )
            assert int(binary.counts[gi, gj]) == block
    assert binary.total == five.total == len(rows)


def test_evaluate_rejects_feature_mismatch(train_rows):
    bad = ParrotModel([0] * 10)
    bad.n_features = 7
    with pytest.raises(ValueError, match="7 features"):
        pipeline.evaluate(bad, [c.value for c in CLASS_ORDER], train_rows[:10], delta_i_samples=0)


def test_evaluate_rejects_empty_rows(dt_model):
    with pytest.raises(ValueError, match="no rows"):
        pipeline.evaluate(dt_model, [c.value for c in CLASS_ORDER], [], delta_i_samples=0)


def test_inference_quantiles_orders_and_validates(dt_model, train_rows):
    X, _ = pipeline.dataset_matrix(train_rows[:50])
    med, p99 = pipeline.inference_quantiles(dt_model, X, n=200)
    assert 0 < med <= p99
    with pytest.raises(ValueError, match="n must be"):
        pipeline.inference_quantiles(dt_model, X, n=0)


def test_evaluate_files_round_trip(tmp_path):
    dataset = tmp_path / "ds.csv"
    pipeline.collect(pipeline.one_ue_scenario(0, duration_ms=20_000), dataset)
    model_path = tmp_path / "model.json"
    pipeline.train(dataset, model_path, pipeline.TrainOptions(algo="dt"))
    report = pipeline.evaluate_files(model_path, dataset, delta_i_samples=50)
    assert report.n_samples == 200
    assert report.accuracy > 0.9
    assert report.delta_i_median_us > 0


# -- closed loop --


@pytest.fixture(scope="module")
def demo_result(dt_model):
    return pipeline.closed_loop(pipeline.attack_demo_scenario(3), dt_model, CLASS_ORDER)


def test_closed_loop_releases_attacker_exactly_once(demo_result):
    releases = [c for c in demo_result.commands if c.action is CommandAction.RRC_RELEASE]
    assert len(releases) == 1
    assert releases[0].ue_id == 2
    assert demo_result.released_ues == frozenset({2})
    assert demo_result.false_releases == ()


def test_closed_loop_episode_is_scored(demo_result):
    (episode,) = demo_result.episodes
    assert episode.ue_id == 2
    assert episode.released
    assert episode.start_ms <= episode.applied_ms < episode.end_ms
    assert episode.detect_ms == pytest.approx(episode.applied_ms - episode.start_ms)
    assert episode.detect_ms > 0


def test_closed_loop_truths_align_with_ground_truth(demo_result):
    assert len(demo_result.truths) == len(demo_result.decisions)
    by_ue = {}
    for seg in demo_result.segments:
        by_ue.setdefault(seg.ue_id, []).append(seg)
    for decision, truth in zip(demo_result.decisions, demo_result.truths):
        seg = next(
            s
            for s in by_ue[decision.ue_id]
            if s.start_ms <= decision.timestamp_ms < s.end_ms
        )
        assert truth is seg.label


def test_closed_loop_latency_trace_identity(demo_result):
    model = DelayModel()
    for decision in demo_result.decisions:
        trace = decision.trace
        assert trace.t_d_us == trace.t_n_us + 2 * trace.delta_d_us + trace.delta_i_us
        assert trace.t_d_us == model.t_d_us
    assert demo_result.latency.count == len(demo_result.decisions)
    assert demo_result.latency.over_budget == 0


def test_closed_loop_released_ue_stops_reporting(demo_result):
    (episode,) = demo_result.episodes
    after = [d for d in demo_result.decisions if d.ue_id == 2]
    last_decision_ms = max(d.timestamp_ms for d in after)
    # one tick may land between command and application; none after that
    assert last_decision_ms <= episode.applied_ms + 100


def test_closed_loop_detection_only_policy_never_releases(dt_model):
    policy = PolicyMap({cls: CommandAction.FORWARD for cls in TrafficClass})
    result = pipeline.closed_loop(
        pipeline.attack_demo_scenario(3), dt_model, CLASS_ORDER, policy=policy
    )
    assert result.released_ues == frozenset()
    assert all(c.action is CommandAction.FORWARD for c in result.commands)
    # full coverage: both UEs report for the whole run
    expected = 2 * (result.config.duration_ms // result.config.period_ms)
    assert len(result.decisions) == expected


def test_closed_loop_rejects_real_time_config(dt_model):
    config = replace(pipeline.attack_demo_scenario(0), time_mode=TimeMode.REAL)
    with pytest.raises(ValueError, match="virtual-time"):
        pipeline.closed_loop(config, dt_model, CLASS_ORDER)


def test_attack_spans_merge_adjacent_segments():
    from ranguard.xapp import GroundTruthSegment

    segs = [
        GroundTruthSegment(1, 0, 1000, TrafficClass.WEB),
        GroundTruthSegment(1, 1000, 2000, TrafficClass.DOS_HULK),
        GroundTruthSegment(1, 2000, 3000, TrafficClass.SLOWLORIS),
        GroundTruthSegment(1, 3000, 4000, TrafficClass.VOIP),
        GroundTruthSegment(2, 2000, 3000, TrafficClass.DDOS_RIPPER),
    ]
    spans = pipeline._attack_spans(segs)
    assert [(s.ue_id, s.start_ms, s.end_ms, s.label) for s in spans] == [
        (1, 1000, 3000, TrafficClass.DOS_HULK),
        (2, 2000, 3000, TrafficClass.DDOS_RIPPER),
    ]


# -- reports --


def test_report_files_and_determinism(demo_result, dt_model, tmp_path):
    paths = pipeline.write_closed_loop_report(demo_result, tmp_path / "a")
    with paths["predictions"].open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(demo_result.decisions)
    assert tuple(rows[0]) == pipeline.PREDICTION_LOG_HEADER
    assert {r["true_label"] for r in rows} <= {c.value for c in CLASS_ORDER}
    command_rows = [r for r in rows if r["command"]]
    assert [r["command"] for r in command_rows] == ["rrc_release"]

    with paths["cdf"].open() as fh:
        cdf_rows = list(csv.DictReader(fh))
    fracs = [float(r["fraction"]) for r in cdf_rows]
    assert fracs == sorted(fracs)
    assert all(0 <= f <= 1 for f in fracs)

    with paths["episodes"].open() as fh:
        episode_rows = list(csv.DictReader(fh))
    assert len(episode_rows) == len(demo_result.episodes)
    assert episode_rows[0]["released"] == "1"

    again = pipeline.closed_loop(pipeline.attack_demo_scenario(3), dt_model, CLASS_ORDER)
    paths2 = pipeline.write_closed_loop_report(again, tmp_path / "b")
    for key in paths:
        assert paths[key].read_bytes() == paths2[key].read_bytes()


def test_report_applied_time_matches_command_log(demo_result, tmp_path):
    paths = pipeline.write_closed_loop_report(demo_result, tmp_path)
    with paths["predictions"].open() as fh:
        command_row = next(r for r in csv.DictReader(fh) if r["command"])
    (episode,) = demo_result.episodes
    t_d_ms = int(command_row["T_d_us"]) / 1000
    assert episode.applied_ms == pytest.approx(int(command_row["timestamp_ms"]) + t_d_ms)


# -- latency bench over real TCP --


def test_bench_latency_validates_arguments(dt_model):
    with pytest.raises(ValueError, match="frames"):
        pipeline.bench_latency(dt_model, CLASS_ORDER, frames=0)
    with pytest.raises(ValueError, match="rate_hz"):
        pipeline.bench_latency(dt_model, CLASS_ORDER, frames=10, rate_hz=0)


def test_bench_latency_measures_real_loopback(dt_model):
    report = pipeline.bench_latency(dt_model, CLASS_ORDER, frames=60, rate_hz=300)
    assert report.count == 60
    assert report.t_d.median_us > 0
    assert report.t_d.p99_us >= report.t_d.median_us
    assert report.t_d.p99_us < 1_000_000  # a loopback frame never needs the full second


# -- live xApp runner --


def test_run_xapp_classifies_and_commands_over_bus(dt_model, tmp_path):
    config = pipeline.attack_demo_scenario(3, duration_ms=8000)
    bs = build_station(config)
    log_path = tmp_path / "log.csv"
    outcome = {}
    with Broker(port=0) as broker:
        host, port = broker.address
        with BusClient.connect(host, port) as pub, BusClient.connect(host, port) as watcher:
            ctrl_sub = watcher.subscribe(bs.ctrl_topic)

            def serve():
                outcome["stats"] = pipeline.run_xapp(
                    dt_model,
                    CLASS_ORDER,
                    broker_host=host,
                    broker_port=port,
                    log_path=log_path,
                    idle_timeout_s=1.0,
                )

            server = threading.Thread(target=serve, daemon=True)
            server.start()
            # malformed probes on another station's topic until one is delivered,
            # which proves the kpm.* subscription is registered
            base_out = broker.stats().frames_out
            for attempt in range(250):
                pub.publish(FrameKind.MEASUREMENT, "kpm.9", {"probe": attempt})
                time.sleep(0.02)
                if broker.stats().frames_out > base_out:
                    break
            else:
                pytest.fail("kpm.* subscription never registered")
            for k in range(80):
                for frame in bs.tick(k * 100, t_sent_us=now_us()):
                    pub.publish(frame.kind, frame.topic, frame.payload, frame.t_sent_us)
            pub.publish(FrameKind.MEASUREMENT, bs.kpm_topic, {"nonsense": True})
            server.join(timeout=30)
            command_frame = ctrl_sub.poll(timeout=2.0)
    stats = outcome["stats"]
    assert stats.decisions == 160
    assert stats.commands == 1
    # every non-measurement frame (probes + trailing nonsense) was counted malformed
    assert stats.malformed == stats.frames - stats.decisions
    assert stats.malformed >= 2
    assert command_frame is not None
    assert command_frame.topic == bs.ctrl_topic
    assert command_frame.payload["action"] == "rrc_release"
    assert command_frame.payload["ue_id"] == 2
    with log_path.open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 160
    assert all(r["true_label"] == "" for r in rows)
    assert sum(1 for r in rows if r["command"]) == 1


def test_run_xapp_idle_timeout_returns_quickly(dt_model):
    with Broker(port=0) as broker:
        host, port = broker.address
        stats = pipeline.run_xapp(
            dt_model, CLASS_ORDER, broker_host=host, broker_port=port, idle_timeout_s=0.2
        )
    assert stats.frames == 0
    assert stats.decisions == 0
