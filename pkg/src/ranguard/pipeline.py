"""Orchestration: dataset collection, training, evaluation, closed-loop runs, latency bench.

Everything here composes the other modules: virtual-time runs for
reproducible datasets and closed-loop experiments, a real TCP loopback for
honest latency numbers, and CSV/plain-text reports for all of it.
"""

from __future__ import annotations

import csv
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .databus import Broker, BusClient, BusDisconnected, DatabusFrame, FrameKind, now_us
from .kpm import (
    CLASS_ORDER,
    CSV_HEADER,
    FEATURE_COUNT,
    LabeledSample,
    TrafficCategory,
    TrafficClass,
    category_of,
    class_from_label,
    feature_vector,
    read_dataset,
    write_dataset,
)
from .ml import (
    AdaBoost,
    BoostConfig,
    ConfusionMatrix,
    DecisionTree,
    ForestConfig,
    KnnClassifier,
    RandomForest,
    TreeConfig,
    load_model,
    save_model,
)
from .ransim import (
    CommandAction,
    RicCommand,
    RrcState,
    ScenarioConfig,
    TimeMode,
    UeSpec,
    build_station,
    connect_with_retry,
    labeled_stream,
)
from .traffic import ScriptSegment
from .xapp import (
    Decision,
    DelayModel,
    GroundTruthSegment,
    LatencyReport,
    OnlineClassifier,
    PolicyMap,
    TimeToCorrect,
    ground_truth_segments,
    latency_report,
    time_to_correct,
)

ATTACK_CLASSES = tuple(c for c in TrafficClass if category_of(c) is TrafficCategory.ATTACK)
BENIGN_CLASSES = tuple(c for c in TrafficClass if category_of(c) is TrafficCategory.BENIGN)

PREDICTION_LOG_HEADER = (
    "timestamp_ms",
    "ue_id",
    "true_label",
    "predicted",
    "smoothed",
    "command",
    "T_d_us",
)


# -- scenario presets --


def one_ue_scenario(seed: int = 0, *, duration_ms: int = 600_000) -> ScenarioConfig:
    """One UE cycling through all five classes at random: the training shape."""
    return ScenarioConfig(duration_ms=duration_ms, seed=seed, ues=(UeSpec(1, None),))


def two_ue_scenario(seed: int = 1, *, duration_ms: int = 600_000) -> ScenarioConfig:
    """Two UEs with independent random scripts: the held-out testing shape."""
    return ScenarioConfig(
        duration_ms=duration_ms, seed=seed, ues=(UeSpec(1, None), UeSpec(2, None))
    )


def attack_demo_scenario(seed: int = 0, *, duration_ms: int = 12_000) -> ScenarioConfig:
    """One benign UE plus one attacker that turns hostile after a benign lead-in.

    The seed varies the attack class, the lead-in length, and every stream
    draw, so repeated runs exercise different onsets.
    """
    picks = np.random.default_rng(seed)
    lead_ms = int(picks.integers(20, 41)) * 100  # 2..4 s of good behaviour
    if duration_ms < lead_ms + 4000:
        raise ValueError(f"duration_ms must leave >= 4 s of attack, got {duration_ms}")
    benign = BENIGN_CLASSES[int(picks.integers(0, len(BENIGN_CLASSES)))]
    attack = ATTACK_CLASSES[int(picks.integers(0, len(ATTACK_CLASSES)))]
    return ScenarioConfig(
        duration_ms=duration_ms,
        seed=seed,
        ues=(
            UeSpec(1, None, classes=BENIGN_CLASSES),
            UeSpec(
                2,
                (ScriptSegment(benign, lead_ms), ScriptSegment(attack, duration_ms - lead_ms)),
            ),
        ),
    )


PRESETS = {
    "one_ue": one_ue_scenario,
    "two_ue": two_ue_scenario,
    "attack_demo": attack_demo_scenario,
}


# -- dataset collection --


def collect(config: ScenarioConfig, out_path: str | Path) -> int:
    """Labeled dataset CSV from a virtual-time run; returns the row count.

    A failed run never leaves a partial file behind; a zero-duration run
    leaves a header-only file.
    """
    out_path = Path(out_path)
    try:
        rows = list(labeled_stream(config))
        if not rows:
            with out_path.open("w", newline="") as fh:
                csv.writer(fh).writerow(CSV_HEADER)
            return 0
        return write_dataset(out_path, rows)
    except BaseException:
        out_path.unlink(missing_ok=True)
        raise


# -- training --


ALGO_CHOICES = ("dt", "rf", "knn", "ada")


@dataclass(frozen=True)
class TrainOptions:
    algo: str = "rf"
    trees: int = 100
    max_depth: int = 15
    min_samples_split: int = 5
    min_samples_leaf: int = 1
    k: int = 5
    rounds: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.algo not in ALGO_CHOICES:
            raise ValueError(f"algo must be one of {ALGO_CHOICES}, got {self.algo!r}")


@dataclass(frozen=True)
class TrainSummary:
    algo: str
    n_samples: int
    n_features: int
    train_seconds: float


def dataset_matrix(rows: Sequence[LabeledSample]) -> tuple[np.ndarray, np.ndarray]:
    """Feature matrix and class-index vector in CLASS_ORDER."""
    if not rows:
        raise ValueError("dataset has no rows")
    X = np.array([feature_vector(r.sample) for r in rows], dtype=np.float64)
    y = np.array([CLASS_ORDER.index(r.label) for r in rows], dtype=np.int64)
    return X, y


def train_model(rows: Sequence[LabeledSample], options: TrainOptions = TrainOptions()):
    """Train one classifier on labeled samples: (model, summary)."""
    X, y = dataset_matrix(rows)
    n_classes = len(CLASS_ORDER)
    tree_cfg = TreeConfig(options.max_depth, options.min_samples_split, options.min_samples_leaf)
    t0 = time.perf_counter()
    if options.algo == "dt":
        model = DecisionTree.train(X, y, n_classes, tree_cfg)
    elif options.algo == "rf":
        forest_cfg = ForestConfig(
            options.trees, options.max_depth, options.min_samples_split, options.min_samples_leaf
        )
        model = RandomForest.train(X, y, n_classes, forest_cfg, seed=options.seed)
    elif options.algo == "knn":
        model = KnnClassifier(options.k).fit(X, y, n_classes)
    else:
        model = AdaBoost.train(X, y, n_classes, BoostConfig(options.rounds))
    elapsed = time.perf_counter() - t0
    return model, TrainSummary(options.algo, len(rows), X.shape[1], elapsed)


def train(dataset_path: str | Path, model_path: str | Path, options: TrainOptions = TrainOptions()) -> TrainSummary:
    """Dataset CSV in, model file out."""
    rows = read_dataset(dataset_path)
    model, summary = train_model(rows, options)
    save_model(model, model_path, [c.value for c in CLASS_ORDER])
    return summary


def load_online_model(model_path: str | Path):
    """(model, class list) from a model file, labels mapped back to traffic classes."""
    loaded = load_model(model_path)
    return loaded.model, tuple(class_from_label(s) for s in loaded.class_labels)


# -- evaluation --


BINARY_GROUPING = {cls.value: category_of(cls).value for cls in TrafficClass}


@dataclass(frozen=True)
class EvalReport:
    n_samples: int
    five_class: ConfusionMatrix
    binary: ConfusionMatrix
    accuracy: float
    binary_f1: float
    delta_i_median_us: float
    delta_i_p99_us: float

    def summary_lines(self) -> list[str]:
        lines = [
            f"samples: {self.n_samples}",
            f"five-class accuracy: {self.accuracy:.4f}",
            f"binary (benign/attack) F1: {self.binary_f1:.4f}",
            f"inference delta_i median: {self.delta_i_median_us / 1000:.3f} ms"
            f"   p99: {self.delta_i_p99_us / 1000:.3f} ms",
            "",
            "five-class confusion:",
            str(self.five_class),
            "",
            "binary confusion:",
            str(self.binary),
        ]
        return lines


def inference_quantiles(model, X: np.ndarray, *, n: int = 10_000, seed: int = 0) -> tuple[float, float]:
    """Median and p99 single-sample inference wall time in us over n predictions."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    idx = np.random.default_rng(seed).integers(0, X.shape[0], size=n)
    rows = [np.array(X[i]) for i in idx]  # materialized so the loop times predict alone
    times = np.empty(n, dtype=np.float64)
    for j, x in enumerate(rows):
        t0 = time.perf_counter_ns()
        model.predict(x)
        times[j] = time.perf_counter_ns() - t0
    return float(np.percentile(times, 50)) / 1000.0, float(np.percentile(times, 99)) / 1000.0


def evaluate(
    model,
    class_labels: Sequence[str],
    rows: Sequence[LabeledSample],
    *,
    delta_i_samples: int = 10_000,
    seed: int = 0,
) -> EvalReport:
    """Confusion matrices, headline metrics, and the per-sample inference benchmark."""
    if not rows:
        raise ValueError("evaluation dataset has no rows")
    X = np.array([feature_vector(r.sample) for r in rows], dtype=np.float64)
    n_features = getattr(model, "n_features", X.shape[1])
    if n_features != X.shape[1]:
        raise ValueError(f"model expects {n_features} features, dataset has {X.shape[1]}")
    preds = model.predict_batch(X)
    pairs = [(rows[i].label.value, class_labels[int(preds[i])]) for i in range(len(rows))]
    five = ConfusionMatrix.from_pairs(list(class_labels), pairs)
    binary = five.collapse(BINARY_GROUPING)
    med_us, p99_us = (0.0, 0.0)
    if delta_i_samples > 0:
        med_us, p99_us = inference_quantiles(model, X, n=delta_i_samples, seed=seed)
    return EvalReport(
        n_samples=len(rows),
        five_class=five,
        binary=binary,
        accuracy=five.accuracy(),
        binary_f1=binary.f1(TrafficCategory.ATTACK.value),
        delta_i_median_us=med_us,
        delta_i_p99_us=p99_us,
    )


def evaluate_files(
    model_path: str | Path, dataset_path: str | Path, *, delta_i_samples: int = 10_000, seed: int = 0
) -> EvalReport:
    loaded = load_model(model_path)
    rows = read_dataset(dataset_path)
    return evaluate(
        loaded.model, loaded.class_labels, rows, delta_i_samples=delta_i_samples, seed=seed
    )


# -- closed loop --


@dataclass(frozen=True)
class Episode:
    """One contiguous attack span of one UE, and how the loop handled it."""

    ue_id: int
    start_ms: int
    end_ms: int
    label: TrafficClass  # class at onset
    released: bool
    applied_ms: float | None
    detect_ms: float | None


@dataclass(frozen=True)
class ClosedLoopResult:
    config: ScenarioConfig
    decisions: tuple[Decision, ...]
    truths: tuple[TrafficClass, ...]  # aligned with decisions
    segments: tuple[GroundTruthSegment, ...]
    episodes: tuple[Episode, ...]
    commands: tuple[RicCommand, ...]
    released_ues: frozenset[int]
    false_releases: tuple[int, ...]  # release commands issued while the UE was benign
    ttc: TimeToCorrect
    latency: LatencyReport

    def summary_lines(self) -> list[str]:
        released = ", ".join(str(u) for u in sorted(self.released_ues)) or "none"
        lines = [
            f"decisions: {len(self.decisions)}",
            f"commands: {len(self.commands)}",
            f"released UEs: {released}",
            f"false releases: {len(self.false_releases)}",
            f"attack episodes: {len(self.episodes)}"
            f" (mitigated: {sum(1 for e in self.episodes if e.released)})",
        ]
        for e in self.episodes:
            landed = f"released at {e.applied_ms:.3f} ms (+{e.detect_ms:.3f} ms)" if e.released else "NOT released"
            lines.append(f"  ue {e.ue_id} {e.label.value} [{e.start_ms}..{e.end_ms}) -> {landed}")
        lines.append("")
        lines += self.latency.summary_lines()
        return lines


def _attack_spans(segments: Sequence[GroundTruthSegment]) -> list[GroundTruthSegment]:
    """Adjacent attack segments of one UE merge into a single episode span."""
    spans: list[GroundTruthSegment] = []
    for seg in segments:
        if category_of(seg.label) is not TrafficCategory.ATTACK:
            continue
        if spans and spans[-1].ue_id == seg.ue_id and spans[-1].end_ms == seg.start_ms:
            prev = spans[-1]
            spans[-1] = GroundTruthSegment(prev.ue_id, prev.start_ms, seg.end_ms, prev.label)
        else:
            spans.append(seg)
    return spans


def closed_loop(
    config: ScenarioConfig,
    model,
    class_labels: Sequence[TrafficClass],
    *,
    policy: PolicyMap | None = None,
    delay_model: DelayModel | None = None,
) -> ClosedLoopResult:
    """Station, bus semantics, and classifier composed synchronously in virtual time.

    Each tick's measurements are classified immediately and any command is
    applied at its modeled arrival time, so the released UE disappears from
    the next tick exactly as it would on a live bus.
    """
    if config.time_mode is not TimeMode.VIRTUAL:
        raise ValueError("closed_loop is a virtual-time harness; use run_scenario for real time")
    delay_model = delay_model if delay_model is not None else DelayModel()
    bs = build_station(config)
    segments = tuple(ground_truth_segments(bs, config.duration_ms))
    xapp = OnlineClassifier(model, class_labels, policy, delay_model=delay_model)

    decisions: list[Decision] = []
    truths: list[TrafficClass] = []
    commands: list[RicCommand] = []
    false_releases: list[int] = []
    for t in range(0, config.duration_ms, config.period_ms):
        for labeled in bs.tick_samples(t):
            frame = DatabusFrame(
                FrameKind.MEASUREMENT, bs.kpm_topic, t * 1000, labeled.sample.to_payload()
            )
            decision = xapp.on_measurement(frame)
            if decision is None:
                raise RuntimeError("classifier rejected a frame the station produced")
            decisions.append(decision)
            truths.append(labeled.label)
            if decision.command is not None:
                commands.append(decision.command)
                bs.apply_command(
                    decision.command, applied_at_us=decision.trace.t_cmd_applied_us
                )
                if (
                    decision.command.action is CommandAction.RRC_RELEASE
                    and category_of(labeled.label) is TrafficCategory.BENIGN
                ):
                    false_releases.append(decision.command.ue_id)

    released = frozenset(ue.ue_id for ue in bs.ues if ue.rrc_state is RrcState.IDLE)
    applied_by_ue: dict[int, tuple[RicCommand, float]] = {}
    for d in decisions:
        cmd = d.command
        if cmd is not None and cmd.action is CommandAction.RRC_RELEASE:
            applied_by_ue.setdefault(cmd.ue_id, (cmd, d.trace.t_cmd_applied_us / 1000.0))
    episodes = []
    for span in _attack_spans(segments):
        hit = applied_by_ue.get(span.ue_id)
        landed = hit is not None and span.start_ms <= hit[1] < span.end_ms
        applied_ms = hit[1] if landed else None
        episodes.append(
            Episode(
                ue_id=span.ue_id,
                start_ms=span.start_ms,
                end_ms=span.end_ms,
                label=span.label,
                released=landed,
                applied_ms=applied_ms,
                detect_ms=None if applied_ms is None else applied_ms - span.start_ms,
            )
        )

    return ClosedLoopResult(
        config=config,
        decisions=tuple(decisions),
        truths=tuple(truths),
        segments=segments,
        episodes=tuple(episodes),
        commands=tuple(commands),
        released_ues=released,
        false_releases=tuple(false_releases),
        ttc=time_to_correct(decisions, segments, period_ms=config.period_ms),
        latency=latency_report([d.trace for d in decisions]),
    )


def write_closed_loop_report(result: ClosedLoopResult, out_dir: str | Path) -> dict[str, Path]:
    """predictions.csv, cdf.csv, episodes.csv, and a plain-text summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "predictions": out_dir / "predictions.csv",
        "cdf": out_dir / "cdf.csv",
        "episodes": out_dir / "episodes.csv",
        "summary": out_dir / "summary.txt",
    }
    with paths["predictions"].open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTION_LOG_HEADER)
        for d, truth in zip(result.decisions, result.truths):
            writer.writerow(
                [
                    d.timestamp_ms,
                    d.ue_id,
                    truth.value,
                    d.raw.value,
                    d.smoothed.value,
                    d.command.action.value if d.command is not None else "",
                    d.trace.t_d_us,
                ]
            )
    with paths["cdf"].open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("time_ms", "fraction"))
        for t, frac in result.ttc.cdf():
            writer.writerow((repr(float(t)), repr(frac)))
    with paths["episodes"].open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("ue_id", "start_ms", "end_ms", "label", "released", "applied_ms", "detect_ms"))
        for e in result.episodes:
            writer.writerow(
                (
                    e.ue_id,
                    e.start_ms,
                    e.end_ms,
                    e.label.value,
                    int(e.released),
                    "" if e.applied_ms is None else repr(e.applied_ms),
                    "" if e.detect_ms is None else repr(e.detect_ms),
                )
            )
    paths["summary"].write_text("\n".join(result.summary_lines()) + "\n")
    return paths


# -- real-TCP latency benchmark --


def bench_latency(
    model,
    class_labels: Sequence[TrafficClass],
    *,
    frames: int = 300,
    rate_hz: float = 100.0,
    seed: int = 0,
) -> LatencyReport:
    """Loopback deployment: station and classifier on a real broker, every hop timed.

    Measurement frames carry wall-clock stamps, the broker adds its ingress
    and egress times, and inference is timed around the real model, so the
    resulting traces are honest end-to-end delay measurements.
    """
    if frames < 1:
        raise ValueError(f"frames must be >= 1, got {frames}")
    if rate_hz <= 0:
        raise ValueError(f"rate_hz must be > 0, got {rate_hz}")
    config = one_ue_scenario(seed, duration_ms=frames * 100)
    bs = build_station(config)
    xapp = OnlineClassifier(model, class_labels)  # wall-clock stamps
    traces = []
    with Broker(port=0) as broker:
        host, port = broker.address
        with BusClient.connect(host, port) as pub, BusClient.connect(host, port) as ric:
            sub = ric.subscribe(bs.kpm_topic)

            def feed() -> None:
                interval = 1.0 / rate_hz
                next_t = time.monotonic()
                for k in range(frames):
                    try:
                        for frame in bs.tick(k * config.period_ms, t_sent_us=now_us()):
                            pub.publish(frame.kind, frame.topic, frame.payload, frame.t_sent_us)
                    except BusDisconnected:
                        return
                    next_t += interval
                    wait = next_t - time.monotonic()
                    if wait > 0:
                        time.sleep(wait)

            feeder = threading.Thread(target=feed, name="bench-feed", daemon=True)
            feeder.start()
            while len(traces) < frames:
                frame = sub.poll(timeout=2.0)
                if frame is None:
                    break  # stream over (or frames dropped under overload)
                decision = xapp.on_measurement(frame, recv_us=now_us())
                if decision is not None:
                    traces.append(decision.trace)
            feeder.join(timeout=10.0)
    return latency_report(traces)


# -- live xApp runner --


@dataclass(frozen=True)
class XappRunStats:
    frames: int
    decisions: int
    commands: int
    malformed: int


def run_xapp(
    model,
    class_labels: Sequence[TrafficClass],
    *,
    broker_host: str,
    broker_port: int,
    policy: PolicyMap | None = None,
    log_path: str | Path | None = None,
    max_frames: int | None = None,
    idle_timeout_s: float = 5.0,
) -> XappRunStats:
    """Attach to a live broker: classify kpm.* frames, publish commands, log decisions.

    Returns once max_frames frames arrived, the stream stays quiet for
    idle_timeout_s, or the broker goes away.
    """
    xapp = OnlineClassifier(model, class_labels, policy)
    client = connect_with_retry(broker_host, broker_port)
    frames = n_decisions = n_commands = 0
    log_fh = None
    writer = None
    try:
        sub = client.subscribe("kpm.*")
        if log_path is not None:
            log_fh = Path(log_path).open("w", newline="")
            writer = csv.writer(log_fh)
            writer.writerow(PREDICTION_LOG_HEADER)
        while max_frames is None or frames < max_frames:
            try:
                frame = sub.poll(timeout=idle_timeout_s)
            except BusDisconnected:
                break
            if frame is None:
                break
            frames += 1
            decision = xapp.on_measurement(frame, recv_us=now_us())
            if decision is None:
                continue
            n_decisions += 1
            if decision.command is not None:
                bs_id = frame.topic.rpartition(".")[2]
                try:
                    client.publish(
                        FrameKind.COMMAND, f"ctrl.{bs_id}", decision.command.to_payload()
                    )
                    n_commands += 1
                except BusDisconnected:
                    break
            if writer is not None:
                writer.writerow(
                    [
                        decision.timestamp_ms,
                        decision.ue_id,
                        "",  # ground truth is not observable online
                        decision.raw.value,
                        decision.smoothed.value,
                        decision.command.action.value if decision.command is not None else "",
                        decision.trace.t_d_us,
                    ]
                )
        return XappRunStats(frames, n_decisions, n_commands, xapp.malformed)
    finally:
        if log_fh is not None:
            log_fh.close()
        client.close()
