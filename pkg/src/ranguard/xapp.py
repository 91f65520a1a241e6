"""Online traffic classifier: per-UE smoothed verdicts, policy-driven commands, latency traces.

Every measurement frame becomes one Decision: the raw model prediction, the
window-majority smoothed verdict, an optional mitigation command (emitted once
per sustained attack episode), and a LatencyTrace capturing where the control
loop spent its time. Trace stamps come either from the wall clock (real runs)
or from a DelayModel (deterministic virtual runs).
"""

from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, field, replace
from math import inf
from typing import Iterable, Mapping, Sequence

import numpy as np

from .databus import DatabusFrame, now_us
from .kpm import (
    CLASS_ORDER,
    KpmSample,
    TrafficCategory,
    TrafficClass,
    category_of,
    feature_vector,
)
from .ransim import BaseStation, CommandAction, RicCommand

BUDGET_US = 1_000_000  # near-real-time control loop bound


# -- latency accounting --


@dataclass(frozen=True)
class LatencyTrace:
    """Microsecond stamps along one decision's path; monotone in field order.

    The two command stamps stay None for decisions that issue no command; a
    command's applied stamp is filled in when its confirmation event arrives.
    """

    t_bs_send_us: int
    t_bus_in_us: int
    t_bus_out_us: int
    t_xapp_recv_us: int
    t_infer_start_us: int
    t_infer_end_us: int
    t_cmd_sent_us: int | None = None
    t_cmd_applied_us: int | None = None

    def __post_init__(self) -> None:
        stamps = [
            ("t_bs_send_us", self.t_bs_send_us),
            ("t_bus_in_us", self.t_bus_in_us),
            ("t_bus_out_us", self.t_bus_out_us),
            ("t_xapp_recv_us", self.t_xapp_recv_us),
            ("t_infer_start_us", self.t_infer_start_us),
            ("t_infer_end_us", self.t_infer_end_us),
            ("t_cmd_sent_us", self.t_cmd_sent_us),
            ("t_cmd_applied_us", self.t_cmd_applied_us),
        ]
        if self.t_cmd_applied_us is not None and self.t_cmd_sent_us is None:
            raise ValueError("t_cmd_applied_us requires t_cmd_sent_us")
        prev_name, prev = None, None
        for name, value in stamps:
            if value is None:
                continue
            if not isinstance(value, int) or value < 0:
                raise ValueError(f"{name} must be a nonnegative integer, got {value!r}")
            if prev is not None and value < prev:
                raise ValueError(f"{name}={value} precedes {prev_name}={prev}")
            prev_name, prev = name, value

    @property
    def delta_bd_us(self) -> int:
        """BS to databus transmission."""
        return self.t_bus_in_us - self.t_bs_send_us

    @property
    def delta_d_us(self) -> int:
        """Databus processing (one direction)."""
        return self.t_bus_out_us - self.t_bus_in_us

    @property
    def delta_dr_us(self) -> int:
        """Databus to controller transmission."""
        return self.t_xapp_recv_us - self.t_bus_out_us

    @property
    def delta_i_us(self) -> int:
        """Model inference."""
        return self.t_infer_end_us - self.t_infer_start_us

    @property
    def t_n_us(self) -> int:
        """Round-trip network delay: both transmission legs, both directions."""
        return 2 * (self.delta_bd_us + self.delta_dr_us)

    @property
    def t_d_us(self) -> int:
        """Total control-loop delay."""
        return self.t_n_us + 2 * self.delta_d_us + self.delta_i_us

    @property
    def loop_us(self) -> int | None:
        """Measured send-to-applied wall time; None until the command lands."""
        if self.t_cmd_applied_us is None:
            return None
        return self.t_cmd_applied_us - self.t_bs_send_us

    def with_applied(self, t_cmd_applied_us: int) -> "LatencyTrace":
        return replace(self, t_cmd_applied_us=t_cmd_applied_us)


@dataclass(frozen=True)
class DelayModel:
    """Fixed per-leg delays for deterministic virtual-time stamping.

    Defaults give a 670 us network round trip, 45 us bus processing, and a
    2.86 ms inference: a 3.62 ms control loop.
    """

    delta_bd_us: int = 167
    delta_dr_us: int = 168
    delta_d_us: int = 45
    delta_i_us: int = 2860

    def __post_init__(self) -> None:
        for name in ("delta_bd_us", "delta_dr_us", "delta_d_us", "delta_i_us"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")

    @property
    def t_n_us(self) -> int:
        return 2 * (self.delta_bd_us + self.delta_dr_us)

    @property
    def t_d_us(self) -> int:
        return self.t_n_us + 2 * self.delta_d_us + self.delta_i_us

    def trace(self, t_bs_send_us: int, *, command: bool) -> LatencyTrace:
        """Fully synthetic trace; with a command, applied lands exactly t_d_us after send."""
        t_bus_in = t_bs_send_us + self.delta_bd_us
        t_bus_out = t_bus_in + self.delta_d_us
        t_recv = t_bus_out + self.delta_dr_us
        t_infer_end = t_recv + self.delta_i_us
        t_cmd_sent = t_infer_end if command else None
        t_cmd_applied = (
            t_infer_end + self.delta_dr_us + self.delta_d_us + self.delta_bd_us if command else None
        )
        return LatencyTrace(
            t_bs_send_us=t_bs_send_us,
            t_bus_in_us=t_bus_in,
            t_bus_out_us=t_bus_out,
            t_xapp_recv_us=t_recv,
            t_infer_start_us=t_recv,
            t_infer_end_us=t_infer_end,
            t_cmd_sent_us=t_cmd_sent,
            t_cmd_applied_us=t_cmd_applied,
        )


@dataclass(frozen=True)
class QuantilePair:
    median_us: float
    p99_us: float


@dataclass(frozen=True)
class LatencyReport:
    count: int
    delta_i: QuantilePair
    delta_d: QuantilePair
    t_n: QuantilePair
    t_d: QuantilePair
    budget_us: int
    over_budget: int  # traces whose total delay exceeds the budget
    worst_t_d_us: int

    @property
    def median_margin_us(self) -> float:
        return self.budget_us - self.t_d.median_us

    @property
    def p99_margin_us(self) -> float:
        return self.budget_us - self.t_d.p99_us

    def summary_lines(self) -> list[str]:
        def fmt(name: str, pair: QuantilePair) -> str:
            return f"{name:8s} median {pair.median_us/1000:10.3f} ms   p99 {pair.p99_us/1000:10.3f} ms"

        lines = [
            f"decisions: {self.count}",
            fmt("delta_i", self.delta_i),
            fmt("delta_d", self.delta_d),
            fmt("t_n", self.t_n),
            fmt("T_d", self.t_d),
            f"budget:   {self.budget_us/1000:.0f} ms, margin at p99 {self.p99_margin_us/1000:.3f} ms",
            f"over budget: {self.over_budget} (worst T_d {self.worst_t_d_us/1000:.3f} ms)",
        ]
        return lines


def latency_report(traces: Sequence[LatencyTrace], *, budget_us: int = BUDGET_US) -> LatencyReport:
    """Median/p99 of each delay component plus margin against the loop budget."""
    if not traces:
        raise ValueError("latency_report needs at least one trace")

    def quantiles(values: list[int]) -> QuantilePair:
        arr = np.asarray(values, dtype=np.float64)
        return QuantilePair(float(np.percentile(arr, 50)), float(np.percentile(arr, 99)))

    t_d = [t.t_d_us for t in traces]
    return LatencyReport(
        count=len(traces),
        delta_i=quantiles([t.delta_i_us for t in traces]),
        delta_d=quantiles([t.delta_d_us for t in traces]),
        t_n=quantiles([t.t_n_us for t in traces]),
        t_d=quantiles(t_d),
        budget_us=budget_us,
        over_budget=sum(1 for v in t_d if v > budget_us),
        worst_t_d_us=max(t_d),
    )


# -- smoothing and policy --


def window_majority(labels: Sequence[TrafficClass]) -> TrafficClass:
    """Most frequent label; ties go to the lowest class index."""
    if not labels:
        raise ValueError("window_majority needs at least one label")
    counts = Counter(labels)
    return min(counts, key=lambda cls: (-counts[cls], CLASS_ORDER.index(cls)))


def smooth(labels: Iterable[TrafficClass], window: int) -> list[TrafficClass]:
    """Sliding-window majority over the last `window` labels, step by step."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    buf: deque[TrafficClass] = deque(maxlen=window)
    out = []
    for label in labels:
        buf.append(label)
        out.append(window_majority(buf))
    return out


DEFAULT_WINDOW = 5
DEFAULT_DWELL = 3


@dataclass(frozen=True)
class PolicyMap:
    """What to do about each traffic class, plus how much evidence to require."""

    actions: Mapping[TrafficClass, CommandAction]
    window: int = DEFAULT_WINDOW
    dwell: int = DEFAULT_DWELL

    def __post_init__(self) -> None:
        missing = [cls.value for cls in TrafficClass if cls not in self.actions]
        if missing:
            raise ValueError(f"policy must cover every class; missing {missing}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.dwell < 1:
            raise ValueError(f"dwell must be >= 1, got {self.dwell}")

    @classmethod
    def default(cls, *, window: int = DEFAULT_WINDOW, dwell: int = DEFAULT_DWELL) -> "PolicyMap":
        """Benign traffic forwards; any attack class releases the RRC connection."""
        actions = {
            c: (
                CommandAction.FORWARD
                if category_of(c) is TrafficCategory.BENIGN
                else CommandAction.RRC_RELEASE
            )
            for c in TrafficClass
        }
        return cls(actions, window=window, dwell=dwell)


class PolicyError(ValueError):
    """Policy config text that cannot be used to build a PolicyMap."""


def parse_policy(text: str) -> PolicyMap:
    """PolicyMap from key = value text: window, dwell, and one action per class."""
    actions: dict[TrafficClass, CommandAction] = {}
    knobs = {"window": DEFAULT_WINDOW, "dwell": DEFAULT_DWELL}
    class_by_label = {cls.value: cls for cls in TrafficClass}
    seen: set[str] = set()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise PolicyError(f"line {line_no}: expected key = value, got {raw.strip()!r}")
        if key in seen:
            raise PolicyError(f"line {line_no}: duplicate key {key!r}")
        seen.add(key)
        if key in knobs:
            try:
                knobs[key] = int(value)
            except ValueError:
                raise PolicyError(f"line {line_no}: {key} must be an integer, got {value!r}") from None
        elif key in class_by_label:
            try:
                actions[class_by_label[key]] = CommandAction(value)
            except ValueError:
                choices = ", ".join(a.value for a in CommandAction)
                raise PolicyError(
                    f"line {line_no}: action must be one of {choices}, got {value!r}"
                ) from None
        else:
            raise PolicyError(f"line {line_no}: unknown key {key!r}")
    try:
        return PolicyMap(actions, window=knobs["window"], dwell=knobs["dwell"])
    except ValueError as exc:
        raise PolicyError(str(exc)) from None


def format_policy(policy: PolicyMap) -> str:
    """PolicyMap back to parseable text; parse_policy(format_policy(p)) == p."""
    lines = [f"window = {policy.window}", f"dwell = {policy.dwell}"]
    lines += [f"{cls.value} = {policy.actions[cls].value}" for cls in TrafficClass]
    return "\n".join(lines) + "\n"


# -- the online classifier --


@dataclass(frozen=True)
class Decision:
    """One classified measurement interval for one UE."""

    ue_id: int
    timestamp_ms: int
    raw: TrafficClass
    smoothed: TrafficClass
    command: RicCommand | None
    trace: LatencyTrace


@dataclass
class _UeTrack:
    window: deque
    attack_run: int = 0
    engaged: bool = False  # a command already covers the current episode


class OnlineClassifier:
    """Consumes measurement frames, emits at most one command per attack episode."""

    def __init__(
        self,
        model,
        class_labels: Sequence[TrafficClass],
        policy: PolicyMap | None = None,
        *,
        delay_model: DelayModel | None = None,
    ) -> None:
        if model is not None and not hasattr(model, "predict"):
            raise TypeError("model must expose predict(features) -> class index")
        self.model = model
        self.class_labels = tuple(class_labels)
        self.policy = policy if policy is not None else PolicyMap.default()
        self.delay_model = delay_model
        self.dropped = 0  # frames skipped because no model was loaded
        self.malformed = 0  # frames skipped because the payload was not a measurement
        self._tracks: dict[int, _UeTrack] = {}
        self._next_cmd_id = 1

    def _track(self, ue_id: int) -> _UeTrack:
        track = self._tracks.get(ue_id)
        if track is None:
            track = _UeTrack(deque(maxlen=self.policy.window))
            self._tracks[ue_id] = track
        return track

    def on_measurement(self, frame: DatabusFrame, *, recv_us: int | None = None) -> Decision | None:
        """Classify one frame; None when it was dropped (no model / bad payload)."""
        if self.model is None:
            self.dropped += 1
            return None
        try:
            sample = KpmSample.from_payload(frame.payload)
        except (ValueError, TypeError):
            self.malformed += 1
            return None
        features = np.asarray(feature_vector(sample), dtype=np.float64)

        modeled = self.delay_model
        if modeled is not None:
            raw_idx = int(self.model.predict(features))
            base = modeled.trace(frame.t_sent_us, command=False)
        else:
            t_send = frame.t_sent_us
            bus = frame.payload.get("bus")
            bus = bus if isinstance(bus, Mapping) else {}
            t_bus_in = int(bus.get("in_us", t_send))
            t_bus_out = int(bus.get("out_us", t_bus_in))
            # clamps keep the trace monotone against sub-us cross-thread jitter
            t_recv = max(now_us() if recv_us is None else recv_us, t_bus_out)
            t_infer_start = max(now_us(), t_recv)
            raw_idx = int(self.model.predict(features))
            t_infer_end = max(now_us(), t_infer_start)
            base = LatencyTrace(
                t_bs_send_us=t_send,
                t_bus_in_us=t_bus_in,
                t_bus_out_us=t_bus_out,
                t_xapp_recv_us=t_recv,
                t_infer_start_us=t_infer_start,
                t_infer_end_us=t_infer_end,
            )
        if not 0 <= raw_idx < len(self.class_labels):
            raise ValueError(
                f"model predicted index {raw_idx}, but only {len(self.class_labels)} labels are mapped"
            )
        raw = self.class_labels[raw_idx]

        track = self._track(sample.ue_id)
        track.window.append(raw)
        smoothed = window_majority(track.window)
        attack = category_of(smoothed) is TrafficCategory.ATTACK
        track.attack_run = track.attack_run + 1 if attack else 0

        command = None
        trace = base
        if attack and track.attack_run >= self.policy.dwell and not track.engaged:
            track.engaged = True
            if modeled is not None:
                trace = modeled.trace(frame.t_sent_us, command=True)
                sent_us = trace.t_cmd_sent_us
            else:
                sent_us = max(now_us(), base.t_infer_end_us)
                trace = replace(base, t_cmd_sent_us=sent_us)
            command = RicCommand(
                ue_id=sample.ue_id,
                action=self.policy.actions[smoothed],
                issued_at_us=int(sent_us),
                cmd_id=self._next_cmd_id,
            )
            self._next_cmd_id += 1
        elif not attack:
            track.engaged = False

        return Decision(
            ue_id=sample.ue_id,
            timestamp_ms=sample.timestamp_ms,
            raw=raw,
            smoothed=smoothed,
            command=command,
            trace=trace,
        )


# -- time-to-correct --


@dataclass(frozen=True)
class GroundTruthSegment:
    """One legged interval of a UE's script: [start_ms, end_ms) runs one class."""

    ue_id: int
    start_ms: int
    end_ms: int
    label: TrafficClass

    def __post_init__(self) -> None:
        if not 0 <= self.start_ms < self.end_ms:
            raise ValueError(f"need 0 <= start_ms < end_ms, got {self.start_ms}..{self.end_ms}")


def ground_truth_segments(bs: BaseStation, duration_ms: int) -> list[GroundTruthSegment]:
    """Per-UE class timeline implied by the scripts a station was built with.

    Scripts shorter than the run are extended (the final class keeps running);
    longer scripts are truncated at the run's end.
    """
    segments: list[GroundTruthSegment] = []
    for ue in bs.ues:
        start = 0
        script = ue.stream.script
        for i, leg in enumerate(script):
            end = start + leg.duration_ms
            if i == len(script) - 1:
                end = max(end, duration_ms)
            end = min(end, duration_ms)
            if end > start:
                segments.append(GroundTruthSegment(ue.ue_id, start, end, leg.traffic_class))
            start += leg.duration_ms
            if start >= duration_ms:
                break
    return segments


@dataclass(frozen=True)
class TimeToCorrect:
    """Per-segment stabilization times and their distribution.

    times_ms holds one entry per segment, inf for segments that never settle
    on the true class; the CDF denominator is the full segment count, so a
    curve that tops out below 1.0 is showing unresolved segments.
    """

    times_ms: tuple[float, ...]

    @property
    def total(self) -> int:
        return len(self.times_ms)

    @property
    def unresolved(self) -> int:
        return sum(1 for t in self.times_ms if t == inf)

    def fraction_within(self, budget_ms: float) -> float:
        if not self.times_ms:
            raise ValueError("no segments scored")
        return sum(1 for t in self.times_ms if t <= budget_ms) / self.total

    def cdf(self) -> list[tuple[float, float]]:
        """Step points (time_ms, cumulative fraction of all segments)."""
        finite = sorted(t for t in self.times_ms if t != inf)
        points = []
        for i, t in enumerate(finite, start=1):
            if points and points[-1][0] == t:
                points[-1] = (t, i / self.total)
            else:
                points.append((t, i / self.total))
        return points


def time_to_correct(
    decisions: Iterable[Decision],
    segments: Sequence[GroundTruthSegment],
    *,
    period_ms: int,
) -> TimeToCorrect:
    """When, within each segment, the smoothed verdict became and stayed correct.

    A decision stamped at t is observable once its measurement interval has
    elapsed, so a correct suffix starting at relative stamp r scores r +
    period_ms; a segment whose verdicts are correct throughout scores 0, and
    one whose final verdict is wrong scores inf.
    """
    if period_ms < 1:
        raise ValueError(f"period_ms must be >= 1, got {period_ms}")
    by_ue: dict[int, list[Decision]] = {}
    for d in decisions:
        by_ue.setdefault(d.ue_id, []).append(d)
    for rows in by_ue.values():
        rows.sort(key=lambda d: d.timestamp_ms)

    times: list[float] = []
    for seg in segments:
        rows = [
            d
            for d in by_ue.get(seg.ue_id, [])
            if seg.start_ms <= d.timestamp_ms < seg.end_ms
        ]
        if not rows:
            times.append(inf)
            continue
        wrong = [i for i, d in enumerate(rows) if d.smoothed is not seg.label]
        if not wrong:
            times.append(0.0)
        elif wrong[-1] == len(rows) - 1:
            times.append(inf)
        else:
            first_correct = rows[wrong[-1] + 1]
            times.append(float(first_correct.timestamp_ms - seg.start_ms + period_ms))
    return TimeToCorrect(tuple(times))
