"""Stochastic per-class traffic generators producing per-UE KPM measurement streams.

Each traffic class is a parametric load model driven by a seeded RNG on top of a
shared slow-fading channel. Every class ramps from zero to steady state over a
configurable transient window after it starts, so early measurements of a fresh
flow look ambiguous on purpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from ranguard.kpm import KpmSample, LabeledSample, TrafficClass

DEFAULT_PERIOD_MS = 100
DEFAULT_TRANSIENT_MS = 500


# --- channel model -----------------------------------------------------------

@dataclass(frozen=True)
class ChannelState:
    """Slow-fading channel: a fixed base SINR plus a bounded random walk."""

    sinr_base_db: float = 18.0
    sinr_walk_db: float = 0.0
    walk_cap_db: float = 6.0
    walk_step_db: float = 0.5

    def __post_init__(self) -> None:
        if self.walk_cap_db < 0 or self.walk_step_db < 0:
            raise ValueError("walk_cap_db and walk_step_db must be >= 0")
        if abs(self.sinr_walk_db) > self.walk_cap_db:
            raise ValueError(f"sinr_walk_db {self.sinr_walk_db} exceeds cap {self.walk_cap_db}")

    @property
    def sinr_db(self) -> float:
        return self.sinr_base_db + self.sinr_walk_db


def step_channel(state: ChannelState, rng: np.random.Generator) -> ChannelState:
    walk = state.sinr_walk_db + rng.uniform(-state.walk_step_db, state.walk_step_db)
    walk = min(state.walk_cap_db, max(-state.walk_cap_db, walk))
    return replace(state, sinr_walk_db=walk)


def cqi_from_sinr(sinr_db: float) -> int:
    """Wideband CQI report for a given SINR."""
    return int(min(15, max(0, round((sinr_db + 6.0) / 1.9))))


def ul_capacity_bps(mcs: int) -> float:
    """Deliverable uplink rate on the configured grant at a given MCS."""
    return 1.0e6 + 1.2e6 * mcs


def dl_capacity_bps(mcs: int) -> float:
    return 2.0e6 + 2.8e6 * mcs


def mcs_for_load(cqi: int, offered_bps: float, capacity_bps: Callable[[int], float]) -> int:
    """Scheduler MCS choice: channel-driven base, backed off when the link is idle.

    Non-bijective with CQI on purpose: the same CQI maps to different MCS
    depending on offered load, matching scheduler link adaptation.
    """
    base = round(cqi * 28 / 15)
    cap = capacity_bps(base)
    util = offered_bps / cap if cap > 0 else 0.0
    if util <= 0.05:
        mcs = base - 3
    elif util <= 0.4:
        mcs = base - 1
    else:
        mcs = base
    return min(28, max(0, mcs))


# --- uplink loss model --------------------------------------------------------

def _base_drop_prob(sinr_db: float) -> float:
    p = 0.002 + max(0.0, 8.0 - sinr_db) * 0.004
    return min(0.05, max(0.002, p))


def _drop_prob(sinr_db: float, offered_bps: float, capacity_bps: float) -> float:
    congestion = 0.0
    if offered_bps > capacity_bps > 0:
        congestion = 1.0 - capacity_bps / offered_bps
    return min(0.95, _base_drop_prob(sinr_db) + congestion)


# --- per-class load parameters -------------------------------------------------

_CLASS_DEFAULTS: dict[TrafficClass, dict[str, float]] = {
    TrafficClass.WEB: dict(
        page_rate_per_s=0.6,
        page_size_mean_bytes=900_000.0,
        page_size_sigma=0.6,
        drain_frac_low=0.6,
        drain_frac_high=0.9,
        ul_fraction=0.05,
        bg_dl_low_bps=15e3,
        bg_dl_high_bps=70e3,
        bg_ul_low_bps=4e3,
        bg_ul_high_bps=20e3,
        request_bits=30e3,
        ack_every_bits=24e3,
    ),
    TrafficClass.VOIP: dict(
        rate_low_bps=30e3,
        rate_high_bps=160e3,
        jitter_bps=2e3,
        clamp_low_bps=25e3,
        clamp_high_bps=165e3,
        pkts_per_interval=5,
    ),
    TrafficClass.DDOS_RIPPER: dict(
        pkts_mean=320.0,
        pkts_sd=30.0,
        pkt_bytes_low=380.0,
        pkt_bytes_high=520.0,
        dl_low_bps=30e3,
        dl_high_bps=120e3,
    ),
    TrafficClass.DOS_HULK: dict(
        pkts_mean=600.0,
        pkts_sd=50.0,
        pkt_bytes_low=950.0,
        pkt_bytes_high=1250.0,
        dl_low_bps=0.8e6,
        dl_high_bps=2.5e6,
    ),
    TrafficClass.SLOWLORIS: dict(
        extra_pkt_prob=0.3,
        pkt_bytes_low=90.0,
        pkt_bytes_high=140.0,
        dl_high_bps=2.5e3,
    ),
}


@dataclass(frozen=True)
class TrafficProfile:
    """A traffic class plus its load parameters and ramp-up window."""

    traffic_class: TrafficClass
    transient_ms: int = DEFAULT_TRANSIENT_MS
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.transient_ms < 0:
            raise ValueError(f"transient_ms must be >= 0, got {self.transient_ms}")
        defaults = _CLASS_DEFAULTS[self.traffic_class]
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise ValueError(
                f"unknown parameter(s) for {self.traffic_class.value}: {sorted(unknown)}; "
                f"valid: {sorted(defaults)}"
            )
        merged = dict(defaults)
        merged.update(self.params)
        for key, value in merged.items():
            if not key.endswith("_db") and value < 0:
                raise ValueError(f"{self.traffic_class.value}.{key} must be >= 0, got {value}")
        object.__setattr__(self, "params", merged)

    def __getitem__(self, key: str) -> float:
        return self.params[key]


# --- the generator -------------------------------------------------------------

class TrafficStream:
    """Stateful single-UE generator for one traffic profile.

    Draw order per interval is fixed (channel step, SINR noise, class load,
    loss realization) so a stream is fully determined by profile, channel
    start state, and RNG seed.
    """

    def __init__(
        self,
        profile: TrafficProfile,
        rng: np.random.Generator,
        channel: ChannelState | None = None,
        period_ms: int = DEFAULT_PERIOD_MS,
    ) -> None:
        if period_ms <= 0:
            raise ValueError(f"period_ms must be > 0, got {period_ms}")
        self.profile = profile
        self.channel = channel if channel is not None else ChannelState()
        self.period_ms = period_ms
        self._rng = rng
        self._t_rel_ms = 0
        self._cqi = cqi_from_sinr(self.channel.sinr_db)
        self._class_state: dict[str, float] = {}
        self._init_class_state()

    def _init_class_state(self) -> None:
        self._class_state.clear()
        if self.profile.traffic_class is TrafficClass.WEB:
            self._class_state["backlog_bytes"] = 0.0
        elif self.profile.traffic_class is TrafficClass.VOIP:
            self._class_state["call_rate_bps"] = self._rng.uniform(
                self.profile["rate_low_bps"], self.profile["rate_high_bps"]
            )

    def switch_profile(self, profile: TrafficProfile) -> None:
        """Start a new flow: per-class state and the ramp restart, channel persists."""
        self.profile = profile
        self._t_rel_ms = 0
        self._init_class_state()

    @property
    def t_rel_ms(self) -> int:
        return self._t_rel_ms

    def _scale(self) -> float:
        t = self.profile.transient_ms
        if t <= 0:
            return 1.0
        return min(1.0, self._t_rel_ms / t)

    def _class_loads(self, scale: float) -> tuple[float, float, int]:
        """Offered (ul_bits, dl_bits, ul_pkts) for one interval, ramp applied."""
        rng = self._rng
        p = self.profile
        seconds = self.period_ms / 1000.0
        cls = p.traffic_class

        if cls is TrafficClass.WEB:
            request_bits = 0.0
            req_pkts = 0
            if rng.random() < p["page_rate_per_s"] * seconds:
                size = rng.lognormal(math.log(p["page_size_mean_bytes"]), p["page_size_sigma"])
                self._class_state["backlog_bytes"] += size
                request_bits = p["request_bits"]
                req_pkts = int(rng.integers(3, 7))
            drain_frac = rng.uniform(p["drain_frac_low"], p["drain_frac_high"])
            base_mcs = min(28, max(0, round(self._cqi * 28 / 15)))
            drain_bytes = drain_frac * dl_capacity_bps(base_mcs) * seconds / 8.0 * scale
            drained = min(self._class_state["backlog_bytes"], drain_bytes)
            self._class_state["backlog_bytes"] -= drained
            bg_dl = rng.uniform(p["bg_dl_low_bps"], p["bg_dl_high_bps"]) * seconds
            bg_ul = rng.uniform(p["bg_ul_low_bps"], p["bg_ul_high_bps"]) * seconds
            bg_pkts = int(rng.integers(1, 4))
            dl_bits = drained * 8.0 + bg_dl * scale
            ul_bits = p["ul_fraction"] * drained * 8.0 + (bg_ul + request_bits) * scale
            acks = dl_bits / p["ack_every_bits"]
            pkts = int(round((acks + bg_pkts + req_pkts) * scale))
            return ul_bits, dl_bits, pkts

        if cls is TrafficClass.VOIP:
            lo, hi = p["clamp_low_bps"], p["clamp_high_bps"]
            rate = self._class_state["call_rate_bps"]
            jit_ul = rng.uniform(-p["jitter_bps"], p["jitter_bps"])
            jit_dl = rng.uniform(-p["jitter_bps"], p["jitter_bps"])
            ul = min(hi, max(lo, rate + jit_ul)) * seconds * scale
            dl = min(hi, max(lo, rate + jit_dl)) * seconds * scale
            pkts = int(round(p["pkts_per_interval"] * scale))
            return ul, dl, pkts

        if cls in (TrafficClass.DDOS_RIPPER, TrafficClass.DOS_HULK):
            pkts_full = max(1.0, rng.normal(p["pkts_mean"], p["pkts_sd"]))
            pkt_bytes = rng.uniform(p["pkt_bytes_low"], p["pkt_bytes_high"])
            dl = rng.uniform(p["dl_low_bps"], p["dl_high_bps"]) * seconds * scale
            pkts = int(round(pkts_full * scale))
            ul = pkts * pkt_bytes * 8.0
            return ul, dl, pkts

        # Slowloris: a trickle of tiny keep-alive writes, near-silent downlink
        pkts_full = 1.0 + (1.0 if rng.random() < p["extra_pkt_prob"] else 0.0)
        pkt_bytes = rng.uniform(p["pkt_bytes_low"], p["pkt_bytes_high"])
        dl = rng.uniform(0.0, p["dl_high_bps"]) * seconds * scale
        pkts = int(round(pkts_full * scale))
        ul = pkts * pkt_bytes * 8.0
        return ul, dl, pkts

    def next_sample(self, timestamp_ms: int, bs_id: int, ue_id: int) -> KpmSample:
        """Generate the measurement for the interval ending now, then advance."""
        self.channel = step_channel(self.channel, self._rng)
        sinr = self.channel.sinr_db
        pusch = sinr + self._rng.normal(0.0, 0.3)
        pucch = sinr - 1.5 + self._rng.normal(0.0, 0.4)
        self._cqi = cqi_from_sinr(pusch)

        scale = self._scale()
        ul_bits, dl_bits, ul_pkts = self._class_loads(scale)
        seconds = self.period_ms / 1000.0
        offered_ul_bps = ul_bits / seconds
        offered_dl_bps = dl_bits / seconds

        ul_mcs = mcs_for_load(self._cqi, offered_ul_bps, ul_capacity_bps)
        dl_mcs = mcs_for_load(self._cqi, offered_dl_bps, dl_capacity_bps)

        p_drop = _drop_prob(sinr, offered_ul_bps, ul_capacity_bps(ul_mcs))
        nok = int(self._rng.binomial(ul_pkts, p_drop)) if ul_pkts > 0 else 0
        ok = ul_pkts - nok
        ul_brate = offered_ul_bps * (1.0 - p_drop)

        self._t_rel_ms += self.period_ms
        return KpmSample(
            timestamp_ms=timestamp_ms,
            bs_id=bs_id,
            ue_id=ue_id,
            cqi=self._cqi,
            dl_mcs=dl_mcs,
            ul_mcs=ul_mcs,
            pusch_sinr_db=pusch,
            pucch_sinr_db=pucch,
            dl_brate_bps=offered_dl_bps,
            ul_brate_bps=ul_brate,
            ul_pkts_ok=ok,
            ul_pkts_nok=nok,
        )


# --- scripts -------------------------------------------------------------------

@dataclass(frozen=True)
class ScriptSegment:
    """One leg of a UE's behaviour: run this class for this long."""

    traffic_class: TrafficClass
    duration_ms: int

    def __post_init__(self) -> None:
        if self.duration_ms <= 0:
            raise ValueError(f"segment duration must be > 0, got {self.duration_ms}")


class ScriptedStream:
    """A UE working through a class script; each segment restarts the ramp.

    Past the end of the script the final class keeps running at steady state.
    """

    def __init__(
        self,
        script: Sequence[ScriptSegment],
        seed: int | np.random.Generator,
        *,
        period_ms: int = DEFAULT_PERIOD_MS,
        transient_ms: int = DEFAULT_TRANSIENT_MS,
        channel: ChannelState | None = None,
        params: Mapping[TrafficClass, Mapping[str, float]] | None = None,
    ) -> None:
        if not script:
            raise ValueError("script must not be empty")
        for i, seg in enumerate(script):
            if seg.duration_ms % period_ms != 0:
                raise ValueError(
                    f"segment {i} duration {seg.duration_ms} is not a multiple of period {period_ms}"
                )
        self.script = tuple(script)
        self.period_ms = period_ms
        self._transient_ms = transient_ms
        self._params = dict(params or {})
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self._seg_idx = 0
        self._left_ms = script[0].duration_ms
        self._stream = TrafficStream(
            self._profile_for(script[0].traffic_class), rng, channel, period_ms
        )

    def _profile_for(self, cls: TrafficClass) -> TrafficProfile:
        return TrafficProfile(cls, self._transient_ms, dict(self._params.get(cls, {})))

    @property
    def label(self) -> TrafficClass:
        return self.script[self._seg_idx].traffic_class

    def next_sample(self, timestamp_ms: int, bs_id: int, ue_id: int) -> LabeledSample:
        if self._left_ms <= 0 and self._seg_idx + 1 < len(self.script):
            self._seg_idx += 1
            seg = self.script[self._seg_idx]
            self._left_ms = seg.duration_ms
            self._stream.switch_profile(self._profile_for(seg.traffic_class))
        self._left_ms -= self.period_ms
        sample = self._stream.next_sample(timestamp_ms, bs_id, ue_id)
        return LabeledSample(sample, self.label)


def schedule_execution(
    script: Sequence[ScriptSegment],
    seed: int,
    *,
    bs_id: int = 1,
    ue_id: int = 0,
    period_ms: int = DEFAULT_PERIOD_MS,
    transient_ms: int = DEFAULT_TRANSIENT_MS,
    start_ms: int = 0,
    channel: ChannelState | None = None,
    params: Mapping[TrafficClass, Mapping[str, float]] | None = None,
) -> Iterator[LabeledSample]:
    """Labeled measurement stream for a whole script, one sample per period."""
    stream = ScriptedStream(
        script, seed, period_ms=period_ms, transient_ms=transient_ms, channel=channel, params=params
    )
    total_ms = sum(seg.duration_ms for seg in script)
    for t in range(start_ms, start_ms + total_ms, period_ms):
        yield stream.next_sample(t, bs_id, ue_id)


def build_random_script(
    rng: np.random.Generator,
    classes: Sequence[TrafficClass],
    duration_ms: int,
    *,
    min_segment_ms: int = 3000,
    max_segment_ms: int = 8000,
    period_ms: int = DEFAULT_PERIOD_MS,
) -> list[ScriptSegment]:
    """Random class sequence covering duration_ms exactly; no same-class repeats."""
    if not classes:
        raise ValueError("classes must not be empty")
    if duration_ms <= 0 or duration_ms % period_ms != 0:
        raise ValueError(f"duration_ms must be a positive multiple of {period_ms}")
    lo = -(-min_segment_ms // period_ms)  # segment bounds in whole periods
    hi = max_segment_ms // period_ms
    if not 1 <= lo <= hi:
        raise ValueError(
            f"need period_ms <= min_segment_ms <= max_segment_ms, "
            f"got {period_ms}, {min_segment_ms}, {max_segment_ms}"
        )
    script: list[ScriptSegment] = []
    left = duration_ms
    prev: TrafficClass | None = None
    while left > 0:
        pool = [c for c in classes if c is not prev] or list(classes)
        cls = pool[int(rng.integers(0, len(pool)))]
        seg = min(int(rng.integers(lo, hi + 1)) * period_ms, left)
        if left - seg < min_segment_ms:
            # never strand a sub-minimum tail: absorb it or leave a full minimum
            if left <= max_segment_ms:
                seg = left
            else:
                seg = max(period_ms, (left - min_segment_ms) // period_ms * period_ms)
        script.append(ScriptSegment(cls, seg))
        prev = cls
        left -= seg
    return script
