"""Placement-trigger state machine over an IMU sample stream.

The phone is "moving" (S2) until the absolute linear-acceleration and
angular-rate values on all three axes have stayed below their thresholds
for ``debounce_n`` consecutive samples, at which point it enters the
stationary state (S1) and a single ``capture`` event fires.  While it
stays in S1 no further captures fire; once the stationary episode
exceeds the time threshold ``tt`` a ``background_enter`` event is
emitted, and the matching ``foreground_resume`` fires on the next
S1 -> S2 transition.

The machine is timestamp-driven and sample-rate agnostic.  State is
plain data: callers own one state value per stream and thread it through
:func:`ingest`; distinct streams never share state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Iterator, Optional, TextIO, Tuple


class StreamOrderError(ValueError):
    """Raised when a sample violates the stream contract."""


class Mode(Enum):
    S1_STATIONARY = "S1"
    S2_MOVING = "S2"


class EventKind(Enum):
    CAPTURE = "capture"
    BACKGROUND_ENTER = "background_enter"
    FOREGROUND_RESUME = "foreground_resume"


@dataclass(frozen=True)
class ImuSample:
    """One IMU reading: time (s), linear acceleration (m/s^2), angular rate (deg/s)."""

    t: float
    la: Tuple[float, float, float]
    aa: Tuple[float, float, float]


@dataclass(frozen=True)
class TriggerConfig:
    """Per-axis thresholds, backgrounding time threshold, and S1 debounce length.

    Defaults follow the reference deployment: LA 0.04 m/s^2 and
    AA 0.02 deg/s on every axis, 30 s before backgrounding.  Thresholds
    vary between phone models, so they stay configurable and no
    auto-calibration is attempted.
    """

    la_thresh: Tuple[float, float, float] = (0.04, 0.04, 0.04)
    aa_thresh: Tuple[float, float, float] = (0.02, 0.02, 0.02)
    tt: float = 30.0
    debounce_n: int = 10

    def __post_init__(self) -> None:
        if any(v <= 0 for v in self.la_thresh) or any(v <= 0 for v in self.aa_thresh):
            raise ValueError("thresholds must be positive")
        if self.tt <= 0:
            raise ValueError("tt must be positive")
        if self.debounce_n < 1:
            raise ValueError("debounce_n must be >= 1")


@dataclass(frozen=True)
class PlacementState:
    """Mode, time the mode was entered, and backgrounding flag.

    ``run_length`` counts consecutive sub-threshold samples while in S2
    (the debounce progress); ``last_t`` enforces timestamp monotonicity.
    """

    mode: Mode = Mode.S2_MOVING
    since: float = -math.inf
    backgrounded: bool = False
    run_length: int = 0
    last_t: float = -math.inf


@dataclass(frozen=True)
class TriggerEvent:
    t: float
    kind: EventKind


def reset(state: Optional[PlacementState] = None) -> PlacementState:
    """Fresh stream state: moving, not backgrounded."""
    return PlacementState()


def is_sub_threshold(sample: ImuSample, cfg: TriggerConfig) -> bool:
    """True iff |la_i| < la_thresh_i and |aa_i| < aa_thresh_i on all axes (strict)."""
    return all(abs(v) < th for v, th in zip(sample.la, cfg.la_thresh)) and all(
        abs(v) < th for v, th in zip(sample.aa, cfg.aa_thresh)
    )


def ingest(
    sample: ImuSample, state: PlacementState, cfg: TriggerConfig
) -> Tuple[PlacementState, Optional[TriggerEvent]]:
    """Advance the state machine by one sample.

    Returns the successor state and at most one event: ``capture`` when
    the debounce run completes an S2 -> S1 transition,
    ``background_enter`` once per stationary episode when its duration
    first reaches ``tt``, ``foreground_resume`` on the S1 -> S2
    transition that ends a backgrounded episode.

    Raises :class:`StreamOrderError` on a non-monotonic timestamp and
    ``ValueError`` on non-finite sample values.
    """
    if not (
        math.isfinite(sample.t)
        and all(math.isfinite(v) for v in sample.la)
        and all(math.isfinite(v) for v in sample.aa)
    ):
        raise ValueError(f"non-finite sample at t={sample.t!r}")
    if sample.t <= state.last_t:
        raise StreamOrderError(
            f"timestamp {sample.t} does not advance past {state.last_t}"
        )

    quiet = is_sub_threshold(sample, cfg)

    if state.mode is Mode.S2_MOVING:
        run = state.run_length + 1 if quiet else 0
        if run >= cfg.debounce_n:
            new = PlacementState(
                mode=Mode.S1_STATIONARY,
                since=sample.t,
                backgrounded=False,
                run_length=0,
                last_t=sample.t,
            )
            return new, TriggerEvent(sample.t, EventKind.CAPTURE)
        return replace(state, run_length=run, last_t=sample.t), None

    # S1: one super-threshold sample ends the episode.
    if not quiet:
        event = (
            TriggerEvent(sample.t, EventKind.FOREGROUND_RESUME)
            if state.backgrounded
            else None
        )
        new = PlacementState(
            mode=Mode.S2_MOVING,
            since=sample.t,
            backgrounded=False,
            run_length=0,
            last_t=sample.t,
        )
        return new, event

    if not state.backgrounded and sample.t - state.since >= cfg.tt:
        return replace(state, backgrounded=True, last_t=sample.t), TriggerEvent(
            sample.t, EventKind.BACKGROUND_ENTER
        )
    return replace(state, last_t=sample.t), None


def run_stream(
    samples: Iterable[ImuSample], cfg: TriggerConfig
) -> Iterator[TriggerEvent]:
    """Stream a whole trace through a fresh state machine, yielding events."""
    state = reset()
    for sample in samples:
        state, event = ingest(sample, state, cfg)
        if event is not None:
            yield event


# --- trace / event-log text formats ---------------------------------------
#
# Trace: one sample per line, `t la_x la_y la_z aa_x aa_y aa_z`.
# Event log: `t kind` lines.


def parse_trace_line(line: str) -> ImuSample:
    parts = line.split()
    if len(parts) != 7:
        raise ValueError(f"expected 7 fields, got {len(parts)}: {line!r}")
    vals = [float(p) for p in parts]
    return ImuSample(t=vals[0], la=(vals[1], vals[2], vals[3]), aa=(vals[4], vals[5], vals[6]))


def read_trace(fp: TextIO) -> Iterator[ImuSample]:
    for line in fp:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        yield parse_trace_line(line)


def format_trace_line(sample: ImuSample) -> str:
    fields = (sample.t, *sample.la, *sample.aa)
    return " ".join(f"{v:.6f}" for v in fields)


def format_event_line(event: TriggerEvent) -> str:
    return f"{event.t:.6f} {event.kind.value}"


def demo_trace(
    rate_hz: float = 50.0,
    n_placements: int = 5,
    duration_s: float = 600.0,
    seed: int = 7,
) -> list[ImuSample]:
    """Scripted trace with ``n_placements`` distinct set-downs over ``duration_s``.

    Each placement is a motion burst followed by a long rest; rests are
    spaced so that every set-down yields exactly one capture under the
    default config.  Deterministic for a given seed.
    """
    import numpy as np

    rng = np.random.default_rng(seed)
    dt = 1.0 / rate_hz
    n = int(round(duration_s * rate_hz))
    segment = n // n_placements
    burst_len = max(int(2.0 * rate_hz), 1)

    samples: list[ImuSample] = []
    for i in range(n):
        t = i * dt
        in_burst = (i % segment) < burst_len and (i // segment) < n_placements
        if in_burst:
            la = tuple(rng.uniform(0.5, 3.0) * rng.choice((-1.0, 1.0)) for _ in range(3))
            aa = tuple(rng.uniform(0.5, 5.0) * rng.choice((-1.0, 1.0)) for _ in range(3))
        else:
            la = tuple(rng.uniform(-0.02, 0.02) for _ in range(3))
            aa = tuple(rng.uniform(-0.01, 0.01) for _ in range(3))
        samples.append(ImuSample(t=t, la=la, aa=aa))  # type: ignore[arg-type]
    return samples
