"""Electric energy metering for training runs.

A meter reports *cumulative* joules since it was opened, given a monotonic
time offset. Three backends exist:

``constant_power``
    a fixed wattage; energy is watts x elapsed seconds.
``trace_replay``
    a piecewise-constant power trace read from a ``t_seconds,watts`` CSV,
    integrated exactly; the last power value extends indefinitely.
``counter_file``
    a text file holding one integer microjoule counter (RAPL ``energy_uj``
    style), re-read on every sample, with wraparound at ``max_counter_uj``.

:class:`Sampler` appends samples to an :class:`EnergyLedger` from a
background thread while a training loop runs.
"""

from __future__ import annotations

import bisect
import csv
import json
import logging
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

from .metrics import DEFAULT_CO2_G_PER_KWH, grams_co2

logger = logging.getLogger(__name__)

JOULES_PER_KWH = 3.6e6

CONSTANT_POWER = "constant_power"
TRACE_REPLAY = "trace_replay"
COUNTER_FILE = "counter_file"
METER_KINDS = (CONSTANT_POWER, TRACE_REPLAY, COUNTER_FILE)


class EnergyError(RuntimeError):
    pass


class MeterConfigError(EnergyError, ValueError):
    pass


@dataclass(frozen=True)
class MeterConfig:
    kind: str
    constant_watts: float | None = None
    trace_path: str | None = None
    counter_path: str | None = None
    max_counter_uj: int | None = None
    sample_period_s: float = 1.0
    co2_g_per_kwh: float = DEFAULT_CO2_G_PER_KWH

    def __post_init__(self) -> None:
        if self.kind not in METER_KINDS:
            raise MeterConfigError(f"unknown meter kind {self.kind!r}; expected one of {METER_KINDS}")
        if self.sample_period_s <= 0:
            raise MeterConfigError("sample_period_s must be positive")
        if self.co2_g_per_kwh <= 0:
            raise MeterConfigError("co2_g_per_kwh must be positive")
        required = {
            CONSTANT_POWER: {"constant_watts"},
            TRACE_REPLAY: {"trace_path"},
            COUNTER_FILE: {"counter_path", "max_counter_uj"},
        }[self.kind]
        optional = ("constant_watts", "trace_path", "counter_path", "max_counter_uj")
        present = {name for name in optional if getattr(self, name) is not None}
        if present != required:
            raise MeterConfigError(
                f"{self.kind} meter needs exactly {sorted(required)}, got {sorted(present)}"
            )
        if self.constant_watts is not None and self.constant_watts < 0:
            raise MeterConfigError("constant_watts must be nonnegative")
        if self.max_counter_uj is not None and self.max_counter_uj <= 0:
            raise MeterConfigError("max_counter_uj must be positive")

    @classmethod
    def parse(cls, text: str, **overrides) -> MeterConfig:
        """Build a config from a JSON file path or a shorthand.

        Shorthands: ``constant:WATTS``, ``trace:PATH``, ``counter:PATH:MAX_UJ``.
        """
        if ":" in text and not Path(text).is_file():
            kind, _, rest = text.partition(":")
            try:
                if kind in ("constant", CONSTANT_POWER):
                    return cls(CONSTANT_POWER, constant_watts=float(rest), **overrides)
                if kind in ("trace", TRACE_REPLAY):
                    return cls(TRACE_REPLAY, trace_path=rest, **overrides)
                if kind in ("counter", COUNTER_FILE):
                    path, _, max_uj = rest.rpartition(":")
                    if not path:
                        raise MeterConfigError("counter shorthand is counter:PATH:MAX_UJ")
                    return cls(COUNTER_FILE, counter_path=path, max_counter_uj=int(max_uj), **overrides)
            except ValueError as exc:
                raise MeterConfigError(f"bad meter shorthand {text!r}: {exc}") from exc
            raise MeterConfigError(f"unknown meter shorthand {text!r}")
        try:
            data = json.loads(Path(text).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise MeterConfigError(f"cannot read meter config {text!r}: {exc}") from exc
        data.update(overrides)
        try:
            return cls(**data)
        except TypeError as exc:
            raise MeterConfigError(f"bad meter config {text!r}: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EnergySample:
    t_monotonic_s: float
    cumulative_joules: float


class Meter:
    """Cumulative-energy reader; reads must use nondecreasing time offsets."""

    def __init__(self, config: MeterConfig) -> None:
        self.config = config
        self.kind = config.kind
        self._last_t = 0.0

    def _read(self, t: float) -> float:
        raise NotImplementedError

    def read_cumulative_joules(self, t_monotonic_s: float) -> float:
        if t_monotonic_s < 0:
            raise EnergyError(f"negative read time {t_monotonic_s}")
        if t_monotonic_s < self._last_t:
            raise EnergyError(f"non-monotonic read: t={t_monotonic_s} after t={self._last_t}")
        self._last_t = t_monotonic_s
        return self._read(t_monotonic_s)


class ConstantPowerMeter(Meter):
    def __init__(self, config: MeterConfig) -> None:
        super().__init__(config)
        self.watts = float(config.constant_watts)

    def _read(self, t: float) -> float:
        return self.watts * t


def load_power_trace(path: str | Path) -> tuple[list[float], list[float]]:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise MeterConfigError(f"cannot read power trace {path}: {exc}") from exc
    if not rows or [c.strip() for c in rows[0]] != ["t_seconds", "watts"]:
        raise MeterConfigError(f"{path}: header must be 't_seconds,watts'")
    times, watts = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            t, w = float(row[0]), float(row[1])
        except (ValueError, IndexError) as exc:
            raise MeterConfigError(f"{path}:{lineno}: malformed row {row!r}") from exc
        if w < 0:
            raise MeterConfigError(f"{path}:{lineno}: negative power")
        if times and t <= times[-1]:
            raise MeterConfigError(f"{path}:{lineno}: timestamps must strictly increase")
        times.append(t)
        watts.append(w)
    if not times:
        raise MeterConfigError(f"{path}: empty trace")
    if times[0] != 0.0:
        raise MeterConfigError(f"{path}: trace must start at t=0")
    return times, watts


class TraceReplayMeter(Meter):
    def __init__(self, config: MeterConfig) -> None:
        super().__init__(config)
        self.times, self.watts = load_power_trace(config.trace_path)
        # energy accumulated up to each breakpoint
        self._energy_at = [0.0]
        for i in range(1, len(self.times)):
            dt = self.times[i] - self.times[i - 1]
            self._energy_at.append(self._energy_at[-1] + self.watts[i - 1] * dt)

    def _read(self, t: float) -> float:
        i = bisect.bisect_right(self.times, t) - 1
        return self._energy_at[i] + self.watts[i] * (t - self.times[i])


def read_counter_file(path: str | Path) -> int:
    try:
        text = Path(path).read_text().strip()
    except OSError as exc:
        raise MeterConfigError(f"cannot read energy counter {path}: {exc}") from exc
    try:
        value = int(text, 10)
    except ValueError:
        raise MeterConfigError(f"{path}: counter is not an integer: {text!r}") from None
    if value < 0:
        raise MeterConfigError(f"{path}: negative counter value")
    return value


class CounterFileMeter(Meter):
    """Integrates a wrapping microjoule counter; must be sampled at least once per wrap."""

    def __init__(self, config: MeterConfig) -> None:
        super().__init__(config)
        self.path = config.counter_path
        self.max_uj = int(config.max_counter_uj)
        self._last_raw = read_counter_file(self.path)
        if self._last_raw >= self.max_uj:
            raise MeterConfigError(f"{self.path}: counter {self._last_raw} >= max {self.max_uj}")
        self._total_uj = 0

    def _read(self, t: float) -> float:
        raw = read_counter_file(self.path)
        self._total_uj += (raw - self._last_raw) % self.max_uj
        self._last_raw = raw
        return self._total_uj / 1e6


def open_meter(config: MeterConfig) -> Meter:
    cls = {CONSTANT_POWER: ConstantPowerMeter, TRACE_REPLAY: TraceReplayMeter, COUNTER_FILE: CounterFileMeter}
    return cls[config.kind](config)


@dataclass
class EnergyLedger:
    meter_kind: str
    samples: list[EnergySample] = field(default_factory=list)
    closed: bool = False

    def append(self, sample: EnergySample) -> None:
        if self.closed:
            raise EnergyError("ledger is closed")
        if self.samples:
            last = self.samples[-1]
            if sample.t_monotonic_s < last.t_monotonic_s or sample.cumulative_joules < last.cumulative_joules:
                raise EnergyError("ledger samples must be nondecreasing in time and energy")
        self.samples.append(sample)

    def close(self) -> None:
        self.closed = True

    @property
    def total_joules(self) -> float:
        return self.samples[-1].cumulative_joules if self.samples else 0.0

    def to_dict(self) -> dict:
        return {
            "meter_kind": self.meter_kind,
            "closed": self.closed,
            "samples": [[s.t_monotonic_s, s.cumulative_joules] for s in self.samples],
        }

    @classmethod
    def from_dict(cls, data: dict) -> EnergyLedger:
        ledger = cls(data["meter_kind"])
        for t, j in data["samples"]:
            ledger.append(EnergySample(float(t), float(j)))
        ledger.closed = bool(data.get("closed", False))
        return ledger


@dataclass(frozen=True)
class EnergyTotal:
    kwh: float
    grams_co2: int
    wall_time_s: float


def ledger_total(ledger: EnergyLedger, co2_coefficient: float = DEFAULT_CO2_G_PER_KWH) -> EnergyTotal:
    if not ledger.samples:
        raise EnergyError("empty ledger")
    if not ledger.closed:
        raise EnergyError("ledger must be closed before totalling")
    kwh = ledger.total_joules / JOULES_PER_KWH
    return EnergyTotal(kwh, grams_co2(kwh, co2_coefficient), ledger.samples[-1].t_monotonic_s)


class Sampler:
    """Samples a meter into a ledger every ``period_s`` on a background thread.

    Use as a context manager around the work being metered. The ledger gets
    a sample at entry (t=0) and a final one at exit, then is closed.
    """

    def __init__(
        self,
        meter: Meter,
        period_s: float | None = None,
        clock: Callable[[], float] = time.monotonic,
    ) -> None:
        self.meter = meter
        self.period_s = period_s if period_s is not None else meter.config.sample_period_s
        self.clock = clock
        self.ledger = EnergyLedger(meter.kind)
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._t0 = 0.0
        self.error: BaseException | None = None

    def sample(self) -> None:
        with self._lock:
            t = max(0.0, self.clock() - self._t0)
            if self.ledger.samples:
                t = max(t, self.ledger.samples[-1].t_monotonic_s)
            self.ledger.append(EnergySample(t, self.meter.read_cumulative_joules(t)))

    def _run(self) -> None:
        while not self._stop.wait(self.period_s):
            try:
                self.sample()
            except BaseException as exc:  # surfaced by __exit__
                self.error = exc
                return

    def __enter__(self) -> Sampler:
        self._t0 = self.clock()
        self.sample()
        self._thread = threading.Thread(target=self._run, name="energy-sampler", daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc_info) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        self.sample()
        self.ledger.close()
        if self.error is not None and exc_info[0] is None:
            raise EnergyError(f"energy sampling failed: {self.error}") from self.error
