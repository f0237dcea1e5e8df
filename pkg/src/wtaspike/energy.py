"""Theoretical energy accounting for spike-driven inference.

Linear layers are priced per token with the 45 nm constants

    ANN:  E = m * n * E_MAC
    SNN:  E = m * n * E_AC * fr * T

where ``fr`` is the firing rate of the layer input and ``T`` the number of
binary time steps (``T * D`` for NI-LIF, whose ``k / D`` values unfold into
``k`` binary spikes over ``D`` sub-steps). Attention products are priced with
the same formulas: spike-by-spike products are accumulations, anything that
touches a real operand (softmax weights, sparsemax weights, a float scale) is
a multiply-accumulate.

Layers report to whatever :class:`Recorder` is active (see :func:`instrument`);
with none active the hooks are no-ops.
"""
from __future__ import annotations

import contextlib
import csv
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import InputError

E_MAC_PJ = 4.6
E_AC_PJ = 0.9
DEFAULT_TOKENS = 512
SNN = "SNN"
ANN = "ANN"

def linear_energy_ann(m: int, n: int) -> float:
    """Picojoules for an ``m -> n`` linear layer on MAC hardware."""
    if m < 1 or n < 1:
        raise InputError(f"layer dims must be >= 1, got ({m}, {n})")
    return m * n * E_MAC_PJ


def linear_energy_snn(m: int, n: int, fr: float, T: int) -> float:
    """Picojoules for an ``m -> n`` spike-fed layer at firing rate ``fr`` over ``T`` steps."""
    if m < 1 or n < 1:
        raise InputError(f"layer dims must be >= 1, got ({m}, {n})")
    if not 0.0 <= fr <= 1.0:
        raise InputError(f"firing rate must lie in [0, 1], got {fr}")
    if T < 1:
        raise InputError(f"time steps must be >= 1, got {T}")
    return m * n * E_AC_PJ * fr * T


# ---------------------------------------------------------------------------
# counters and probes
# ---------------------------------------------------------------------------


@dataclass
class OpCounter:
    macs: int = 0
    acs: int = 0
    per_layer: dict = field(default_factory=dict)

    def _slot(self, name):
        return self.per_layer.setdefault(name, {"macs": 0, "acs": 0})

    def add_macs(self, name: str, n) -> None:
        n = int(n)
        self.macs += n
        self._slot(name)["macs"] += n

    def add_acs(self, name: str, n) -> None:
        n = int(n)
        self.acs += n
        self._slot(name)["acs"] += n


def spike_count(values: np.ndarray, domain: str) -> tuple[float, float]:
    """(events, potential events) of a tensor under unfolded-spike semantics."""
    levels = ad.domain_levels(domain)
    if domain.startswith("nint:"):
        events = float(np.rint(np.abs(values) * levels).sum())
    else:
        events = float(np.count_nonzero(values))
    return events, float(values.size * levels)


@dataclass
class FiringRateProbe:
    counts: dict = field(default_factory=dict)

    def add(self, name: str, values: np.ndarray, domain: str) -> None:
        ev, tot = spike_count(values, domain)
        slot = self.counts.setdefault(name, [0.0, 0.0])
        slot[0] += ev
        slot[1] += tot

    def rate(self, name: str) -> float:
        ev, tot = self.counts[name]
        return ev / tot if tot else 0.0

    def rates(self) -> dict:
        return {name: self.rate(name) for name in self.counts}


@dataclass
class LayerRecord:
    """One priced operation as seen during a forward pass."""

    name: str
    mode: str
    m: int
    n: int
    T: int
    domain: str
    tokens: int = 0
    events: float = 0.0
    potential: float = 0.0

    @property
    def fr(self) -> float:
        return self.events / self.potential if self.potential else 0.0


class Recorder:
    def __init__(self):
        self.counter = OpCounter()
        self.probe = FiringRateProbe()
        self.layers: dict = {}
        self.linear_inputs: dict = {}

    def _layer(self, name, mode, m, n, T, domain, tokens, events, potential):
        rec = self.layers.get(name)
        if rec is None:
            rec = self.layers[name] = LayerRecord(name, mode, m, n, T, domain)
        if mode == ANN:
            rec.mode = ANN
        rec.tokens += tokens
        rec.events += events
        rec.potential += potential
        return rec


_active: list = []


@contextlib.contextmanager
def instrument():
    """Collect op counts, firing rates and layer records for forwards run inside."""
    rec = Recorder()
    _active.append(rec)
    try:
        yield rec
    finally:
        _active.remove(rec)


def _recorder():
    return _active[-1] if _active else None


def _time_tokens(x: ad.Tensor) -> tuple[int, int]:
    """(time steps, tokens) of a ``[T, ..., features]`` tensor."""
    shape = x.shape
    return shape[0], int(np.prod(shape[1:-1], dtype=np.int64))


def record_spikes(name: str, spikes: ad.Tensor) -> None:
    rec = _recorder()
    if rec is not None:
        rec.probe.add(name, spikes.data, spikes.domain)


def record_linear(name: str, x: ad.Tensor, m: int, n: int) -> None:
    rec = _recorder()
    if rec is None:
        return
    rec.linear_inputs[name] = x.domain
    steps, tokens = _time_tokens(x)
    ev, tot = spike_count(x.data, x.domain)
    if ad.is_spike_domain(x.domain):
        rec.counter.add_acs(name, ev * n)
        rec._layer(name, SNN, m, n, steps * ad.domain_levels(x.domain), x.domain, tokens, ev, tot)
    else:
        rec.counter.add_macs(name, x.size * n)
        rec._layer(name, ANN, m, n, steps, x.domain, tokens, float(np.count_nonzero(x.data)),
                   float(x.size))


def record_product(name: str, a: ad.Tensor, b: ad.Tensor, m: int, n: int, T: int, tokens: int,
                   acs_per_event: int | None = None) -> None:
    """Price ``a @ b`` where ``a`` holds ``m`` entries per token and ``b`` the other operand."""
    rec = _recorder()
    if rec is None:
        return
    ev, tot = spike_count(a.data, a.domain)
    if ad.is_spike_domain(a.domain) and ad.is_spike_domain(b.domain):
        rec.counter.add_acs(name, ev * (n if acs_per_event is None else acs_per_event))
        rec._layer(name, SNN, m, n, T * ad.domain_levels(a.domain), a.domain, tokens, ev, tot)
    else:
        rec.counter.add_macs(name, a.size * n)
        rec._layer(name, ANN, m, n, T, a.domain, tokens, float(np.count_nonzero(a.data)),
                   float(a.size))


def record_float_op(name: str, per_token: int, T: int, tokens: int) -> None:
    """Elementwise float work (scale by s, exponentials, division) of ``per_token`` ops."""
    rec = _recorder()
    if rec is None:
        return
    rec.counter.add_macs(name, per_token * T * tokens)
    rec._layer(name, ANN, per_token, 1, T, ad.REAL, tokens, 0.0, 0.0)


def record_compare(name: str, count: int) -> None:
    """WTA comparisons are priced as accumulates and kept out of the layer table."""
    rec = _recorder()
    if rec is not None:
        rec.counter.add_acs(name, count)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnergyRow:
    layer: str
    mode: str
    m: int
    n: int
    fr: float
    T: int
    energy_pj: float


@dataclass
class EnergyReport:
    rows: list
    tokens: int
    e_mac_pj: float = E_MAC_PJ
    e_ac_pj: float = E_AC_PJ

    @property
    def total_pj(self) -> float:
        return float(sum(r.energy_pj for r in self.rows))

    @property
    def total_mj(self) -> float:
        return self.total_pj * 1e-9

    def modes(self) -> set:
        return {r.mode for r in self.rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# E_MAC={self.e_mac_pj}pJ E_AC={self.e_ac_pj}pJ tokens={self.tokens}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "mode", "m", "n", "fr", "T", "energy_pj"])
        for r in self.rows:
            w.writerow([r.layer, r.mode, r.m, r.n, repr(r.fr), r.T, repr(r.energy_pj)])
        w.writerow(["total", "", "", "", "", "", repr(self.total_pj)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


def row_energy(mode: str, m: int, n: int, fr: float, T: int) -> float:
    """Per-token picojoules of one row. ANN rows run once per time step."""
    if mode == ANN:
        return linear_energy_ann(m, n) * T
    return linear_energy_snn(m, n, fr, T)


def report_from_recorder(rec: Recorder, token_count: int = DEFAULT_TOKENS) -> EnergyReport:
    rows = []
    for r in rec.layers.values():
        fr = min(max(r.fr, 0.0), 1.0)
        e = row_energy(r.mode, r.m, r.n, fr, r.T) * token_count
        rows.append(EnergyRow(r.name, r.mode, r.m, r.n, fr, r.T, e))
    return EnergyReport(rows, token_count)


def measure_firing_rates(model, tokens) -> dict:
    """Firing rate of every spiking layer output for one forward pass."""
    with ad.no_grad(), instrument() as rec:
        model.forward(tokens)
    return rec.probe.rates()


def model_energy_report(model, tokens, token_count: int = DEFAULT_TOKENS) -> EnergyReport:
    """Inference energy per ``token_count`` tokens, firing rates measured on ``tokens``.

    The embedding lookup is a table read and costs nothing; the output head is
    spike-fed and priced as an SNN layer.
    """
    with ad.no_grad(), instrument() as rec:
        model.forward(tokens)
    return report_from_recorder(rec, token_count)


@dataclass
class AuditResult:
    passed: bool
    offending: list
    macs_by_layer: dict

    def __str__(self) -> str:
        if self.passed:
            return "mul_free=PASS"
        names = ",".join(name for name, _ in self.offending)
        return f"mul_free=FAIL ({names})"


def assert_mul_free(model, tokens) -> AuditResult:
    """Check one inference pass runs without float multiplies anywhere.

    Every counted op must be an accumulate or a comparison; any layer that
    recorded MACs (a real-valued Linear input, score scaling, softmax) fails.
    """
    with ad.no_grad(), instrument() as rec:
        model.forward(tokens)
    macs = {name: c["macs"] for name, c in rec.counter.per_layer.items()}
    offending = sorted((name, n) for name, n in macs.items() if n > 0)
    return AuditResult(not offending, offending, macs)


# ---------------------------------------------------------------------------
# spike traces
# ---------------------------------------------------------------------------

TRACE_MAGIC = b"WTATRACE"
TRACE_VERSION = 1
_TRACE_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<f4"), 3: np.dtype("<i1"), 4: np.dtype("<i8")}
_TRACE_CODES = {v: k for k, v in _TRACE_DTYPES.items()}


def write_trace(path, layers: dict) -> None:
    """Write ``{name: array}`` as a self-describing trace file.

    Layout (little-endian): magic ``WTATRACE``, u32 version, u32 layer count;
    per layer u16 name length, UTF-8 name, u8 dtype code, u8 ndim, ndim x u32
    shape, then the flattened data.
    """
    with open(path, "wb") as fh:
        fh.write(TRACE_MAGIC + struct.pack("<II", TRACE_VERSION, len(layers)))
        for name, arr in layers.items():
            arr = np.asarray(arr)
            dt = arr.dtype.newbyteorder("<")
            if dt not in _TRACE_CODES:
                arr = arr.astype("<f8")
                dt = arr.dtype
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<BB", _TRACE_CODES[dt], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_trace(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != TRACE_MAGIC:
        raise InputError(f"{path}: not a spike trace file")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != TRACE_VERSION:
        raise InputError(f"{path}: unsupported trace version {version}")
    pos = 16
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + ln].decode("utf-8")
        pos += ln
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        dt = _TRACE_DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(blob, dtype=dt, count=n, offset=pos).reshape(shape).copy()
        pos += n * dt.itemsize
    return out


@contextlib.contextmanager
def tracing():
    """Collect ``{name: array}`` of every traced tensor produced inside the block."""
    captured = {}
    _trace_sinks.append(captured)
    try:
        yield captured
    finally:
        _trace_sinks.remove(captured)


def capture_trace(model, tokens) -> dict:
    """Spike tensors of every spiking layer (and attention map) for one forward."""
    with tracing() as captured, ad.no_grad():
        model.forward(tokens)
    return captured


_trace_sinks: list = []


def trace_tensor(name: str, t: ad.Tensor) -> None:
    for sink in _trace_sinks:
        sink[name] = t.data.copy()
