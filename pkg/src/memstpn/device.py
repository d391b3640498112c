"""Phenomenological model of a non-filamentary STO memristive synapse.

Conductances are handled in two unit systems: measured nanosiemens
("meas") and the dimensionless simulation scale ("sim") related by a
linear map  g_sim = (g_meas - g_min) / m_slope.  Pulse response, decay
control and per-event electrical quantities are all derived from a
:class:`DeviceCharacterization`, which can be loaded from a CSV of
measured pulses or used with the shipped synthetic defaults.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np
from scipy.optimize import curve_fit

__all__ = [
    "DeviceCharacterization",
    "SynapseState",
    "SigmoidParams",
    "PulseGrid",
    "DeviceRangeError",
    "UnreachableDecayError",
    "UnachievableUpdateError",
    "ExtrapolationError",
    "UnsupportedDepressionError",
    "map_to_sim",
    "map_to_meas",
    "lambda_of_vbias",
    "vbias_of_lambda",
    "pulse_delta_f",
    "select_pulse",
    "pulse_energy",
    "bias_power",
    "decay_step",
    "program_longterm",
    "read_current",
    "fit_sigmoid",
    "fit_energy_law",
    "load_pulse_grid_csv",
    "write_pulse_grid_csv",
    "default_characterization",
]


class DeviceRangeError(ValueError):
    """Input outside the physically supported device range."""


class UnreachableDecayError(DeviceRangeError):
    """Requested decay constant cannot be programmed with any bias voltage."""


class UnachievableUpdateError(DeviceRangeError):
    """Requested conductance update is outside the pulse-achievable range."""


class ExtrapolationError(DeviceRangeError):
    """Pulse parameters fall outside the characterized grid."""


class UnsupportedDepressionError(DeviceRangeError):
    """Long-term programming only supports potentiation."""


@dataclass(frozen=True)
class SigmoidParams:
    """Parameters of the decay-control curve lam(v) = L/(1+exp(-k(v-v0))) + lam0."""

    L: float
    k: float
    v0: float
    lam0: float

    def __call__(self, v):
        return self.L / (1.0 + np.exp(-self.k * (np.asarray(v, dtype=float) - self.v0))) + self.lam0


def _solve_sigmoid_endpoints(k: float, v0: float, v_lo: float, v_hi: float,
                             lam_lo: float, lam_hi: float) -> SigmoidParams:
    """Solve L and lam0 so the sigmoid hits (v_lo, lam_lo) and (v_hi, lam_hi)."""
    s_lo = 1.0 / (1.0 + math.exp(-k * (v_lo - v0)))
    s_hi = 1.0 / (1.0 + math.exp(-k * (v_hi - v0)))
    if abs(s_hi - s_lo) < 1e-15:
        raise ValueError("degenerate endpoint system: bias endpoints too close")
    L = (lam_hi - lam_lo) / (s_hi - s_lo)
    lam0 = lam_lo - L * s_lo
    return SigmoidParams(L=L, k=k, v0=v0, lam0=lam0)


@dataclass(frozen=True)
class PulseGrid:
    """Measured pulse response on a (voltage, width) grid.

    ``delta_f`` and ``energy`` are [n_voltages, n_widths] arrays of the
    conductance jump (nS) and pulse energy (pJ).  Interpolation between
    grid points is linear in voltage and linear in log(width); widths
    span more than an order of magnitude, so log spacing is the natural
    axis.
    """

    voltages: np.ndarray       # (nV,) V, strictly increasing
    widths: np.ndarray         # (nW,) us, strictly increasing
    delta_f: np.ndarray        # (nV, nW) nS
    energy: np.ndarray         # (nV, nW) pJ

    def __post_init__(self):
        for name in ("voltages", "widths", "delta_f", "energy"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(np.diff(self.voltages) <= 0) or np.any(np.diff(self.widths) <= 0):
            raise ValueError("pulse grid axes must be strictly increasing")
        if self.delta_f.shape != (len(self.voltages), len(self.widths)):
            raise ValueError("delta_f shape does not match grid axes")
        if self.energy.shape != self.delta_f.shape:
            raise ValueError("energy shape does not match grid axes")
        if np.any(np.diff(self.delta_f, axis=0) <= 0) or np.any(np.diff(self.delta_f, axis=1) <= 0):
            raise ValueError("delta_f must be strictly increasing in voltage and in width")

    @property
    def min_delta_f(self) -> float:
        return float(self.delta_f[0, 0])

    @property
    def max_delta_f(self) -> float:
        return float(self.delta_f[-1, -1])

    def interpolate(self, table: np.ndarray, voltage: float, width: float) -> float:
        """Bilinear interpolation of ``table`` (linear in V, linear in log width)."""
        v, w = float(voltage), float(width)
        if not (self.voltages[0] <= v <= self.voltages[-1]) or not (self.widths[0] <= w <= self.widths[-1]):
            raise ExtrapolationError(
                f"pulse ({v} V, {w} us) outside characterized grid "
                f"[{self.voltages[0]}, {self.voltages[-1]}] V x [{self.widths[0]}, {self.widths[-1]}] us")
        iv = min(np.searchsorted(self.voltages, v, side="right") - 1, len(self.voltages) - 2)
        iw = min(np.searchsorted(self.widths, w, side="right") - 1, len(self.widths) - 2)
        iv, iw = max(iv, 0), max(iw, 0)
        tv = (v - self.voltages[iv]) / (self.voltages[iv + 1] - self.voltages[iv])
        lw0, lw1 = math.log(self.widths[iw]), math.log(self.widths[iw + 1])
        tw = (math.log(w) - lw0) / (lw1 - lw0)
        f00, f01 = table[iv, iw], table[iv, iw + 1]
        f10, f11 = table[iv + 1, iw], table[iv + 1, iw + 1]
        return float((1 - tv) * ((1 - tw) * f00 + tw * f01) + tv * ((1 - tw) * f10 + tw * f11))


def _default_pulse_grid() -> PulseGrid:
    # Synthetic grid anchored at the measured points (2, 2.5, 3 V at 100 us
    # -> 3, 5, 10 nS) and the measured extremes (0.7 nS at the low corner,
    # 38.6 nS at the high corner); intermediate cells follow a separable
    # voltage x width profile.  Energies follow the measured pulse-energy
    # power law evaluated at the cell's sim-unit jump.
    voltages = np.array([2.0, 2.5, 3.0, 3.5])
    widths = np.array([20.0, 100.0, 500.0])
    f_v = np.array([3.0, 5.0, 10.0, 20.0])          # 100 us column
    g_w = np.array([0.7 / 3.0, 1.0, 38.6 / 20.0])   # width scaling, pinned at corners
    delta_f = np.outer(f_v, g_w)
    energy = 30.0 * (delta_f / 2.0) ** 1.52         # pJ, via the default energy law
    return PulseGrid(voltages=voltages, widths=widths, delta_f=delta_f, energy=energy)


@dataclass(frozen=True)
class DeviceCharacterization:
    """Calibrated constants of one memristive synapse."""

    g_min: float = 12.0            # nS, minimum device conductance
    m_slope: float = 2.0           # nS per sim unit
    w_max_meas: float = 23.0       # nS, max programmable long-term conductance
    pulse_grid: PulseGrid = field(default_factory=_default_pulse_grid)
    sigmoid: SigmoidParams | None = None
    energy_c: float = 30.0         # pJ, pulse-energy law prefactor
    energy_alpha: float = 1.52     # pulse-energy law exponent
    v_bias_range: tuple[float, float] = (-0.6, 0.6)
    lambda_range: tuple[float, float] = (0.08, 0.92)
    v_read: float = 0.6            # V
    dw_per_100_pulses: float = 2.2  # nS gained per 100-pulse SET burst

    def __post_init__(self):
        if self.sigmoid is None:
            sig = _solve_sigmoid_endpoints(
                k=6.0, v0=0.0,
                v_lo=self.v_bias_range[0], v_hi=self.v_bias_range[1],
                lam_lo=self.lambda_range[0], lam_hi=self.lambda_range[1])
            object.__setattr__(self, "sigmoid", sig)
        self.validate()

    def validate(self):
        if not self.g_min < self.w_max_meas:
            raise ValueError("g_min must be below w_max_meas")
        if self.m_slope <= 0:
            raise ValueError("m_slope must be positive")
        if self.energy_c <= 0 or self.energy_alpha <= 0:
            raise ValueError("energy law constants must be positive")
        lo, hi = self.lambda_range
        if not (0.0 <= lo < hi <= 1.0):
            raise ValueError("lambda_range must be an increasing sub-interval of [0, 1]")
        for v, lam in zip(self.v_bias_range, self.lambda_range):
            if abs(float(self.sigmoid(v)) - lam) > 1e-6:
                raise ValueError(
                    f"sigmoid({v} V) = {float(self.sigmoid(v)):.8f} does not reproduce "
                    f"the decay range endpoint {lam}")

    def with_sigmoid(self, sigmoid: SigmoidParams) -> "DeviceCharacterization":
        return replace(self, sigmoid=sigmoid)


@dataclass
class SynapseState:
    """Long- and short-term conductance components of one device (nS)."""

    w_meas: float
    f_meas: float = 0.0


def default_characterization() -> DeviceCharacterization:
    return DeviceCharacterization()


# --- unit mapping -----------------------------------------------------------

def map_to_sim(g_meas, dc: DeviceCharacterization):
    """Measured conductance (nS) -> dimensionless simulation weight."""
    return (np.asarray(g_meas, dtype=float) - dc.g_min) / dc.m_slope


def map_to_meas(g_sim, dc: DeviceCharacterization):
    """Simulation weight -> measured conductance (nS). Total map; caller
    validates physical range where it matters."""
    return np.asarray(g_sim, dtype=float) * dc.m_slope + dc.g_min


# --- decay control ----------------------------------------------------------

def lambda_of_vbias(v_bias: float, dc: DeviceCharacterization) -> float:
    """Decay constant programmed by a DC bias voltage."""
    lo, hi = dc.v_bias_range
    if not (lo <= v_bias <= hi):
        raise DeviceRangeError(f"v_bias {v_bias} V outside supported range [{lo}, {hi}] V")
    return float(dc.sigmoid(v_bias))


def vbias_of_lambda(lam: float, dc: DeviceCharacterization) -> float:
    """Bias voltage that programs decay constant ``lam`` (analytic sigmoid inverse)."""
    lo, hi = dc.lambda_range
    if not (lo <= lam <= hi):
        raise UnreachableDecayError(
            f"decay constant {lam} outside device-reachable range [{lo}, {hi}]")
    sig = dc.sigmoid
    ratio = sig.L / (lam - sig.lam0) - 1.0
    v = sig.v0 - math.log(ratio) / sig.k
    # endpoint arithmetic can land epsilon outside the bias range
    return float(min(max(v, dc.v_bias_range[0]), dc.v_bias_range[1]))


# --- pulse response ---------------------------------------------------------

def pulse_delta_f(voltage: float, width: float, dc: DeviceCharacterization) -> float:
    """Short-term conductance jump (nS) for a pulse, interpolated on the grid."""
    return dc.pulse_grid.interpolate(dc.pulse_grid.delta_f, voltage, width)


def pulse_energy_meas(voltage: float, width: float, dc: DeviceCharacterization) -> float:
    """Pulse energy (pJ) for a pulse, interpolated on the grid."""
    return dc.pulse_grid.interpolate(dc.pulse_grid.energy, voltage, width)


def select_pulse(delta_f_target_meas: float, dc: DeviceCharacterization) -> tuple[float, float]:
    """Plan the (voltage, width) pulse realizing a target |delta F| (nS).

    Candidates are the exact-voltage solutions along each characterized
    width column; among them the minimal-energy one wins, ties broken by
    smaller voltage, then smaller width.
    """
    grid = dc.pulse_grid
    target = abs(float(delta_f_target_meas))
    if target < grid.min_delta_f or target > grid.max_delta_f:
        raise UnachievableUpdateError(
            f"|delta F| = {target} nS outside achievable range "
            f"[{grid.min_delta_f}, {grid.max_delta_f}] nS")
    candidates = []
    for iw, width in enumerate(grid.widths):
        col = grid.delta_f[:, iw]
        if target < col[0] or target > col[-1]:
            continue
        # piecewise-linear inversion in voltage
        iv = int(np.searchsorted(col, target, side="right")) - 1
        iv = min(max(iv, 0), len(col) - 2)
        t = (target - col[iv]) / (col[iv + 1] - col[iv])
        voltage = float(grid.voltages[iv] + t * (grid.voltages[iv + 1] - grid.voltages[iv]))
        energy = grid.interpolate(grid.energy, voltage, width)
        candidates.append((energy, voltage, float(width)))
    if not candidates:
        raise UnachievableUpdateError(
            f"|delta F| = {target} nS not reachable along any characterized width")
    energy, voltage, width = min(candidates)
    return voltage, width


def pulse_energy(delta_f_sim, dc: DeviceCharacterization):
    """Energy (J) of the pulse realizing a sim-unit update; even in sign."""
    return dc.energy_c * 1e-12 * np.abs(np.asarray(delta_f_sim, dtype=float)) ** dc.energy_alpha


def bias_power(g_sim, v_bias, dc: DeviceCharacterization):
    """Static power draw (W) of a device held at ``v_bias`` volts."""
    g_meas_s = np.abs(map_to_meas(g_sim, dc)) * 1e-9
    return g_meas_s * np.asarray(v_bias, dtype=float) ** 2


def read_current(g_sim, v_read, dc: DeviceCharacterization):
    """Read current (A) through the device: I = G * U."""
    return map_to_meas(g_sim, dc) * 1e-9 * np.asarray(v_read, dtype=float)


def decay_step(f, lam):
    """One decay step of the short-term weight: multiply by the retention factor."""
    lam_arr = np.asarray(lam, dtype=float)
    if np.any(lam_arr < 0.0) or np.any(lam_arr > 1.0):
        raise DeviceRangeError("decay constant must lie in [0, 1]")
    return lam_arr * np.asarray(f, dtype=float)


def program_longterm(w_target_meas: float, state: SynapseState,
                     dc: DeviceCharacterization) -> tuple[SynapseState, int]:
    """Potentiate the long-term conductance toward a target level.

    Programming proceeds in 100-pulse SET bursts, each advancing the
    conductance by ``dw_per_100_pulses``; the final burst is verified
    against the target so the state lands on it exactly.  Depression is
    not supported between full re-characterizations.
    """
    if not (dc.g_min <= w_target_meas <= dc.w_max_meas):
        raise DeviceRangeError(
            f"target {w_target_meas} nS outside programmable range [{dc.g_min}, {dc.w_max_meas}] nS")
    gap = w_target_meas - state.w_meas
    if gap < 0:
        raise UnsupportedDepressionError(
            f"target {w_target_meas} nS below current level {state.w_meas} nS")
    n_bursts = math.ceil(gap / dc.dw_per_100_pulses - 1e-12)
    new_w = min(state.w_meas + n_bursts * dc.dw_per_100_pulses, w_target_meas)
    return SynapseState(w_meas=new_w, f_meas=state.f_meas), n_bursts * 100


# --- fitting ----------------------------------------------------------------

def fit_sigmoid(v_bias: np.ndarray, lam: np.ndarray,
                p0: SigmoidParams | None = None) -> tuple[SigmoidParams, float]:
    """Least-squares fit of the decay-control sigmoid; returns (params, rms residual)."""
    v = np.asarray(v_bias, dtype=float)
    y = np.asarray(lam, dtype=float)
    if len(v) < 4:
        raise ValueError("sigmoid fit needs at least 4 points")

    def model(x, L, k, v0, lam0):
        return L / (1.0 + np.exp(-k * (x - v0))) + lam0

    if p0 is None:
        span = y.max() - y.min()
        p0 = SigmoidParams(L=span if span > 0 else 1.0, k=5.0, v0=float(np.median(v)), lam0=float(y.min()))
    try:
        popt, _ = curve_fit(model, v, y, p0=[p0.L, p0.k, p0.v0, p0.lam0], maxfev=20000)
    except RuntimeError as exc:
        raise ValueError(f"sigmoid fit did not converge: {exc}") from exc
    params = SigmoidParams(*[float(p) for p in popt])
    resid = float(np.sqrt(np.mean((model(v, *popt) - y) ** 2)))
    return params, resid


def fit_energy_law(delta_f_sim: np.ndarray, energy_pj: np.ndarray) -> tuple[float, float, float]:
    """Fit E = c * |dF|^alpha by linear least squares in log-log space.

    Returns (c_pJ, alpha, rms log-residual).
    """
    x = np.abs(np.asarray(delta_f_sim, dtype=float))
    y = np.asarray(energy_pj, dtype=float)
    mask = (x > 0) & (y > 0)
    if mask.sum() < 2:
        raise ValueError("energy-law fit needs at least 2 positive points")
    lx, ly = np.log(x[mask]), np.log(y[mask])
    A = np.vstack([lx, np.ones_like(lx)]).T
    sol, *_ = np.linalg.lstsq(A, ly, rcond=None)
    alpha, log_c = float(sol[0]), float(sol[1])
    resid = float(np.sqrt(np.mean((A @ sol - ly) ** 2)))
    return math.exp(log_c), alpha, resid


# --- CSV IO -----------------------------------------------------------------

PULSE_GRID_HEADER = ["voltage_V", "width_us", "delta_f_nS", "energy_pJ"]


def load_pulse_grid_csv(path_or_file) -> PulseGrid:
    """Load a characterization CSV (header voltage_V,width_us,delta_f_nS,energy_pJ).

    Comment lines starting with '#' are skipped.  Rows must cover a full
    rectangular (voltage, width) grid.
    """
    if hasattr(path_or_file, "read"):
        text = path_or_file.read()
    else:
        with open(path_or_file, "r", encoding="utf-8") as fh:
            text = fh.read()
    rows = []
    reader = csv.reader(line for line in io.StringIO(text) if not line.lstrip().startswith("#"))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != PULSE_GRID_HEADER:
        raise ValueError(f"characterization CSV must start with header {','.join(PULSE_GRID_HEADER)}")
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            rows.append(tuple(float(c) for c in row))
        except ValueError as exc:
            raise ValueError(f"characterization CSV row {lineno}: {exc}") from exc
    voltages = np.unique([r[0] for r in rows])
    widths = np.unique([r[1] for r in rows])
    delta_f = np.full((len(voltages), len(widths)), np.nan)
    energy = np.full_like(delta_f, np.nan)
    for v, w, df, e in rows:
        iv = int(np.searchsorted(voltages, v))
        iw = int(np.searchsorted(widths, w))
        delta_f[iv, iw] = df
        energy[iv, iw] = e
    if np.any(np.isnan(delta_f)):
        raise ValueError("characterization CSV does not cover a full voltage x width grid")
    return PulseGrid(voltages=voltages, widths=widths, delta_f=delta_f, energy=energy)


def write_pulse_grid_csv(grid: PulseGrid, path, comment: str | None = None):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if comment:
            for line in comment.splitlines():
                fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(PULSE_GRID_HEADER)
        for iv, v in enumerate(grid.voltages):
            for iw, w in enumerate(grid.widths):
                writer.writerow([repr(float(v)), repr(float(w)),
                                 repr(float(grid.delta_f[iv, iw])), repr(float(grid.energy[iv, iw]))])


def default_pulse_grid_path() -> str:
    """Path of the shipped synthetic characterization CSV."""
    return str(resources.files("memstpn").joinpath("data/pulse_grid_default.csv"))
