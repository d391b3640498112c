"""Recurrent layer with plastic synapses: long-term weight W, Hebbian gain
Gamma, decay constant Lambda, and a time-varying short-term weight F.

Per step, the effective weight is G = W + F, the unit output is
h = tanh(G x_eff) with the input normalized per output neuron, and the
short-term weight updates as  F' = Gamma * (x_eff outer h) + Lambda * F.
Device non-idealities (update quantization and clipping, bounded decay
constants) can be switched on to mirror memristive hardware.

Gradients through the unrolled dynamics are computed by a hand-written
reverse pass (``backward_through_time``); quantization uses a
straight-through estimator (identity inside the clip range).
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, asdict

import numpy as np

__all__ = [
    "LayerConfig",
    "StpnParams",
    "StpnState",
    "StpnGradients",
    "StepCache",
    "project_lambda",
    "project_lambda_grad",
    "quantize_delta_f",
    "requantize_toward_zero",
    "normalize_input",
    "init_params",
    "forward_step",
    "forward_sequence",
    "backward_through_time",
    "legacy_forward_step",
    "legacy_effective_decay",
    "save_params",
    "load_params",
]

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerConfig:
    n_in: int
    n_out: int
    recurrent: bool = False
    device_mode: bool = False
    normalization: str = "input"      # "input" | "legacy" | "none"
    norm_kind: str = "row"            # "row" | "frobenius"
    lambda_range: tuple[float, float] = (0.08, 0.92)
    delta_f_clip: float = 20.0
    delta_f_step: float = 0.5
    requantize_decay: bool = False    # also snap F back to the step grid after decay
    norm_eps: float = 1e-8

    def __post_init__(self):
        if self.normalization not in ("input", "legacy", "none"):
            raise ValueError(f"unknown normalization mode {self.normalization!r}")
        if self.norm_kind not in ("row", "frobenius"):
            raise ValueError(f"unknown norm kind {self.norm_kind!r}")
        if self.delta_f_step <= 0:
            raise ValueError("delta_f_step must be positive")
        ratio = self.delta_f_clip / self.delta_f_step
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("delta_f_clip must be a multiple of delta_f_step")
        lo, hi = self.lambda_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError("lambda_range must satisfy 0 <= lo <= hi <= 1")

    @property
    def n_external(self) -> int:
        """Width of the non-recurrent part of the input."""
        return self.n_in - self.n_out if self.recurrent else self.n_in


@dataclass
class StpnParams:
    """Learned matrices, all [n_out, n_in]. ``lambda_raw`` is the
    unconstrained parameter; the decay constant used by the dynamics is
    its smooth projection into the configured range."""

    w: np.ndarray
    gamma: np.ndarray
    lambda_raw: np.ndarray

    def lam(self, cfg: LayerConfig) -> np.ndarray:
        return project_lambda(self.lambda_raw, cfg.lambda_range)

    def copy(self) -> "StpnParams":
        return StpnParams(self.w.copy(), self.gamma.copy(), self.lambda_raw.copy())


@dataclass
class StpnState:
    """Short-term weight matrix [n_out, n_out + n_external]."""

    f: np.ndarray

    def copy(self) -> "StpnState":
        return StpnState(self.f.copy())


@dataclass
class StpnGradients:
    w: np.ndarray
    gamma: np.ndarray
    lambda_raw: np.ndarray


@dataclass
class StepCache:
    """Forward intermediates of one step, consumed by the reverse pass and
    by energy replay (``delta_f`` is the realized update, ``g`` the total
    weight used at this step)."""

    x: np.ndarray            # full input (external [+ previous h])
    h: np.ndarray
    f: np.ndarray            # F before the update
    g: np.ndarray            # W + F
    gx: np.ndarray           # raw matvec G @ x
    scale: np.ndarray        # per-row (or scalar) input scaling actually applied
    r: np.ndarray            # norms behind scale
    norm_active: np.ndarray  # rows where the norm branch was taken (r >= eps)
    delta_f_raw: np.ndarray
    delta_f: np.ndarray      # realized (possibly quantized) update
    carry_in: bool = True    # False if state was reset right before this step


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def project_lambda(lambda_raw: np.ndarray, lambda_range: tuple[float, float]) -> np.ndarray:
    """Squash an unconstrained parameter into the decay range.

    Smooth and strictly increasing (so ordering is preserved and gradients
    exist everywhere); the range limits are approached in the +-inf limits.
    A degenerate range like (0, 0) pins every entry, which disables the
    short-term memory entirely.
    """
    lo, hi = lambda_range
    raw = np.asarray(lambda_raw, dtype=float)
    return lo + (hi - lo) * _sigmoid(raw)


def project_lambda_grad(lambda_raw: np.ndarray, lambda_range: tuple[float, float]) -> np.ndarray:
    """d project_lambda / d lambda_raw."""
    lo, hi = lambda_range
    s = _sigmoid(np.asarray(lambda_raw, dtype=float))
    return (hi - lo) * s * (1.0 - s)


def quantize_delta_f(delta_f_raw: np.ndarray, cfg: LayerConfig) -> np.ndarray:
    """Snap updates to the device-resolvable grid: nearest multiple of the
    step (ties away from zero), then clip to +-delta_f_clip."""
    raw = np.asarray(delta_f_raw, dtype=float)
    q = np.sign(raw) * np.floor(np.abs(raw) / cfg.delta_f_step + 0.5) * cfg.delta_f_step
    return np.clip(q, -cfg.delta_f_clip, cfg.delta_f_clip)


def requantize_toward_zero(f: np.ndarray, cfg: LayerConfig) -> np.ndarray:
    """Snap a decayed F back to the grid, ties toward zero so decay never
    increases magnitude."""
    arr = np.asarray(f, dtype=float)
    q = np.sign(arr) * np.ceil(np.abs(arr) / cfg.delta_f_step - 0.5) * cfg.delta_f_step
    return q


def _input_scale(g: np.ndarray, cfg: LayerConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scaling applied to the input: 1/(norm + eps) with degenerate rows
    passed through unscaled.  Returns (scale, norms, active_mask)."""
    if cfg.norm_kind == "row":
        r = np.linalg.norm(g, axis=1)
    else:
        r = np.full(g.shape[0], np.linalg.norm(g))
    active = r >= cfg.norm_eps
    scale = np.where(active, 1.0 / (r + cfg.norm_eps), 1.0)
    return scale, r, active


def normalize_input(x: np.ndarray, w: np.ndarray, f: np.ndarray,
                    cfg: LayerConfig) -> np.ndarray:
    """Effective input seen by each output neuron, [n_out, n_in].

    Row i is the input scaled by 1/(||W+F|| + eps) with the norm taken over
    neuron i's incoming weights (or the whole matrix for Frobenius mode).
    Rows whose norm is below eps receive the input unchanged.
    """
    scale, _, _ = _input_scale(w + f, cfg)
    return scale[:, None] * np.asarray(x, dtype=float)[None, :]


def init_params(cfg: LayerConfig, rng: np.random.Generator) -> StpnParams:
    """W ~ U(+-1/sqrt(n_in)); Gamma small so training starts near a
    plasticity-free network; lambda_raw at mid-range."""
    bound = 1.0 / np.sqrt(cfg.n_in)
    w = rng.uniform(-bound, bound, size=(cfg.n_out, cfg.n_in))
    gamma = 0.001 * rng.uniform(-1.0, 1.0, size=(cfg.n_out, cfg.n_in))
    lambda_raw = np.zeros((cfg.n_out, cfg.n_in))
    return StpnParams(w=w, gamma=gamma, lambda_raw=lambda_raw)


def _check_shapes(params: StpnParams, state: StpnState, x: np.ndarray, cfg: LayerConfig):
    shape = (cfg.n_out, cfg.n_in)
    for name, arr in (("w", params.w), ("gamma", params.gamma),
                      ("lambda_raw", params.lambda_raw), ("f", state.f)):
        if arr.shape != shape:
            raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
    if x.shape != (cfg.n_in,):
        raise ValueError(f"input has shape {x.shape}, expected ({cfg.n_in},)")


def forward_step(params: StpnParams, state: StpnState, x: np.ndarray,
                 cfg: LayerConfig, carry_in: bool = True) -> tuple[np.ndarray, StpnState, StepCache]:
    """One step of the plastic dynamics.

    ``x`` is the full input (caller concatenates the previous output in
    recurrent mode; see forward_sequence).  Returns the unit outputs, the
    updated state, and a cache holding the realized update matrix.
    """
    x = np.asarray(x, dtype=float)
    _check_shapes(params, state, x, cfg)
    f = state.f
    g = params.w + f
    if cfg.normalization == "none":
        scale = np.ones(cfg.n_out)
        r = np.zeros(cfg.n_out)
        active = np.zeros(cfg.n_out, dtype=bool)
    else:
        scale, r, active = _input_scale(g, cfg)
    gx = g @ x
    h = np.tanh(scale * gx)
    delta_f_raw = params.gamma * np.outer(h * scale, x)
    delta_f = quantize_delta_f(delta_f_raw, cfg) if cfg.device_mode else delta_f_raw
    f_next = delta_f + params.lam(cfg) * f
    if cfg.device_mode and cfg.requantize_decay:
        f_next = requantize_toward_zero(f_next, cfg)
    cache = StepCache(x=x, h=h, f=f, g=g, gx=gx, scale=scale, r=r,
                      norm_active=active, delta_f_raw=delta_f_raw,
                      delta_f=delta_f, carry_in=carry_in)
    return h, StpnState(f=f_next), cache


def forward_sequence(params: StpnParams, f0: StpnState, inputs: np.ndarray,
                     cfg: LayerConfig, h0: np.ndarray | None = None
                     ) -> tuple[np.ndarray, StpnState, list[StepCache]]:
    """Fold of forward_step over a sequence of external inputs [T, n_external].

    In recurrent mode each step consumes concat(external, previous h) with
    h(-1) = h0 (zeros by default).  Returns outputs [T, n_out], the final
    state, and the per-step caches (the trace for BPTT and energy replay).
    """
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 2 or inputs.shape[1] != cfg.n_external:
        raise ValueError(f"inputs must be [T, {cfg.n_external}], got {inputs.shape}")
    state = f0
    h_prev = np.zeros(cfg.n_out) if h0 is None else np.asarray(h0, dtype=float)
    outputs = np.zeros((len(inputs), cfg.n_out))
    caches: list[StepCache] = []
    for t, e in enumerate(inputs):
        x = np.concatenate([e, h_prev]) if cfg.recurrent else e
        h, state, cache = forward_step(params, state, x, cfg)
        outputs[t] = h
        caches.append(cache)
        h_prev = h
    return outputs, state, caches


def _step_backward(params: StpnParams, cache: StepCache, cfg: LayerConfig,
                   d_h: np.ndarray, d_f_next: np.ndarray, lam: np.ndarray,
                   grads: StpnGradients, d_lam: np.ndarray):
    """Reverse one forward_step.  Returns (d_x, d_f) w.r.t. the step's
    inputs; accumulates parameter gradients in place."""
    # F' = dF + lam * F
    d_delta_f = d_f_next
    d_lam += d_f_next * cache.f
    d_f_decay = d_f_next * lam
    if cfg.device_mode:
        # straight-through: identity inside the clip range, zero outside
        inside = np.abs(cache.delta_f_raw) <= cfg.delta_f_clip
        d_delta_f_raw = d_delta_f * inside
    else:
        d_delta_f_raw = d_delta_f
    # dF_raw = gamma * outer(h * s, x)
    hs = cache.h * cache.scale
    grads.gamma += d_delta_f_raw * np.outer(hs, cache.x)
    dg_gamma = d_delta_f_raw * params.gamma
    d_hs = dg_gamma @ cache.x
    d_x = dg_gamma.T @ hs
    d_h_total = d_h + d_hs * cache.scale
    d_scale = d_hs * cache.h
    # h = tanh(s * (G @ x))
    d_pre = d_h_total * (1.0 - cache.h ** 2)
    d_gx = d_pre * cache.scale
    d_scale += d_pre * cache.gx
    d_g = np.outer(d_gx, cache.x)
    d_x += cache.g.T @ d_gx
    # scale = 1/(r + eps) on active rows, else constant 1
    if cfg.normalization != "none":
        d_r = np.where(cache.norm_active, -d_scale * cache.scale ** 2, 0.0)
        if cfg.norm_kind == "row":
            safe_r = np.where(cache.norm_active, cache.r, 1.0)
            d_g += (d_r / safe_r)[:, None] * cache.g
        else:
            r0 = cache.r[0]
            if cache.norm_active[0] and r0 > 0:
                d_g += (d_r.sum() / r0) * cache.g
    # G = W + F
    grads.w += d_g
    d_f = d_g + d_f_decay
    return d_x, d_f


def backward_through_time(params: StpnParams, caches: list[StepCache],
                          d_outputs: np.ndarray, cfg: LayerConfig,
                          d_f_final: np.ndarray | None = None
                          ) -> tuple[StpnGradients, np.ndarray]:
    """Exact reverse-mode gradients of the unrolled dynamics.

    ``d_outputs`` [T, n_out] are loss gradients at each step's output.
    Returns parameter gradients (lambda gradient expressed w.r.t. the raw
    parameter, through the projection) and gradients w.r.t. the external
    inputs [T, n_external].  Steps whose cache has carry_in=False cut the
    state chain (their F and previous h arrived from a reset, not from the
    prior step).
    """
    if cfg.normalization == "legacy":
        raise NotImplementedError("gradients are implemented for the input-normalized variant only")
    d_outputs = np.asarray(d_outputs, dtype=float)
    if len(caches) != len(d_outputs):
        raise ValueError(f"{len(caches)} cached steps but {len(d_outputs)} output gradients")
    shape = (cfg.n_out, cfg.n_in)
    grads = StpnGradients(w=np.zeros(shape), gamma=np.zeros(shape), lambda_raw=np.zeros(shape))
    d_lam = np.zeros(shape)
    lam = params.lam(cfg)
    n_ext = cfg.n_external
    d_f = np.zeros(shape) if d_f_final is None else np.asarray(d_f_final, dtype=float)
    d_h_rec = np.zeros(cfg.n_out)
    d_inputs = np.zeros((len(caches), n_ext))
    for t in range(len(caches) - 1, -1, -1):
        cache = caches[t]
        d_h = d_outputs[t] + d_h_rec
        d_x, d_f = _step_backward(params, cache, cfg, d_h, d_f, lam, grads, d_lam)
        if cfg.recurrent:
            d_inputs[t] = d_x[:n_ext]
            d_h_rec = d_x[n_ext:]
        else:
            d_inputs[t] = d_x
            d_h_rec = np.zeros(cfg.n_out)
        if not cache.carry_in:
            d_f = np.zeros(shape)
            d_h_rec = np.zeros(cfg.n_out)
    grads.lambda_raw = d_lam * project_lambda_grad(params.lambda_raw, cfg.lambda_range)
    return grads, d_inputs


# --- original (ablation) variant --------------------------------------------

def legacy_effective_decay(params: StpnParams, state: StpnState, cfg: LayerConfig) -> np.ndarray:
    """Decay factor actually applied by the legacy scheme: Lambda / ||W+F||.

    Unlike the input-only scheme this is state dependent and unbounded; it
    exceeds 1 whenever the weight norm drops below Lambda.
    """
    scale, _, _ = _input_scale(params.w + state.f, cfg)
    return params.lam(cfg) * scale[:, None]


def legacy_forward_step(params: StpnParams, state: StpnState, x: np.ndarray,
                        cfg: LayerConfig) -> tuple[np.ndarray, StpnState, StepCache]:
    """One step of the original scheme, kept for ablation: both the input
    and the plastic weight are normalized by ||W+F||, so the decay applied
    to F becomes Lambda/||W+F|| and is not confined to the device range.
    """
    x = np.asarray(x, dtype=float)
    _check_shapes(params, state, x, cfg)
    f = state.f
    g_raw = params.w + f
    scale, r, active = _input_scale(g_raw, cfg)
    f_eff = f * scale[:, None]
    g_eff = params.w + f_eff
    gx = g_eff @ x
    h = np.tanh(scale * gx)
    delta_f_raw = params.gamma * np.outer(h * scale, x)
    delta_f = quantize_delta_f(delta_f_raw, cfg) if cfg.device_mode else delta_f_raw
    lam_eff = params.lam(cfg) * scale[:, None]
    f_next = delta_f + lam_eff * f
    cache = StepCache(x=x, h=h, f=f, g=g_eff, gx=gx, scale=scale, r=r,
                      norm_active=active, delta_f_raw=delta_f_raw, delta_f=delta_f)
    return h, StpnState(f=f_next), cache


# --- checkpoints -------------------------------------------------------------

def _config_to_json(cfg: LayerConfig) -> str:
    d = asdict(cfg)
    d["lambda_range"] = list(d["lambda_range"])
    return json.dumps(d, sort_keys=True)


def _config_from_json(blob: str) -> LayerConfig:
    d = json.loads(blob)
    d["lambda_range"] = tuple(d["lambda_range"])
    return LayerConfig(**d)


def save_params(path, params: StpnParams, cfg: LayerConfig, state: StpnState | None = None):
    """Versioned layer checkpoint; arrays round-trip bit exactly."""
    arrays = dict(w=params.w, gamma=params.gamma, lambda_raw=params.lambda_raw)
    if state is not None:
        arrays["f"] = state.f
    np.savez(path,
             checkpoint_version=np.int64(CHECKPOINT_VERSION),
             config_json=np.bytes_(_config_to_json(cfg).encode()),
             **arrays)


def load_params(path) -> tuple[StpnParams, LayerConfig, StpnState | None]:
    with np.load(path) as z:
        version = int(z["checkpoint_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        cfg = _config_from_json(bytes(z["config_json"]).decode())
        params = StpnParams(w=z["w"], gamma=z["gamma"], lambda_raw=z["lambda_raw"])
        state = StpnState(f=z["f"]) if "f" in z.files else None
    return params, cfg, state
