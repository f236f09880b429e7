"""Continuous-time recurrent units and the three-layer MTRNN stack.

A unit integrates its drive with leak coefficient ``dt / tau``::

    z_t = (1 - dt/tau) * z_{t-1} + (dt/tau) * (W x + V y_{t-1} + b)
    y_t = tanh(z_t)

Adaptive timescales are parameterised as ``tau = 1 + exp(U + tau0)`` where
``U`` is learnable and ``tau0`` is a fixed per-unit offset. A layer flagged
``baseline`` bypasses that form and uses ``tau = 1`` exactly (the simple
recurrent network limit).

Layers are stacked IO -> Cf -> Cs with adjacent-only, bidirectional
connections that read the previous timestep's activations, so every layer
of a timestep can be updated from the same snapshot.

The batched unroll (``run_batch``) and its reverse pass (``backprop_batch``)
work on ``(batch, units)`` arrays. Rows whose sequence already ended are
frozen by a mask, which lets sequences of unequal length share a batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numeric import Rng, softmax

ROLES = ("IO", "Cf", "Cs")
TAU_EPSILON = 0.01
FEEDBACK_MODES = ("external", "self", "self-argmax", "teacher")


def as_float_array(x) -> np.ndarray:
    """Array view of ``x``; keeps floating dtypes (e.g. longdouble), else float64."""
    a = np.asarray(x)
    return a if np.issubdtype(a.dtype, np.floating) else a.astype(np.float64)


@dataclass
class TimescaleParams:
    tau0: np.ndarray
    U: np.ndarray
    adaptive: bool = False
    baseline: bool = False  # tau == 1 exactly; U frozen

    def __post_init__(self):
        self.tau0 = as_float_array(self.tau0)
        self.U = as_float_array(self.U)
        if self.tau0.shape != self.U.shape:
            raise ValueError("tau0 and U must have the same length")

    def copy(self) -> "TimescaleParams":
        return TimescaleParams(self.tau0.copy(), self.U.copy(), self.adaptive, self.baseline)

    @property
    def learnable(self) -> bool:
        return self.adaptive and not self.baseline


def effective_timescale(p: TimescaleParams) -> np.ndarray:
    """``1 + exp(U + tau0)`` per unit (exactly 1 for baseline layers).

    Once ``exp`` drops below machine epsilon the sum would round to 1, so
    the result is held at the next representable value above 1.
    """
    if p.baseline:
        return np.ones_like(p.tau0)
    tau = 1.0 + np.exp(p.U + p.tau0)
    one = np.ones((), dtype=tau.dtype)
    return np.maximum(tau, np.nextafter(one, 2 * one))


@dataclass(frozen=True)
class LayerSpec:
    role: str
    units: int
    csc_units: int = 0
    tau_init: str = "fixed"  # fixed | random-linear | random-log | baseline
    tau_target: Optional[float] = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown layer role {self.role!r}")
        if self.units < 0 or self.csc_units < 0:
            raise ValueError("unit counts must be non-negative")
        if self.csc_units > self.units:
            raise ValueError("csc_units exceeds units")
        if self.csc_units and self.role != "Cs":
            raise ValueError("only the Cs layer may hold Csc units")
        if self.tau_init not in ("fixed", "random-linear", "random-log", "baseline"):
            raise ValueError(f"unknown timescale scheme {self.tau_init!r}")

    def to_dict(self) -> dict:
        return {
            "role": self.role,
            "units": self.units,
            "csc_units": self.csc_units,
            "tau_init": self.tau_init,
            "tau_target": self.tau_target,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["role"], int(d["units"]), int(d.get("csc_units", 0)), d.get("tau_init", "fixed"), d.get("tau_target"))


def validate_specs(specs) -> None:
    roles = tuple(s.role for s in specs)
    if roles != ROLES:
        raise ValueError(f"layers must be ordered {ROLES}, got {roles}")
    if specs[0].units < 1:
        raise ValueError("IO layer needs at least one unit")


def init_timescales(spec: LayerSpec, max_seq_len: int, rng: Rng, adaptive: bool = True) -> TimescaleParams:
    """Initial timescale parameters for one layer.

    Schemes: ``fixed`` inverts ``spec.tau_target`` through the exponential
    form; ``random-linear`` draws tau uniformly in [1+eps, max_seq_len];
    ``random-log`` draws log(tau) uniformly in [log(1+eps), log(max_seq_len)];
    ``baseline`` pins tau to exactly 1 with frozen offsets.
    """
    if max_seq_len < 2:
        raise ValueError("max_seq_len must be >= 2")
    n = spec.units
    if spec.tau_init == "baseline":
        return TimescaleParams(np.zeros(n), np.zeros(n), adaptive=False, baseline=True)
    if spec.tau_init == "fixed":
        if spec.tau_target is None:
            raise ValueError(f"fixed scheme needs tau_target for layer {spec.role}")
        tau = np.full(n, float(spec.tau_target))
    elif spec.tau_init == "random-linear":
        tau = rng.uniform(1.0 + TAU_EPSILON, float(max_seq_len), n)
    else:
        tau = np.exp(rng.uniform(np.log(1.0 + TAU_EPSILON), np.log(float(max_seq_len)), n))
    if np.any(tau - 1.0 <= 0):
        raise ValueError("timescale target must exceed 1")
    tau0 = np.log(tau - 1.0)
    U = rng.uniform(-0.01, 0.01, n) if adaptive else np.zeros(n)
    return TimescaleParams(tau0, U, adaptive=adaptive)


@dataclass
class LayerState:
    z: np.ndarray
    y: np.ndarray


@dataclass(frozen=True)
class StepConfig:
    dt: float = 1.0

    def check(self, taus) -> None:
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        for tau in taus:
            if tau.size and self.dt > tau.min():
                raise ValueError(f"dt={self.dt} exceeds the smallest timescale {tau.min()}")


def ctrnn_step(state: LayerState, drive, p: TimescaleParams, cfg: StepConfig = StepConfig()) -> LayerState:
    drive = as_float_array(drive)
    if drive.shape != state.z.shape:
        raise ValueError(f"drive length {drive.shape} does not match state {state.z.shape}")
    a = cfg.dt / effective_timescale(p)
    z = (1.0 - a) * state.z + a * drive
    return LayerState(z, np.tanh(z))


@dataclass
class LayerParams:
    spec: LayerSpec
    V_self: np.ndarray
    b: np.ndarray
    tau: TimescaleParams
    W_in: Optional[np.ndarray] = None
    V_below: Optional[np.ndarray] = None
    V_above: Optional[np.ndarray] = None


@dataclass
class MtrnnParams:
    layers: list  # [LayerParams] in IO, Cf, Cs order
    W_out: Optional[np.ndarray] = None
    b_out: Optional[np.ndarray] = None
    readout: str = "none"  # none | softmax | linear

    @property
    def specs(self):
        return [lp.spec for lp in self.layers]

    @property
    def input_dim(self) -> int:
        return self.layers[0].W_in.shape[1]

    @property
    def output_dim(self) -> int:
        return 0 if self.W_out is None else self.W_out.shape[0]

    @property
    def csc_units(self) -> int:
        return self.layers[2].spec.csc_units

    def timescales(self):
        return [effective_timescale(lp.tau) for lp in self.layers]

    def arrays(self, include_frozen: bool = False) -> dict:
        """Learnable arrays by name (the dict holds references, not copies)."""
        out = {}
        for lp in self.layers:
            r = lp.spec.role
            if lp.W_in is not None:
                out[f"{r}.W_in"] = lp.W_in
            out[f"{r}.V_self"] = lp.V_self
            if lp.V_below is not None:
                out[f"{r}.V_below"] = lp.V_below
            if lp.V_above is not None:
                out[f"{r}.V_above"] = lp.V_above
            out[f"{r}.b"] = lp.b
            if lp.tau.learnable or include_frozen:
                out[f"{r}.U"] = lp.tau.U
        if self.W_out is not None:
            out["W_out"] = self.W_out
            out["b_out"] = self.b_out
        return out


def init_mtrnn(
    specs,
    input_dim: int,
    rng: Rng,
    *,
    output_dim: int = 0,
    readout: str = "none",
    adaptive: bool = True,
    max_seq_len: int = 100,
    weight_gain: float = 1.0,
) -> MtrnnParams:
    """Randomly initialised MTRNN; weights uniform in +-gain/sqrt(fan_in)."""
    specs = list(specs)
    validate_specs(specs)

    def mat(rows, cols):
        scale = weight_gain / np.sqrt(max(cols, 1))
        return rng.uniform(-scale, scale, (rows, cols))

    layers = []
    for i, s in enumerate(specs):
        n = s.units
        lp = LayerParams(
            spec=s,
            V_self=mat(n, n),
            b=np.zeros(n),
            tau=init_timescales(s, max_seq_len, rng, adaptive=adaptive),
        )
        if i == 0:
            lp.W_in = mat(n, input_dim)
        if i > 0:
            lp.V_below = mat(n, specs[i - 1].units)
        if i < 2:
            lp.V_above = mat(n, specs[i + 1].units)
        layers.append(lp)
    params = MtrnnParams(layers, readout=readout)
    if output_dim:
        params.W_out = mat(output_dim, specs[0].units)
        params.b_out = np.zeros(output_dim)
    return params


@dataclass
class Unroll:
    """Cached batched unroll; index 0 of ``z``/``y`` is the initial state."""

    z: list  # per layer (T+1, B, n)
    y: list
    d: list  # per layer (T, B, n)
    x: np.ndarray  # (T, B, in_dim)
    mask: np.ndarray  # (T, B) bool
    out: Optional[np.ndarray]  # (T, B, out) probabilities or linear readout
    feedback: str
    alphas: list

    @property
    def steps(self) -> int:
        return self.mask.shape[0]


@dataclass
class Trace:
    """Single-sequence view of an unroll, rows are timesteps 1..T."""

    z: list
    y: list
    out: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None


def _lp_drive(lp: LayerParams, x, y_self, y_below, y_above, x_proj=None):
    d = None
    if x_proj is not None:
        d = x_proj
    elif lp.W_in is not None and x is not None:
        d = x @ lp.W_in.T
    if lp.V_self.size:
        t = y_self @ lp.V_self.T
        d = t if d is None else d + t
    if lp.V_below is not None and lp.V_below.size:
        d = d + y_below @ lp.V_below.T
    if lp.V_above is not None and lp.V_above.size:
        d = d + y_above @ lp.V_above.T
    if d is None:
        d = np.zeros((y_self.shape[0], lp.spec.units), dtype=lp.b.dtype)
    return d + lp.b


def _readout(params: MtrnnParams, y_io):
    logits = y_io @ params.W_out.T + params.b_out
    if params.readout == "softmax":
        return softmax(logits)
    return logits


def run_batch(
    params: MtrnnParams,
    steps: int,
    batch: int,
    *,
    inputs: Optional[np.ndarray] = None,
    mask: Optional[np.ndarray] = None,
    z0: Optional[list] = None,
    feedback: str = "external",
    cfg: StepConfig = StepConfig(),
) -> Unroll:
    """Unroll the stack for ``steps`` steps over a batch.

    ``inputs`` is ``(steps, batch, input_dim)``. In ``external`` mode it is
    the sensory stream; in ``teacher`` mode it is the already shifted target
    sequence. In ``self`` / ``self-argmax`` mode the IO input at step t+1 is
    the readout at step t and ``inputs`` is ignored. Step 1 always sees
    ``inputs[0]`` (zeros in decoder modes).
    """
    if feedback not in FEEDBACK_MODES:
        raise ValueError(f"unknown feedback mode {feedback!r}")
    taus = params.timescales()
    cfg.check(taus)
    alphas = [cfg.dt / t for t in taus]
    in_dim = params.input_dim
    dtype = params.layers[0].b.dtype
    if feedback in ("external", "teacher"):
        if inputs is None:
            raise ValueError(f"{feedback} mode needs inputs")
        inputs = as_float_array(inputs)
        if inputs.shape != (steps, batch, in_dim):
            raise ValueError(f"inputs shape {inputs.shape} != {(steps, batch, in_dim)}")
        x = inputs.copy()
    else:
        if params.W_out is None or params.output_dim != in_dim:
            raise ValueError("self-feedback needs a readout matching the input dimension")
        x = np.zeros((steps, batch, in_dim), dtype=dtype)
    if mask is None:
        mask = np.ones((steps, batch), dtype=bool)
    sizes = [lp.spec.units for lp in params.layers]
    if z0 is None:
        z0 = [np.zeros((batch, n), dtype=dtype) for n in sizes]
    z = [np.empty((steps + 1, batch, n), dtype=dtype) for n in sizes]
    y = [np.empty((steps + 1, batch, n), dtype=dtype) for n in sizes]
    d = [np.empty((steps, batch, n), dtype=dtype) for n in sizes]
    for i, n in enumerate(sizes):
        if z0[i].shape != (batch, n):
            raise ValueError(f"initial state of layer {ROLES[i]} has shape {z0[i].shape}")
        z[i][0] = z0[i]
        y[i][0] = np.tanh(z0[i])
    out = None
    if params.W_out is not None:
        out = np.zeros((steps, batch, params.output_dim), dtype=dtype)
    full_steps = mask.all(axis=1)
    io = params.layers[0]
    # With known inputs the IO input projection is computed for all steps at once.
    x_proj = x @ io.W_in.T if feedback in ("external", "teacher") and io.W_in is not None else None
    for t in range(steps):
        for i, lp in enumerate(params.layers):
            below = y[i - 1][t] if i > 0 else None
            above = y[i + 1][t] if i < 2 else None
            if i == 0 and x_proj is not None:
                d[i][t] = _lp_drive(lp, None, y[i][t], below, above, x_proj[t])
            else:
                d[i][t] = _lp_drive(lp, x[t] if i == 0 else None, y[i][t], below, above)
        m = mask[t][:, None]
        for i in range(3):
            a = alphas[i]
            znew = (1.0 - a) * z[i][t] + a * d[i][t]
            z[i][t + 1] = znew if full_steps[t] else np.where(m, znew, z[i][t])
            y[i][t + 1] = np.tanh(z[i][t + 1])
        if out is not None:
            out[t] = _readout(params, y[0][t + 1])
            if t + 1 < steps and feedback == "self":
                x[t + 1] = out[t]
            elif t + 1 < steps and feedback == "self-argmax":
                x[t + 1] = np.eye(in_dim, dtype=dtype)[np.argmax(out[t], axis=1)]
    return Unroll(z, y, d, x, mask, out, feedback, alphas)


def backprop_batch(
    params: MtrnnParams,
    u: Unroll,
    *,
    g_out: Optional[np.ndarray] = None,
    g_y_final: Optional[list] = None,
):
    """Reverse pass through an unroll.

    Args:
        g_out: loss gradient w.r.t. the readout outputs, ``(T, B, out)``.
        g_y_final: optional per-layer gradient w.r.t. activations after the
            last step (used to inject the context gradient into encoders).

    Returns:
        ``(grads, gz0)`` where ``grads`` mirrors ``params.arrays()`` and
        ``gz0`` is the per-layer gradient w.r.t. the initial internal state.
    """
    T = u.steps
    B = u.mask.shape[1]
    layers = params.layers
    names = params.arrays()
    grads = {k: np.zeros_like(v) for k, v in names.items()}
    taus = params.timescales()
    sizes = [lp.spec.units for lp in layers]
    gz_direct = [np.zeros((B, n)) for n in sizes]
    gy = [np.zeros((B, n)) for n in sizes]
    if g_y_final is not None:
        for i in range(3):
            if g_y_final[i] is not None:
                gy[i] += g_y_final[i]
    g_out = None if g_out is None else np.array(g_out, dtype=np.float64)
    soft_fb = u.feedback == "self"
    # Per-step drive gradients are stored and contracted with the cached
    # states once after the loop; only the recurrent terms run per step.
    GD = [np.zeros((T, B, n)) for n in sizes]
    dtanh = [1.0 - yi**2 for yi in u.y]
    full_steps = u.mask.all(axis=1)
    GA = [np.zeros((T, B, n)) for n in sizes]
    GL = None
    if u.out is not None and g_out is not None:
        GL = np.zeros_like(g_out)
    for t in range(T - 1, -1, -1):
        # gradient at the readout of step t (index t+1 in state arrays)
        if GL is not None:
            go = g_out[t]
            if params.readout == "softmax":
                p = u.out[t]
                gl = p * (go - np.sum(go * p, axis=1, keepdims=True))
            else:
                gl = go
            GL[t] = gl
            gy[0] += gl @ params.W_out
        full = full_steps[t]
        m = u.mask[t][:, None]
        gz = [gz_direct[i] + gy[i] * dtanh[i][t + 1] for i in range(3)]
        new_gy = [np.zeros((B, n)) for n in sizes]
        for i, lp in enumerate(layers):
            gm = gz[i] if full else np.where(m, gz[i], 0.0)
            g = gm * u.alphas[i]
            GD[i][t] = g
            new_gy[i] += g @ lp.V_self
            if lp.V_below is not None:
                new_gy[i - 1] += g @ lp.V_below
            if lp.V_above is not None:
                new_gy[i + 1] += g @ lp.V_above
            if lp.tau.learnable:
                GA[i][t] = gm
            keep = gz[i] * (1.0 - u.alphas[i])
            gz_direct[i] = keep if full else np.where(m, keep, gz[i])
        if soft_fb and t > 0 and u.out is not None:
            gx = GD[0][t] @ layers[0].W_in
            # x[t] is out[t-1]; push the input gradient into that readout
            if g_out is None:
                g_out = np.zeros_like(u.out)
                GL = np.zeros_like(g_out)
            g_out[t - 1] = g_out[t - 1] + gx
        gy = new_gy

    def contract(a, b):
        return np.tensordot(a, b, axes=([0, 1], [0, 1]))

    if GL is not None:
        grads["W_out"] += contract(GL, u.y[0][1:])
        grads["b_out"] += GL.sum(axis=(0, 1))
    for i, lp in enumerate(layers):
        r = lp.spec.role
        g = GD[i]
        grads[f"{r}.V_self"] += contract(g, u.y[i][:-1])
        grads[f"{r}.b"] += g.sum(axis=(0, 1))
        if lp.W_in is not None:
            grads[f"{r}.W_in"] += contract(g, u.x)
        if lp.V_below is not None:
            grads[f"{r}.V_below"] += contract(g, u.y[i - 1][:-1])
        if lp.V_above is not None:
            grads[f"{r}.V_above"] += contract(g, u.y[i + 1][:-1])
        if lp.tau.learnable:
            # dz/da = d - z_prev; a = dt/tau; dtau/dU = tau - 1
            ga = np.sum(GA[i] * (u.d[i] - u.z[i][:-1]), axis=(0, 1))
            tau = taus[i]
            grads[f"{r}.U"] += ga * (-u.alphas[i] / tau) * (tau - 1.0)
    gz0 = [gz_direct[i] + gy[i] * dtanh[i][0] for i in range(3)]
    return grads, gz0


def mtrnn_forward(
    params: MtrnnParams,
    inputs=None,
    steps: Optional[int] = None,
    init_cs_z=None,
    feedback: str = "external",
    cfg: StepConfig = StepConfig(),
) -> Trace:
    """Single-sequence forward pass returning the full trace."""
    if inputs is not None:
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim != 2:
            raise ValueError("inputs must be (T, input_dim)")
        if steps is None:
            steps = inputs.shape[0]
        if inputs.shape[0] != steps:
            raise ValueError(f"inputs has {inputs.shape[0]} rows, expected {steps}")
        inputs = inputs[:, None, :]
    elif feedback in ("external", "teacher"):
        raise ValueError(f"{feedback} mode needs inputs")
    if steps is None:
        raise ValueError("steps required without inputs")
    if feedback in ("self", "self-argmax"):
        inputs = None
    z0 = [np.zeros((1, lp.spec.units)) for lp in params.layers]
    if init_cs_z is not None:
        init_cs_z = np.asarray(init_cs_z, dtype=np.float64)
        if init_cs_z.shape != (params.layers[2].spec.units,):
            raise ValueError("init_cs_z length must equal the Cs unit count")
        z0[2][0] = init_cs_z
    u = run_batch(params, steps, 1, inputs=inputs, z0=z0, feedback=feedback, cfg=cfg)
    trace = Trace(z=[zi[1:, 0, :].copy() for zi in u.z], y=[yi[1:, 0, :].copy() for yi in u.y])
    if u.out is not None:
        trace.out = u.out[:, 0, :].copy()
        trace.logits = trace.y[0] @ params.W_out.T + params.b_out
    return trace
