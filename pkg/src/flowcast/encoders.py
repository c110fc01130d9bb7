"""Causal encoders: observed trajectory + features -> conditioning embedding.

Two interchangeable variants produce the embedding that conditions the
flow: a gated recurrent unit folded over the discrete observations, and a
controlled differential equation whose hidden state is driven by the
derivative of a cubic-spline interpolation of the same observations.
Both are deterministic functions of (parameters, observations).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import cubic_spline as cs
from . import odesolve as ode
from .autodiff import Tensor
from .errors import ContractError
from .layers import Mlp

INPUT_DIM = 7  # (x, y) position plus (vx, vy, ax, ay, heading) features


@dataclass
class GruParams:
    """Gate weights, input-side and hidden-side, plus biases."""

    w_ir: Tensor
    w_iz: Tensor
    w_in: Tensor
    w_hr: Tensor
    w_hz: Tensor
    w_hn: Tensor
    b_ir: Tensor
    b_iz: Tensor
    b_in: Tensor
    b_hr: Tensor
    b_hz: Tensor
    b_hn: Tensor
    hidden_dim: int

    @staticmethod
    def init(hidden_dim: int, rng: np.random.Generator,
             input_dim: int = INPUT_DIM) -> "GruParams":
        def w_i():
            return ad.uniform_init((input_dim, hidden_dim), input_dim, rng)

        def w_h():
            return ad.uniform_init((hidden_dim, hidden_dim), hidden_dim, rng)

        def b():
            return ad.zeros_init((hidden_dim,))

        return GruParams(w_ir=w_i(), w_iz=w_i(), w_in=w_i(),
                         w_hr=w_h(), w_hz=w_h(), w_hn=w_h(),
                         b_ir=b(), b_iz=b(), b_in=b(), b_hr=b(), b_hz=b(), b_hn=b(),
                         hidden_dim=hidden_dim)

    def parameters(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in
                ("w_ir", "w_iz", "w_in", "w_hr", "w_hz", "w_hn",
                 "b_ir", "b_iz", "b_in", "b_hr", "b_hz", "b_hn")}


def gru_step(p: GruParams, h_prev: Tensor, x_t: Tensor) -> Tensor:
    """One recurrence step: reset/update gates, candidate state, convex blend."""
    if x_t.shape[1] != p.w_ir.shape[0] or h_prev.shape[1] != p.hidden_dim:
        raise ContractError(
            f"gru_step dims disagree: x {x_t.shape}, h {h_prev.shape}, "
            f"expected input {p.w_ir.shape[0]}, hidden {p.hidden_dim}")
    r = ad.sigmoid(ad.matmul(x_t, p.w_ir) + p.b_ir + ad.matmul(h_prev, p.w_hr) + p.b_hr)
    z = ad.sigmoid(ad.matmul(x_t, p.w_iz) + p.b_iz + ad.matmul(h_prev, p.w_hz) + p.b_hz)
    cand = ad.tanh(ad.matmul(x_t, p.w_in) + p.b_in
                   + r * (ad.matmul(h_prev, p.w_hn) + p.b_hn))
    return (1.0 - z) * cand + z * h_prev


def _stack_inputs(observed: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Concatenate positions and features into (batch, steps, 7)."""
    obs = np.asarray(observed, dtype=np.float64)
    feat = np.asarray(features, dtype=np.float64)
    if obs.ndim == 2:
        obs = obs[None]
        feat = feat[None]
    if obs.shape[:2] != feat.shape[:2]:
        raise ContractError(
            f"observed {obs.shape} and features {feat.shape} lengths disagree")
    if obs.shape[1] < 1:
        raise ContractError("encoder needs at least one observation")
    return np.concatenate([obs, feat], axis=2)


def gru_encode(p: GruParams, observed, features) -> Tensor:
    """Fold the recurrence over (o_t, f_t) inputs from a zero initial state."""
    x = _stack_inputs(observed, features)
    batch, steps, _ = x.shape
    h = Tensor(np.zeros((batch, p.hidden_dim)))
    for t in range(steps):
        h = gru_step(p, h, Tensor(x[:, t, :]))
    return h


@dataclass
class CdeParams:
    """Embedding matrix for the initial state plus the control-response net.

    ``response`` maps the hidden state (dim w) to a (w x v) matrix, stored
    row-major as w*v outputs, that multiplies the control-path derivative.
    """

    w_embed: Tensor       # (input_dim, hidden_dim)
    response: Mlp         # hidden_dim -> hidden_dim * input_dim
    hidden_dim: int
    input_dim: int = INPUT_DIM

    @staticmethod
    def init(hidden_dim: int, rng: np.random.Generator, width: int = 128,
             input_dim: int = INPUT_DIM) -> "CdeParams":
        response = Mlp.init([hidden_dim, width, width, hidden_dim * input_dim],
                            rng, final_tanh=True)
        return CdeParams(
            w_embed=ad.uniform_init((input_dim, hidden_dim), input_dim, rng),
            response=response, hidden_dim=hidden_dim, input_dim=input_dim)

    def parameters(self) -> dict[str, Tensor]:
        out = {"w_embed": self.w_embed}
        for i, layer in enumerate(self.response.layers):
            out[f"response.{i}.w"] = layer.w
            out[f"response.{i}.b"] = layer.b
        return out


def fit_control_paths(observed, features) -> cs.StackedSplines:
    """Natural cubic splines through (O, F) channels on the knot grid 0..T."""
    x = _stack_inputs(observed, features)
    if x.shape[1] < 2:
        raise ContractError("control path needs at least two observations")
    return cs.fit_batch(x, np.arange(float(x.shape[1])))


def cde_field(p: CdeParams, paths: cs.StackedSplines) -> ode.VectorField:
    """Vector field dh/dt = response(h) . dC/dt over the given control paths."""
    v = p.input_dim

    def field(h: Tensor, t: float, _cond) -> Tensor:
        m = p.response(h)                                 # (batch, w*v)
        dc = Tensor(np.tile(paths.derivatives_at(t), (1, p.hidden_dim)))
        return ad.sum_col_groups(m * dc, v)               # rows of (w x v) . dC

    return field


def cde_initial_state(p: CdeParams, paths: cs.StackedSplines) -> Tensor:
    """Initial hidden state: the first observation through the embedding matrix."""
    x0 = paths.values_at(paths.knot_times[0])
    return ad.matmul(Tensor(x0), p.w_embed)


def cde_encode(p: CdeParams, paths: cs.StackedSplines,
               cfg: ode.SolverConfig | None = None) -> Tensor:
    """Integrate dh/dt = response(h) . dC/dt from the first knot to the last."""
    cfg = cfg or ode.SolverConfig()
    h1, _ = ode.integrate(cde_field(p, paths), cde_initial_state(p, paths),
                          float(paths.knot_times[0]), float(paths.knot_times[-1]), cfg)
    return h1
