"""Invertible conditional density transforms.

Two flow families map targets to a standard-normal latent while tracking
the log-determinant of the transformation:

* a discrete stack of affine coupling layers interleaved with
  moving-average batch norms, and
* a continuous flow whose vector field is a stack of gated
  feature-modulation layers, integrated with the log-density evolved by
  minus the Jacobian trace along the same adaptive trajectory.

The continuous field exposes Jacobian-column propagation (directional
derivatives pushed through each layer alongside the values), so both the
exact trace and its Rademacher-probe estimate are ordinary first-order
graph expressions: no second-order differentiation is ever needed to
train through the trace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import odesolve as ode
from .autodiff import Tensor
from .errors import ContractError, DegeneracyError
from .layers import Mlp

LOG_TWO_PI = math.log(2.0 * math.pi)


def gaussian_log_density(z: Tensor) -> Tensor:
    """log N(z; 0, I) per row, shape (batch, 1)."""
    dim = z.shape[1]
    return -0.5 * z.square().sum_cols() + (-0.5 * dim * LOG_TWO_PI)


def _as_rows(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.data.ndim == 1:
        t = Tensor._result(t.data.reshape(1, -1), (t,),
                           lambda g, _t=t: _t._accumulate(g.reshape(-1)))
    return t


def _cond_input(x_pass: Tensor, zeta: Tensor, s_enc: Tensor | None) -> Tensor:
    parts = [x_pass, zeta]
    if s_enc is not None:
        parts.append(s_enc)
    return ad.concat_cols(parts)


# -- affine coupling -------------------------------------------------------------


@dataclass
class CouplingLayer:
    """One affine coupling: half the coordinates pass through and condition
    an elementwise scale/shift of the other half.

    ``swap`` flips which half passes through so a stack of alternating
    layers transforms every coordinate.
    """

    d: int
    s_net: Mlp
    t_net: Mlp
    swap: bool = False

    @staticmethod
    def init(dim: int, cond_dim: int, rng: np.random.Generator, swap: bool = False,
             hidden: tuple[int, ...] = (64,)) -> "CouplingLayer":
        if dim < 2:
            raise ContractError("coupling needs dimension >= 2")
        d = dim // 2
        sizes = [d + cond_dim, *hidden, dim - d]
        return CouplingLayer(d=d,
                             s_net=Mlp.init(sizes, rng, zero_final=True),
                             t_net=Mlp.init(sizes, rng, zero_final=True),
                             swap=swap)

    def _split(self, x: Tensor, dim: int) -> tuple[Tensor, Tensor]:
        a, b = ad.split_cols(x, [self.d, dim - self.d])
        return (b, a) if self.swap else (a, b)

    def _join(self, passed: Tensor, transformed: Tensor) -> Tensor:
        if self.swap:
            return ad.concat_cols([transformed, passed])
        return ad.concat_cols([passed, transformed])

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for net_name, net in (("s", self.s_net), ("t", self.t_net)):
            for i, layer in enumerate(net.layers):
                out[f"{net_name}.{i}.w"] = layer.w
                out[f"{net_name}.{i}.b"] = layer.b
        return out


def coupling_forward(layer: CouplingLayer, x: Tensor, zeta: Tensor,
                     s_enc: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Returns (y, logdet) with logdet the per-row sum of scale outputs."""
    x = _as_rows(x)
    dim = x.shape[1]
    x_pass, x_rest = layer._split(x, dim)
    cond = _cond_input(x_pass, zeta, s_enc)
    s_out = layer.s_net(cond)
    t_out = layer.t_net(cond)
    y_rest = x_rest * ad.exp(s_out) + t_out
    return layer._join(x_pass, y_rest), s_out.sum_cols()


def coupling_inverse(layer: CouplingLayer, y: Tensor, zeta: Tensor,
                     s_enc: Tensor | None = None) -> Tensor:
    """Exact algebraic inverse of :func:`coupling_forward`."""
    y = _as_rows(y)
    dim = y.shape[1]
    y_pass, y_rest = layer._split(y, dim)
    cond = _cond_input(y_pass, zeta, s_enc)
    s_out = layer.s_net(cond)
    t_out = layer.t_net(cond)
    x_rest = (y_rest - t_out) * ad.exp(-s_out)
    return layer._join(y_pass, x_rest)


# -- moving-average batch norm ----------------------------------------------------


@dataclass
class MovingAvgBatchNorm:
    """Invertible per-dimension normalization with running statistics.

    The running mean/std are buffers updated by exponential moving average
    during training-mode forward passes and treated as constants by the
    differentiation graph; the trainable scale and shift carry gradients.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_std: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @staticmethod
    def init(dim: int, momentum: float = 0.1, eps: float = 1e-5) -> "MovingAvgBatchNorm":
        return MovingAvgBatchNorm(gamma=Tensor.param(np.ones(dim)),
                                  beta=Tensor.param(np.zeros(dim)),
                                  running_mean=np.zeros(dim),
                                  running_std=np.ones(dim),
                                  momentum=momentum, eps=eps)

    def parameters(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def _check(self) -> None:
        if np.any(np.abs(self.gamma.data) < self.eps):
            raise DegeneracyError("batch-norm scale collapsed below epsilon")
        if np.any(self.running_std < self.eps):
            raise DegeneracyError("batch-norm running std collapsed below epsilon")

    def _logdet(self) -> Tensor:
        # sum_i log|gamma_i| - log(sigma_i); |gamma| via sqrt(gamma^2)
        log_abs_gamma = 0.5 * ad.log(self.gamma.square())
        const = float(np.sum(np.log(self.running_std)))
        return Tensor._result(
            np.asarray([[log_abs_gamma.data.sum() - const]]),
            (log_abs_gamma,),
            lambda g, _t=log_abs_gamma: _t._accumulate(
                np.full_like(_t.data, float(g))))

    def apply(self, x: Tensor, direction: str = "forward", mode: str = "eval"
              ) -> tuple[Tensor, Tensor]:
        """Normalize (or denormalize) rows; returns (y, logdet as (1,1))."""
        if direction not in ("forward", "inverse"):
            raise ContractError(f"unknown direction {direction!r}")
        if mode not in ("train", "eval"):
            raise ContractError(f"unknown mode {mode!r}")
        x = _as_rows(x)
        if mode == "train" and direction == "forward":
            m = self.momentum
            batch_mean = x.data.mean(axis=0)
            batch_std = x.data.std(axis=0)
            self.running_mean = (1 - m) * self.running_mean + m * batch_mean
            self.running_std = (1 - m) * self.running_std + m * batch_std
        self._check()
        mean = Tensor(self.running_mean)
        inv_std = Tensor(1.0 / self.running_std)
        std = Tensor(self.running_std)
        if direction == "forward":
            y = (x - mean) * inv_std * self.gamma + self.beta
            return y, self._logdet()
        y = (x - self.beta) * ad.reciprocal(self.gamma) * std + mean
        return y, -self._logdet()


def mbn_apply(bn: MovingAvgBatchNorm, x: Tensor, direction: str = "forward",
              mode: str = "eval") -> tuple[Tensor, Tensor]:
    return bn.apply(x, direction, mode)


# -- discrete flow ----------------------------------------------------------------


@dataclass
class DiscreteFlow:
    """Alternating-mask coupling stack with a batch norm before, between and
    after the couplings."""

    dim: int
    norms: list[MovingAvgBatchNorm]
    couplings: list[CouplingLayer]

    @staticmethod
    def init(dim: int, cond_dim: int, rng: np.random.Generator, n_couplings: int = 8,
             hidden: tuple[int, ...] = (64,), momentum: float = 0.1) -> "DiscreteFlow":
        norms = [MovingAvgBatchNorm.init(dim, momentum) for _ in range(n_couplings + 1)]
        couplings = [CouplingLayer.init(dim, cond_dim, rng, swap=bool(i % 2),
                                        hidden=hidden)
                     for i in range(n_couplings)]
        return DiscreteFlow(dim=dim, norms=norms, couplings=couplings)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, bn in enumerate(self.norms):
            for k, v in bn.parameters().items():
                out[f"norm{i}.{k}"] = v
        for i, cp in enumerate(self.couplings):
            for k, v in cp.parameters().items():
                out[f"coupling{i}.{k}"] = v
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, bn in enumerate(self.norms):
            out[f"norm{i}.running_mean"] = bn.running_mean
            out[f"norm{i}.running_std"] = bn.running_std
        return out

    def forward(self, u, zeta: Tensor, s_enc: Tensor | None = None,
                mode: str = "eval") -> tuple[Tensor, Tensor]:
        """Data -> latent; returns (z, total logdet per row)."""
        x = _as_rows(u)
        x, total = self.norms[0].apply(x, "forward", mode)
        for cp, bn in zip(self.couplings, self.norms[1:]):
            x, ld = coupling_forward(cp, x, zeta, s_enc)
            total = total + ld
            x, ld_bn = bn.apply(x, "forward", mode)
            total = total + ld_bn
        return x, total

    def inverse(self, z, zeta: Tensor, s_enc: Tensor | None = None) -> Tensor:
        """Latent -> data, always with frozen statistics."""
        x = _as_rows(z)
        for cp, bn in zip(reversed(self.couplings), reversed(self.norms[1:])):
            x, _ = bn.apply(x, "inverse", "eval")
            x = coupling_inverse(cp, x, zeta, s_enc)
        x, _ = self.norms[0].apply(x, "inverse", "eval")
        return x

    def log_prob(self, u, zeta: Tensor, s_enc: Tensor | None = None,
                 mode: str = "eval") -> Tensor:
        z, logdet = self.forward(u, zeta, s_enc, mode)
        return gaussian_log_density(z) + logdet

    def sample(self, z, zeta: Tensor, s_enc: Tensor | None = None) -> Tensor:
        return self.inverse(z, zeta, s_enc)


def dnf_log_prob(stack: DiscreteFlow, u, zeta: Tensor, s_enc: Tensor | None = None,
                 mode: str = "eval") -> Tensor:
    return stack.log_prob(u, zeta, s_enc, mode)


def dnf_sample(stack: DiscreteFlow, zeta: Tensor, s_enc: Tensor | None, z) -> Tensor:
    return stack.sample(z, zeta, s_enc)


# -- gated feature-modulation layer and continuous flow ----------------------------


@dataclass
class FilmLayer:
    """Affine main path gated and shifted by (flow time, forecast time, embedding)."""

    w_x: Tensor
    b_x: Tensor
    w_t: Tensor
    w_s: Tensor
    w_c: Tensor
    b_t: Tensor
    w_bt: Tensor
    w_bs: Tensor
    w_bc: Tensor
    b_bt: Tensor

    @staticmethod
    def init(fan_in: int, fan_out: int, zeta_dim: int, rng: np.random.Generator,
             zero_main: bool = False) -> "FilmLayer":
        def w(shape, fan):
            return ad.uniform_init(shape, fan, rng)

        def z(shape):
            return ad.zeros_init(shape)

        main = z((fan_in, fan_out)) if zero_main else w((fan_in, fan_out), fan_in)
        return FilmLayer(
            w_x=main, b_x=z((fan_out,)),
            w_t=w((1, fan_out), 1), w_s=w((1, fan_out), 1),
            w_c=w((zeta_dim, fan_out), zeta_dim), b_t=z((fan_out,)),
            w_bt=z((1, fan_out)) if zero_main else w((1, fan_out), 1),
            w_bs=z((1, fan_out)) if zero_main else w((1, fan_out), 1),
            w_bc=z((zeta_dim, fan_out)) if zero_main else w((zeta_dim, fan_out), zeta_dim),
            b_bt=z((fan_out,)))

    def parameters(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in
                ("w_x", "b_x", "w_t", "w_s", "w_c", "b_t",
                 "w_bt", "w_bs", "w_bc", "b_bt")}


def film_apply(layer: FilmLayer, x: Tensor, zeta: Tensor, t_flow: float,
               s_enc: Tensor | None = None) -> Tensor:
    x = _as_rows(x)
    n = x.shape[0]
    t_col = Tensor(np.full((n, 1), float(t_flow)))
    s_col = s_enc if s_enc is not None else Tensor(np.zeros((n, 1)))
    gate = ad.sigmoid(ad.matmul(t_col, layer.w_t) + ad.matmul(s_col, layer.w_s)
                      + ad.matmul(zeta, layer.w_c) + layer.b_t)
    bias = (ad.matmul(t_col, layer.w_bt) + ad.matmul(s_col, layer.w_bs)
            + ad.matmul(zeta, layer.w_bc) + layer.b_bt)
    return (ad.matmul(x, layer.w_x) + layer.b_x) * gate + bias


@dataclass
class CnfField:
    """Vector field for the continuous flow: gated layers with tanh between.

    The last layer starts at zero so the flow begins as the identity map.
    ``value_and_jac_cols`` pushes directional derivatives through the same
    layers, yielding J.v products as first-order graph expressions.
    """

    dim: int
    layers: list[FilmLayer]

    @staticmethod
    def init(dim: int, zeta_dim: int, rng: np.random.Generator,
             width: int = 64, n_layers: int = 3) -> "CnfField":
        sizes = [dim] + [width] * (n_layers - 1) + [dim]
        layers = [FilmLayer.init(sizes[i], sizes[i + 1], zeta_dim, rng,
                                 zero_main=(i == n_layers - 1))
                  for i in range(n_layers)]
        return CnfField(dim=dim, layers=layers)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.parameters().items():
                out[f"film{i}.{k}"] = v
        return out

    def value(self, x: Tensor, zeta: Tensor, t_flow: float,
              s_enc: Tensor | None = None) -> Tensor:
        out = x
        for i, layer in enumerate(self.layers):
            out = film_apply(layer, out, zeta, t_flow, s_enc)
            if i < len(self.layers) - 1:
                out = ad.tanh(out)
        return out

    def value_and_jac_cols(self, x: Tensor, zeta: Tensor, t_flow: float,
                           s_enc: Tensor | None, probes: list[Tensor]
                           ) -> tuple[Tensor, list[Tensor]]:
        """Field value plus J @ v for each probe v (same shape as x)."""
        x = _as_rows(x)
        n = x.shape[0]
        t_col = Tensor(np.full((n, 1), float(t_flow)))
        s_col = s_enc if s_enc is not None else Tensor(np.zeros((n, 1)))
        out = x
        cols = list(probes)
        for i, layer in enumerate(self.layers):
            gate = ad.sigmoid(ad.matmul(t_col, layer.w_t) + ad.matmul(s_col, layer.w_s)
                              + ad.matmul(zeta, layer.w_c) + layer.b_t)
            bias = (ad.matmul(t_col, layer.w_bt) + ad.matmul(s_col, layer.w_bs)
                    + ad.matmul(zeta, layer.w_bc) + layer.b_bt)
            out = (ad.matmul(out, layer.w_x) + layer.b_x) * gate + bias
            cols = [ad.matmul(v, layer.w_x) * gate for v in cols]
            if i < len(self.layers) - 1:
                out = ad.tanh(out)
                dtanh = 1.0 - out.square()
                cols = [v * dtanh for v in cols]
        return out, cols


def trace_jacobian(field: CnfField, x, zeta: Tensor, t_flow: float,
                   s_enc: Tensor | None = None, mode: str = "exact",
                   n_probes: int = 1, rng: np.random.Generator | None = None
                   ) -> Tensor:
    """Jacobian trace of the field at x, per row, shape (batch, 1).

    ``exact`` sums the diagonal from one directional derivative per basis
    vector; ``hutchinson`` averages v^T J v over Rademacher probes.
    """
    x = _as_rows(x)
    n, dim = x.shape
    if mode == "exact":
        probes = [Tensor(np.tile(np.eye(dim)[i], (n, 1))) for i in range(dim)]
        _, cols = field.value_and_jac_cols(x, zeta, t_flow, s_enc, probes)
        total = None
        for i, col in enumerate(cols):
            piece = ad.split_cols(col, [i, 1, dim - i - 1])[1] if dim > 1 else col
            total = piece if total is None else total + piece
        return total
    if mode == "hutchinson":
        if rng is None:
            raise ContractError("hutchinson trace needs an rng")
        estimates = None
        probes = [Tensor(rng.integers(0, 2, size=(n, dim)) * 2.0 - 1.0)
                  for _ in range(n_probes)]
        _, cols = field.value_and_jac_cols(x, zeta, t_flow, s_enc, probes)
        for eps, jeps in zip(probes, cols):
            est = (eps * jeps).sum_cols()
            estimates = est if estimates is None else estimates + est
        return estimates * (1.0 / n_probes)
    raise ContractError(f"unknown trace mode {mode!r}")


@dataclass
class ContinuousFlow:
    """Normalize, integrate the field with log-density tracking, normalize again.

    Flow time runs over [0, 1] with the data side at 0 and the latent side
    at 1.
    """

    dim: int
    mbn_pre: MovingAvgBatchNorm
    field: CnfField
    mbn_post: MovingAvgBatchNorm
    trace_mode: str = "exact"
    n_probes: int = 1

    @staticmethod
    def init(dim: int, zeta_dim: int, rng: np.random.Generator, width: int = 64,
             n_layers: int = 3, momentum: float = 0.1,
             trace_mode: str = "exact", n_probes: int = 1) -> "ContinuousFlow":
        return ContinuousFlow(dim=dim,
                              mbn_pre=MovingAvgBatchNorm.init(dim, momentum),
                              field=CnfField.init(dim, zeta_dim, rng, width, n_layers),
                              mbn_post=MovingAvgBatchNorm.init(dim, momentum),
                              trace_mode=trace_mode, n_probes=n_probes)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for k, v in self.mbn_pre.parameters().items():
            out[f"pre.{k}"] = v
        for k, v in self.field.parameters().items():
            out[f"field.{k}"] = v
        for k, v in self.mbn_post.parameters().items():
            out[f"post.{k}"] = v
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return {"pre.running_mean": self.mbn_pre.running_mean,
                "pre.running_std": self.mbn_pre.running_std,
                "post.running_mean": self.mbn_post.running_mean,
                "post.running_std": self.mbn_post.running_std}

    def log_prob(self, u, zeta: Tensor, s_enc: Tensor | None = None,
                 cfg: ode.SolverConfig | None = None, mode: str = "eval",
                 rng: np.random.Generator | None = None) -> Tensor:
        cfg = cfg or ode.SolverConfig()
        x0, ld_pre = self.mbn_pre.apply(_as_rows(u), "forward", mode)
        n, dim = x0.shape

        if self.trace_mode == "exact":
            probes = [Tensor(np.tile(np.eye(dim)[i], (n, 1))) for i in range(dim)]
        else:
            if rng is None:
                raise ContractError("hutchinson trace needs an rng")
            probes = [Tensor(rng.integers(0, 2, size=(n, dim)) * 2.0 - 1.0)
                      for _ in range(self.n_probes)]

        def aug(h: Tensor, t: float, _cond) -> tuple[Tensor, Tensor]:
            dx, cols = self.field.value_and_jac_cols(h, zeta, t, s_enc, probes)
            if self.trace_mode == "exact":
                trace = None
                for i, col in enumerate(cols):
                    piece = ad.split_cols(col, [i, 1, dim - i - 1])[1] if dim > 1 else col
                    trace = piece if trace is None else trace + piece
            else:
                trace = None
                for eps, jeps in zip(probes, cols):
                    est = (eps * jeps).sum_cols()
                    trace = est if trace is None else trace + est
                trace = trace * (1.0 / self.n_probes)
            return dx, -trace

        z_pre, delta, _ = ode.integrate_augmented(aug, x0, 0.0, 0.0, 1.0, cfg)
        z, ld_post = self.mbn_post.apply(z_pre, "forward", mode)
        # delta accumulated -integral(trace); the forward map's logdet is +integral
        return gaussian_log_density(z) + ld_pre + ld_post - delta

    def forward_latent(self, u, zeta: Tensor, s_enc: Tensor | None = None,
                       cfg: ode.SolverConfig | None = None) -> Tensor:
        """Data -> latent without density tracking (frozen statistics)."""
        cfg = cfg or ode.SolverConfig()
        x0, _ = self.mbn_pre.apply(_as_rows(u), "forward", "eval")

        def plain(h: Tensor, t: float, _cond) -> Tensor:
            return self.field.value(h, zeta, t, s_enc)

        z_pre, _ = ode.integrate(plain, x0, 0.0, 1.0, cfg)
        z, _ = self.mbn_post.apply(z_pre, "forward", "eval")
        return z

    def sample(self, z, zeta: Tensor, s_enc: Tensor | None = None,
               cfg: ode.SolverConfig | None = None) -> Tensor:
        """Latent -> data: undo the post-norm, integrate in reverse time, undo the pre-norm."""
        cfg = cfg or ode.SolverConfig()
        y, _ = self.mbn_post.apply(_as_rows(z), "inverse", "eval")

        def plain(h: Tensor, t: float, _cond) -> Tensor:
            return self.field.value(h, zeta, t, s_enc)

        x0, _ = ode.integrate(plain, y, 1.0, 0.0, cfg)
        u, _ = self.mbn_pre.apply(x0, "inverse", "eval")
        return u


def cnf_log_prob(flow: ContinuousFlow, u, zeta: Tensor, s_enc: Tensor | None,
                 cfg: ode.SolverConfig | None = None, mode: str = "eval",
                 rng: np.random.Generator | None = None) -> Tensor:
    return flow.log_prob(u, zeta, s_enc, cfg, mode, rng)


def cnf_sample(flow: ContinuousFlow, zeta: Tensor, s_enc: Tensor | None, z,
               cfg: ode.SolverConfig | None = None) -> Tensor:
    return flow.sample(z, zeta, s_enc, cfg)
