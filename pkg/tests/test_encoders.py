import numpy as np
import pytest

from flowcast import autodiff as ad
from flowcast import cubic_spline as cs
from flowcast import encoders as enc
from flowcast import odesolve as ode
from flowcast.autodiff import Tensor
from flowcast.errors import ContractError


def zero_gru(hidden_dim=4, input_dim=7):
    rng = np.random.default_rng(0)
    p = enc.GruParams.init(hidden_dim, rng, input_dim)
    for t in p.parameters().values():
        t.data[...] = 0.0
    return p


def numpy_gru_step(p, h, x):
    """Independent straight-line transcription of the recurrence."""
    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    W = {k: t.data for k, t in p.parameters().items()}
    r = sig(x @ W["w_ir"] + W["b_ir"] + h @ W["w_hr"] + W["b_hr"])
    z = sig(x @ W["w_iz"] + W["b_iz"] + h @ W["w_hz"] + W["b_hz"])
    cand = np.tanh(x @ W["w_in"] + W["b_in"] + r * (h @ W["w_hn"] + W["b_hn"]))
    return r, z, cand, (1 - z) * cand + z * h


class TestGruStep:
    def test_zero_params_zero_state(self):
        p = zero_gru()
        h = enc.gru_step(p, Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 7))))
        np.testing.assert_array_equal(h.data, 0.0)

    def test_zero_params_halves_previous_state(self):
        # with all weights zero: r = z = 1/2, candidate = 0, so h = v/2
        p = zero_gru()
        v = np.array([[0.4, -1.2, 2.0, 0.01]])
        h = enc.gru_step(p, Tensor(v), Tensor(np.zeros((1, 7))))
        np.testing.assert_allclose(h.data, 0.5 * v, atol=1e-15)

    def test_matches_independent_transcription(self):
        rng = np.random.default_rng(1)
        p = enc.GruParams.init(5, rng)
        for t in p.parameters().values():
            t.data[...] = rng.normal(scale=0.7, size=t.shape)
        h_prev = rng.normal(size=(3, 5))
        x = rng.normal(size=(3, 7))
        h = enc.gru_step(p, Tensor(h_prev), Tensor(x))
        _, _, _, expected = numpy_gru_step(p, h_prev, x)
        np.testing.assert_allclose(h.data, expected, atol=1e-12, rtol=0)

    def test_gate_ranges_and_convex_envelope(self):
        rng = np.random.default_rng(2)
        p = enc.GruParams.init(6, rng)
        for t in p.parameters().values():
            t.data[...] = rng.normal(scale=1.5, size=t.shape)
        h_prev = rng.normal(size=(4, 6))
        x = rng.normal(size=(4, 7))
        r, z, cand, h = numpy_gru_step(p, h_prev, x)
        assert np.all((r > 0) & (r < 1))
        assert np.all((z > 0) & (z < 1))
        envelope = np.maximum(np.abs(cand), np.abs(h_prev))
        got = enc.gru_step(p, Tensor(h_prev), Tensor(x))
        assert np.all(np.abs(got.data) <= envelope + 1e-15)

    def test_dimension_mismatch(self):
        p = zero_gru(hidden_dim=4)
        with pytest.raises(ContractError):
            enc.gru_step(p, Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 7))))


class TestGruEncode:
    def test_single_step_zero_params(self):
        p = zero_gru()
        z = enc.gru_encode(p, np.zeros((1, 1, 2)), np.zeros((1, 1, 5)))
        np.testing.assert_array_equal(z.data, 0.0)

    def test_prefix_property_is_bitwise(self):
        rng = np.random.default_rng(3)
        p = enc.GruParams.init(4, rng)
        obs = rng.normal(size=(2, 8, 2))
        feat = rng.normal(size=(2, 8, 5))
        full_k = enc.gru_encode(p, obs[:, :5], feat[:, :5]).data
        # perturbing later inputs must not touch the prefix state
        obs2 = obs.copy()
        obs2[:, 6:] += 100.0
        again = enc.gru_encode(p, obs2[:, :5], feat[:, :5]).data
        assert np.array_equal(full_k, again)

    def test_matches_unrolled_loop_oracle(self):
        rng = np.random.default_rng(4)
        p = enc.GruParams.init(5, rng)
        for t in p.parameters().values():
            t.data[...] = rng.normal(scale=0.5, size=t.shape)
        obs = rng.normal(size=(1, 8, 2))
        feat = rng.normal(size=(1, 8, 5))
        z = enc.gru_encode(p, obs, feat)

        h = np.zeros((1, 5))
        for t in range(8):
            x = np.concatenate([obs[:, t], feat[:, t]], axis=1)
            _, _, _, h = numpy_gru_step(p, h, x)
        np.testing.assert_allclose(z.data, h, atol=1e-12, rtol=0)

    def test_empty_sequence_rejected(self):
        p = zero_gru()
        with pytest.raises(ContractError):
            enc.gru_encode(p, np.zeros((1, 0, 2)), np.zeros((1, 0, 5)))

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        p = enc.GruParams.init(4, rng)
        obs = rng.normal(size=(1, 6, 2))
        feat = rng.normal(size=(1, 6, 5))
        a = enc.gru_encode(p, obs, feat).data
        b = enc.gru_encode(p, obs, feat).data
        assert np.array_equal(a, b)


def _numpy_response(p: enc.CdeParams):
    """Raw-numpy copy of the response net for the Euler oracle."""
    weights = [(layer.w.data, layer.b.data) for layer in p.response.layers]

    def f(h: np.ndarray) -> np.ndarray:
        out = h
        for i, (w, b) in enumerate(weights):
            out = out @ w + b
            out = np.tanh(out)  # final layer is tanh-bounded too
        return out

    return f


class TestCdeEncode:
    def _small_params(self, seed, hidden=3):
        rng = np.random.default_rng(seed)
        return enc.CdeParams.init(hidden, rng, width=8)

    def test_zero_response_returns_embedded_first_observation(self):
        p = self._small_params(0)
        for layer in p.response.layers:
            layer.w.data[...] = 0.0
            layer.b.data[...] = 0.0
        rng = np.random.default_rng(1)
        obs = rng.normal(size=(2, 5, 2))
        feat = rng.normal(size=(2, 5, 5))
        paths = enc.fit_control_paths(obs, feat)
        z = enc.cde_encode(p, paths)
        x0 = np.concatenate([obs[:, 0], feat[:, 0]], axis=1)
        np.testing.assert_allclose(z.data, x0 @ p.w_embed.data, atol=1e-9)

    def test_constant_observations_keep_initial_state(self):
        p = self._small_params(2)
        obs = np.tile(np.array([[1.5, -0.5]]), (1, 6, 1)).reshape(1, 6, 2)
        feat = np.tile(np.array([[0.1, 0.2, 0.0, 0.0, 0.3]]), (1, 6, 1)).reshape(1, 6, 5)
        paths = enc.fit_control_paths(obs, feat)
        z = enc.cde_encode(p, paths)
        x0 = np.concatenate([obs[:, 0], feat[:, 0]], axis=1)
        np.testing.assert_allclose(z.data, x0 @ p.w_embed.data, atol=1e-9)

    def test_matches_fine_step_euler_oracle(self):
        p = self._small_params(3)
        rng = np.random.default_rng(4)
        obs = rng.normal(scale=0.5, size=(1, 4, 2))
        feat = rng.normal(scale=0.5, size=(1, 4, 5))
        paths = enc.fit_control_paths(obs, feat)
        z = enc.cde_encode(p, paths, ode.SolverConfig(rtol=1e-8, atol=1e-8))

        response = _numpy_response(p)
        single = cs.fit_natural_cubic(
            np.concatenate([obs[0], feat[0]], axis=1), np.arange(4.0))
        h = (np.concatenate([obs[0, 0], feat[0, 0]]) @ p.w_embed.data)
        dt = 1e-4
        t = 0.0
        while t < 3.0 - 1e-12:
            step = min(dt, 3.0 - t)
            m = response(h[None, :]).reshape(p.hidden_dim, 7)
            h = h + step * (m @ single.eval_derivative(t))
            t += step
        assert np.max(np.abs(z.data[0] - h)) < 1e-4

    def test_interval_additivity(self):
        p = self._small_params(5)
        rng = np.random.default_rng(6)
        obs = rng.normal(size=(1, 5, 2))
        feat = rng.normal(size=(1, 5, 5))
        paths = enc.fit_control_paths(obs, feat)
        cfg = ode.SolverConfig()
        full = enc.cde_encode(p, paths, cfg)

        field = enc.cde_field(p, paths)
        h0 = enc.cde_initial_state(p, paths)
        mid, _ = ode.integrate(field, h0, 0.0, 2.0, cfg)
        end, _ = ode.integrate(field, mid, 2.0, 4.0, cfg)
        bound = 10 * (cfg.atol + cfg.rtol * np.abs(full.data))
        assert np.all(np.abs(full.data - end.data) <= bound)

    def test_deterministic(self):
        p = self._small_params(7)
        rng = np.random.default_rng(8)
        obs = rng.normal(size=(1, 4, 2))
        feat = rng.normal(size=(1, 4, 5))
        paths = enc.fit_control_paths(obs, feat)
        a = enc.cde_encode(p, paths).data
        b = enc.cde_encode(p, paths).data
        assert np.array_equal(a, b)

    def test_gradients_flow_to_parameters(self):
        p = self._small_params(9, hidden=2)
        rng = np.random.default_rng(10)
        obs = rng.normal(size=(1, 3, 2))
        feat = rng.normal(size=(1, 3, 5))
        paths = enc.fit_control_paths(obs, feat)
        z = enc.cde_encode(p, paths)
        ad.backward(z.square().sum())
        assert p.w_embed.grad is not None
        assert p.response.layers[0].w.grad is not None
