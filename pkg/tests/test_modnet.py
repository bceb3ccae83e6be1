import numpy as np
import pytest
from scipy.special import expit

from rgbtsplat.errors import ShapeMismatch, StaleTrace
from rgbtsplat.fd import central_diff, compare_grads
from rgbtsplat.modnet import (
    ModulationNet,
    decode_rgb,
    decode_thermal,
    film_modulate,
    film_params,
    init_modulation_net,
    modulate_forward,
    modulation_backward,
    shared_encode,
    silu,
    silu_grad,
    thermal_prior,
)


def small_net(seed=0, d=8, hidden=6, th=4):
    return init_modulation_net(d, hidden=hidden, thermal_hidden=th, seed=seed,
                               dtype=np.float64)


def mlp_oracle(layers, x):
    """Layer-by-layer loop evaluation, independent of the vectorized path."""
    out = np.array(x, dtype=np.float64)
    for i, (w, b) in enumerate(layers):
        out = out @ w.T + b
        if i != len(layers) - 1:
            out = out * expit(out)
    return out


class TestStages:
    def test_zero_input_zero_bias_gives_zero(self):
        net = small_net()
        for layers in (net.shared, net.thermal_head):
            for j in range(len(layers)):
                layers[j] = (layers[j][0], np.zeros_like(layers[j][1]))
        a = np.zeros((2, 2, net.feature_dim))
        h = shared_encode(net, a)
        assert np.all(h == 0)
        assert np.all(thermal_prior(net, h) == 0)

    def test_single_pixel_equals_vector_mlp(self):
        net = small_net(3)
        rng = np.random.default_rng(5)
        a = rng.normal(0, 1, (1, 1, net.feature_dim))
        h = shared_encode(net, a)
        np.testing.assert_allclose(h[0, 0], mlp_oracle(net.shared, a[0, 0]), atol=1e-12)

    def test_random_matches_oracle(self):
        net = small_net(7)
        rng = np.random.default_rng(11)
        a = rng.normal(0, 1, (3, 5, net.feature_dim))
        h = shared_encode(net, a)
        h_th = thermal_prior(net, h)
        for y in range(3):
            for x in range(5):
                np.testing.assert_allclose(h[y, x], mlp_oracle(net.shared, a[y, x]), atol=1e-12)
                np.testing.assert_allclose(h_th[y, x], mlp_oracle(net.thermal_head, h[y, x]),
                                           atol=1e-12)

    def test_shared_encode_shape_check(self):
        net = small_net()
        with pytest.raises(ShapeMismatch):
            shared_encode(net, np.zeros((2, 2, net.feature_dim + 1)))

    def test_film_identity_init(self):
        net = small_net()
        h_th = np.random.default_rng(0).normal(0, 1, (2, 2, net.thermal_dim))
        gamma, beta = film_params(net, h_th)
        assert np.all(gamma == 1.0)
        assert np.all(beta == 0.0)

    def test_film_zero_input_returns_bias_split(self):
        net = small_net()
        rng = np.random.default_rng(1)
        w = rng.normal(0, 1, net.film[0].shape)
        b = rng.normal(0, 1, net.film[1].shape)
        net.film = (w, b)
        gamma, beta = film_params(net, np.zeros((1, 1, net.thermal_dim)))
        hd = net.hidden_dim
        np.testing.assert_allclose(gamma[0, 0], b[:hd], atol=1e-15)
        np.testing.assert_allclose(beta[0, 0], b[hd:], atol=1e-15)

    def test_film_params_matches_affine_oracle(self):
        net = small_net(2)
        rng = np.random.default_rng(2)
        net.film = (rng.normal(0, 1, net.film[0].shape), rng.normal(0, 1, net.film[1].shape))
        h_th = rng.normal(0, 1, (2, 3, net.thermal_dim))
        gamma, beta = film_params(net, h_th)
        hd = net.hidden_dim
        for y in range(2):
            for x in range(3):
                z = net.film[0] @ h_th[y, x] + net.film[1]
                np.testing.assert_allclose(gamma[y, x], z[:hd], atol=1e-12)
                np.testing.assert_allclose(beta[y, x], z[hd:], atol=1e-12)

    def test_modulate_identity_and_zero(self):
        rng = np.random.default_rng(3)
        h = rng.normal(0, 1, (2, 2, 6))
        assert np.array_equal(film_modulate(h, np.ones_like(h), np.zeros_like(h)), h)
        beta = rng.normal(0, 1, h.shape)
        np.testing.assert_array_equal(film_modulate(h, np.zeros_like(h), beta), beta)
        got = film_modulate(h, 2 * np.ones_like(h), beta)
        np.testing.assert_allclose(got, 2 * h + beta, atol=1e-15)

    def test_modulate_shape_check(self):
        with pytest.raises(ShapeMismatch):
            film_modulate(np.zeros((2, 2, 3)), np.zeros((2, 2, 4)), np.zeros((2, 2, 3)))

    def test_decoders(self):
        net = small_net()
        zeroed = [(np.zeros_like(w), np.zeros_like(b)) for w, b in net.rgb_decoder]
        net.rgb_decoder = zeroed
        out = decode_rgb(net, np.random.default_rng(0).normal(0, 1, (2, 2, net.hidden_dim)))
        np.testing.assert_allclose(out, 0.5, atol=1e-15)

        net2 = small_net(5)
        rng = np.random.default_rng(6)
        h_mod = rng.normal(0, 1, (1, 1, net2.hidden_dim))
        np.testing.assert_allclose(decode_rgb(net2, h_mod)[0, 0],
                                   expit(mlp_oracle(net2.rgb_decoder, h_mod[0, 0])), atol=1e-12)
        h_th = rng.normal(0, 1, (1, 1, net2.thermal_dim))
        np.testing.assert_allclose(decode_thermal(net2, h_th)[0, 0],
                                   expit(mlp_oracle(net2.thermal_decoder, h_th[0, 0])), atol=1e-12)

    def test_silu_grad_matches_fd(self):
        x = np.linspace(-4, 4, 17)
        fd = central_diff(lambda: float(np.sum(silu(x))), x)
        np.testing.assert_allclose(silu_grad(x), fd, atol=1e-8)


class TestFullGraph:
    def test_pixel_permutation_equivariance(self):
        net = small_net(9)
        rng = np.random.default_rng(10)
        a_f = rng.normal(0, 1, (4, 3, net.feature_dim))
        a_ft = rng.normal(0, 1, (4, 3, net.feature_dim))
        c_rgb, c_th, _ = modulate_forward(net, a_f, a_ft)
        flat_f = a_f.reshape(12, -1)
        flat_ft = a_ft.reshape(12, -1)
        perm = rng.permutation(12)
        c_rgb_p, c_th_p, _ = modulate_forward(net, flat_f[perm], flat_ft[perm])
        np.testing.assert_array_equal(c_rgb.reshape(12, 3)[perm], c_rgb_p)
        np.testing.assert_array_equal(c_th.reshape(12, 1)[perm], c_th_p)

    def test_identity_at_init(self):
        # with the identity film init the modulated branch IS the plain branch
        net = small_net(12)
        rng = np.random.default_rng(13)
        a_f = rng.normal(0, 1, (3, 3, net.feature_dim))
        a_ft = rng.normal(0, 1, (3, 3, net.feature_dim))
        h = shared_encode(net, a_f)
        gamma, beta = film_params(net, thermal_prior(net, shared_encode(net, a_ft)))
        np.testing.assert_array_equal(decode_rgb(net, film_modulate(h, gamma, beta)),
                                      decode_rgb(net, h))
        modulated, _, _ = modulate_forward(net, a_f, a_ft, disable_film=False)
        plain, _, _ = modulate_forward(net, a_f, a_ft, disable_film=True)
        np.testing.assert_array_equal(modulated, plain)

    def test_zero_upstream_zero_grads(self):
        net = small_net(1)
        rng = np.random.default_rng(2)
        a_f = rng.normal(0, 1, (2, 2, net.feature_dim))
        a_ft = rng.normal(0, 1, (2, 2, net.feature_dim))
        # randomize film so the graph is not at the identity point
        net.film = (rng.normal(0, 0.3, net.film[0].shape), rng.normal(0, 0.3, net.film[1].shape))
        _, _, trace = modulate_forward(net, a_f, a_ft)
        grads, d_af, d_aft = modulation_backward(net, trace, np.zeros((2, 2, 3)),
                                                 np.zeros((2, 2, 1)))
        assert all(np.all(g == 0) for g in grads.values())
        assert np.all(d_af == 0) and np.all(d_aft == 0)

    def test_stale_trace_rejected(self):
        net = small_net(1)
        a = np.zeros((2, 2, net.feature_dim))
        _, _, trace = modulate_forward(net, a, a.copy())
        with pytest.raises(StaleTrace):
            modulation_backward(net, trace, np.zeros((3, 3, 3)), np.zeros((3, 3, 1)))

    def _fd_all(self, film_source):
        net = small_net(21, d=6, hidden=5, th=3)
        rng = np.random.default_rng(22)
        net.film = (rng.normal(0, 0.4, net.film[0].shape).astype(np.float64),
                    rng.normal(0, 0.4, net.film[1].shape).astype(np.float64))
        a_f = rng.normal(0, 1, (2, 2, 6))
        a_ft = rng.normal(0, 1, (2, 2, 6))
        w_rgb = rng.normal(0, 1, (2, 2, 3))
        w_th = rng.normal(0, 1, (2, 2, 1))

        def loss():
            c_rgb, c_th, _ = modulate_forward(net, a_f, a_ft, film_source=film_source)
            return float(np.sum(w_rgb * c_rgb) + np.sum(w_th * c_th))

        _, _, trace = modulate_forward(net, a_f, a_ft, film_source=film_source)
        grads, d_af, d_aft = modulation_backward(net, trace, w_rgb, w_th)
        for name, param in net.named_params():
            fd = central_diff(loss, param)
            assert compare_grads(name, grads[name], fd, 1e-5).passed, name
        assert compare_grads("d_a_f", d_af, central_diff(loss, a_f), 1e-5).passed
        assert compare_grads("d_a_ft", d_aft, central_diff(loss, a_ft), 1e-5).passed

    def test_all_grads_match_fd(self):
        self._fd_all("thermal")

    def test_all_grads_match_fd_base_source(self):
        self._fd_all("base")

    def test_dual_path_gradient_sums(self):
        # h_th feeds both the modulation generator and the thermal decoder;
        # its total gradient is the sum of the two path-isolated gradients
        net = small_net(30, d=6, hidden=5, th=3)
        rng = np.random.default_rng(31)
        net.film = (rng.normal(0, 0.4, net.film[0].shape), rng.normal(0, 0.4, net.film[1].shape))
        a_f = rng.normal(0, 1, (2, 2, 6))
        a_ft = rng.normal(0, 1, (2, 2, 6))
        w_rgb = rng.normal(0, 1, (2, 2, 3))
        w_th = rng.normal(0, 1, (2, 2, 1))
        _, _, trace = modulate_forward(net, a_f, a_ft)
        g_both, _, d_aft_both = modulation_backward(net, trace, w_rgb, w_th)
        g_film, _, d_aft_film = modulation_backward(net, trace, w_rgb, np.zeros_like(w_th))
        g_dec, _, d_aft_dec = modulation_backward(net, trace, np.zeros_like(w_rgb), w_th)
        for name in g_both:
            np.testing.assert_allclose(g_both[name], g_film[name] + g_dec[name],
                                       atol=1e-12, err_msg=name)
        np.testing.assert_allclose(d_aft_both, d_aft_film + d_aft_dec, atol=1e-12)
