import numpy as np
import pytest

from rgbtsplat.cloud import Camera, GaussianCloud
from rgbtsplat.config import LossWeights
from rgbtsplat.fd import central_diff, compare_grads
from rgbtsplat.modnet import init_modulation_net
from rgbtsplat.pipeline import (
    RenderSettings,
    render_and_loss,
    render_backward,
    render_frame,
)


def make_cloud(rng, n=6, d=8, sh_degree=3, dtype=np.float64):
    pos = rng.normal(0, 0.35, (n, 3))
    pos[:, 2] = 3.0 + rng.uniform(-0.8, 0.8, n)
    quat = rng.normal(0, 1, (n, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    cloud = GaussianCloud(
        positions=pos.astype(dtype),
        log_scales=rng.uniform(np.log(0.08), np.log(0.3), (n, 3)).astype(dtype),
        rotations=quat.astype(dtype),
        opacity_logits=rng.uniform(-1.5, 1.5, n).astype(dtype),
        thermal_opacity_offsets=rng.uniform(-0.8, 0.8, n).astype(dtype),
        sh_coeffs=rng.normal(0, 0.25, (n, (sh_degree + 1) ** 2, 3)).astype(dtype),
        features=rng.normal(0, 0.5, (n, d)).astype(dtype),
    )
    cloud.validate()
    return cloud


def make_camera(size=8, f=None):
    f = f or size * 5.0
    return Camera(fx=f, fy=f, cx=size / 2, cy=size / 2, width=size, height=size,
                  world_to_cam=np.eye(4), near=0.1, far=50.0)


def small_net(rng_seed=0, d=8):
    net = init_modulation_net(d, hidden=6, thermal_hidden=4, seed=rng_seed,
                              dtype=np.float64)
    # push the modulation away from its identity init so every path carries signal
    rng = np.random.default_rng(rng_seed + 100)
    net.film = (rng.normal(0, 0.3, net.film[0].shape),
                rng.normal(0, 0.3, net.film[1].shape))
    return net


class TestRenderFrame:
    def test_zero_offsets_share_feature_map_bitwise(self):
        rng = np.random.default_rng(1)
        cloud = make_cloud(rng)
        cloud.thermal_opacity_offsets[:] = 0.0
        net = small_net()
        out = render_frame(cloud, net, make_camera(), RenderSettings(tile_size=8))
        assert np.array_equal(out.a_ft, out.a_f)

    def test_decoupling_identity(self):
        # offsets == 0: the dual-pass thermal image equals the one computed
        # from the base feature map
        rng = np.random.default_rng(2)
        cloud = make_cloud(rng)
        cloud.thermal_opacity_offsets[:] = 0.0
        net = small_net()
        cam = make_camera()
        dual = render_frame(cloud, net, cam, RenderSettings(tile_size=8))
        single = render_frame(cloud, net, cam,
                              RenderSettings(tile_size=8, disable_decoupling=True))
        assert np.array_equal(dual.c_thermal, single.c_thermal)

    def test_identity_init_hybrid_baseline(self):
        # fresh film init + zeroed rgb decoder final layer: implicit color is
        # exactly 0.5 everywhere and the hybrid output is clamp(r_sh + 0.5)
        rng = np.random.default_rng(3)
        cloud = make_cloud(rng)
        net = init_modulation_net(8, hidden=6, thermal_hidden=4, seed=1, dtype=np.float64)
        w, b = net.rgb_decoder[-1]
        net.rgb_decoder[-1] = (np.zeros_like(w), np.zeros_like(b))
        out = render_frame(cloud, net, make_camera(), RenderSettings(tile_size=8))
        np.testing.assert_array_equal(out.c_rgb, np.clip(out.r_sh + 0.5, 0.0, 1.0))

    def test_hybrid_decomposition(self):
        rng = np.random.default_rng(4)
        cloud = make_cloud(rng)
        net = small_net(2)
        out = render_frame(cloud, net, make_camera(), RenderSettings(tile_size=8))
        inside = out.trace.clamp_inside
        c_implicit = out.c_rgb - out.r_sh
        recomposed = out.r_sh + c_implicit
        np.testing.assert_allclose(np.where(inside, recomposed, 0),
                                   np.where(inside, out.c_rgb, 0), atol=1e-12)

    def test_disable_hybrid_uses_implicit_only(self):
        rng = np.random.default_rng(5)
        cloud = make_cloud(rng)
        net = small_net(3)
        out = render_frame(cloud, net, make_camera(),
                           RenderSettings(tile_size=8, disable_hybrid=True))
        assert out.c_rgb.min() > 0.0 and out.c_rgb.max() < 1.0

    def test_disable_film_equals_hand_wired(self):
        rng = np.random.default_rng(6)
        cloud = make_cloud(rng)
        net = small_net(4)
        cam = make_camera()
        ablated = render_frame(cloud, net, cam,
                               RenderSettings(tile_size=8, disable_film=True))
        # hand-wire: force identity modulation weights, keep everything else
        wired = net.copy()
        wired.film = (np.zeros_like(net.film[0]),
                      np.concatenate([np.ones(net.hidden_dim), np.zeros(net.hidden_dim)]))
        ref = render_frame(cloud, wired, cam, RenderSettings(tile_size=8))
        assert np.array_equal(ablated.c_rgb, ref.c_rgb)
        assert np.array_equal(ablated.c_thermal, ref.c_thermal)


class TestRenderBackward:
    def test_no_thermal_path_zero_offset_grad(self):
        rng = np.random.default_rng(7)
        cloud = make_cloud(rng)
        net = small_net(5)
        cam = make_camera()
        settings = RenderSettings(tile_size=8, disable_decoupling=True)
        out = render_frame(cloud, net, cam, settings)
        grads = render_backward(cloud, net, cam, out,
                                np.zeros_like(out.c_rgb), np.zeros_like(out.c_thermal),
                                rng.normal(0, 1, out.a_f.shape),
                                rng.normal(0, 1, out.a_ft.shape))
        assert np.all(grads.cloud.thermal_opacity_offsets == 0)

    def test_opacity_gradient_additivity(self):
        rng = np.random.default_rng(8)
        cloud = make_cloud(rng)
        net = small_net(6)
        cam = make_camera()
        out = render_frame(cloud, net, cam, RenderSettings(tile_size=8))
        grads = render_backward(cloud, net, cam, out,
                                rng.normal(0, 1, out.c_rgb.shape),
                                rng.normal(0, 1, out.c_thermal.shape),
                                rng.normal(0, 1, out.a_f.shape),
                                rng.normal(0, 1, out.a_ft.shape))
        np.testing.assert_allclose(grads.cloud.opacity_logits,
                                   grads.parts["opacity_base"] + grads.parts["opacity_thermal"],
                                   atol=1e-14)
        np.testing.assert_array_equal(grads.cloud.thermal_opacity_offsets,
                                      grads.parts["opacity_thermal"])

    def test_symmetric_scene_symmetric_gradients(self):
        # two non-overlapping Gaussians mirrored in x with symmetric upstream:
        # gradients mirror too (overlap would break this via occlusion order)
        d = 8
        cloud = GaussianCloud(
            positions=np.array([[-0.3, 0.0, 3.0], [0.3, 0.0, 3.0]]),
            log_scales=np.full((2, 3), np.log(0.05)),
            rotations=np.array([[1.0, 0, 0, 0], [1.0, 0, 0, 0]]),
            opacity_logits=np.array([0.4, 0.4]),
            thermal_opacity_offsets=np.array([0.3, 0.3]),
            sh_coeffs=np.zeros((2, 16, 3)),
            features=np.tile(np.linspace(0.1, 0.8, d), (2, 1)),
        )
        net = init_modulation_net(d, hidden=6, thermal_hidden=4, seed=3, dtype=np.float64)
        cam = make_camera(size=16)
        out = render_frame(cloud, net, cam, RenderSettings(tile_size=16))
        ones_rgb = np.ones_like(out.c_rgb)
        ones_th = np.ones_like(out.c_thermal)
        grads = render_backward(cloud, net, cam, out, ones_rgb, ones_th,
                                np.ones_like(out.a_f), np.ones_like(out.a_ft))
        g = grads.cloud
        # mirror pairs: x-position gradients are opposite, everything else equal
        assert g.positions[0, 0] == pytest.approx(-g.positions[1, 0], rel=1e-9)
        assert g.positions[0, 2] == pytest.approx(g.positions[1, 2], rel=1e-9)
        np.testing.assert_allclose(g.opacity_logits[0], g.opacity_logits[1], rtol=1e-9)
        np.testing.assert_allclose(g.features[0], g.features[1], rtol=1e-9)

    @pytest.mark.parametrize("settings", [
        RenderSettings(tile_size=8),
        RenderSettings(tile_size=8, disable_decoupling=True),
        RenderSettings(tile_size=8, disable_hybrid=True),
        RenderSettings(tile_size=8, disable_film=True),
        RenderSettings(tile_size=8, film_source="base"),
    ])
    def test_end_to_end_fd(self, settings):
        # hazard-screened scene: no blend threshold or loss kink within FD reach
        from rgbtsplat.gradcheck import build_fd_scene

        scene = build_fd_scene(42, settings)
        cloud, net, cam = scene.cloud, scene.net, scene.camera

        def loss():
            _, breakdown, _ = render_and_loss(cloud, net, cam, scene.i_rgb, scene.i_th,
                                              settings, scene.weights, with_grads=False)
            return breakdown.total

        _, _, grads = render_and_loss(cloud, net, cam, scene.i_rgb, scene.i_th,
                                      settings, scene.weights)
        for name, param in cloud.named_params():
            fd = central_diff(loss, param)
            res = compare_grads(name, getattr(grads.cloud, name), fd, 1e-3)
            assert res.passed, f"{name}: {res}"
        for name, param in net.named_params():
            fd = central_diff(loss, param)
            res = compare_grads(name, grads.net[name], fd, 1e-3)
            assert res.passed, f"{name}: {res}"

    def test_background_gradient(self):
        from rgbtsplat.gradcheck import build_fd_scene

        settings = RenderSettings(tile_size=8, background=(0.2, 0.7, 0.4))
        scene = build_fd_scene(20, settings)
        cloud, net, cam = scene.cloud, scene.net, scene.camera

        def loss():
            _, b, _ = render_and_loss(cloud, net, cam, scene.i_rgb, scene.i_th,
                                      settings, scene.weights, with_grads=False)
            return b.total

        _, _, grads = render_and_loss(cloud, net, cam, scene.i_rgb, scene.i_th,
                                      settings, scene.weights)
        fd = central_diff(loss, cloud.opacity_logits)
        assert compare_grads("opacity_bg", grads.cloud.opacity_logits, fd, 1e-3).passed
