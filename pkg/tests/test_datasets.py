import json

import numpy as np
import pytest

from rgbtsplat.cloud import Camera
from rgbtsplat.config import LossWeights
from rgbtsplat.datasets import (
    RgbtDataset,
    init_cloud_from_points,
    init_cloud_random_box,
    load_dataset,
    load_image,
    look_at,
    nerf_matrix_to_w2c,
    perturb_cloud,
    read_ply_points,
    save_png,
    synth_scene,
    w2c_to_nerf_matrix,
    write_scene,
)
from rgbtsplat.errors import BadMatrix, FormatError, MissingField, MissingImage
from rgbtsplat.ironbow import ironbow_forward
from rgbtsplat.losses import rec_loss, total_loss
from rgbtsplat.pipeline import render_frame


def tiny_scene(tmp_path, n_cameras=2, size=16, seed=3):
    scene = synth_scene(n_gaussians=6, n_cameras=n_cameras, image_size=size, seed=seed)
    write_scene(scene, tmp_path)
    return scene


class TestCameraConventions:
    def test_lookat_is_rigid(self):
        w2c = look_at((2.0, 1.0, -3.0), (0.0, 0.0, 0.0))
        r = w2c[:3, :3]
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)

    def test_lookat_points_at_target(self):
        pos = np.array([3.0, 0.5, 1.0])
        w2c = look_at(pos, (0.0, 0.0, 0.0))
        target_cam = w2c[:3, :3] @ (np.zeros(3) - pos)
        # the target sits on the +z optical axis
        np.testing.assert_allclose(target_cam[:2], 0, atol=1e-12)
        assert target_cam[2] > 0

    def test_nerf_roundtrip(self):
        w2c = look_at((1.0, 2.0, 3.0), (0.2, -0.1, 0.0))
        back = nerf_matrix_to_w2c(w2c_to_nerf_matrix(w2c))
        np.testing.assert_allclose(back, w2c, atol=1e-12)

    def test_reflection_rejected(self):
        bad = np.eye(4)
        bad[0, 0] = -1.0  # determinant -1 rotation block
        with pytest.raises(BadMatrix):
            nerf_matrix_to_w2c(bad)


class TestImageIO:
    def test_png_roundtrip_quantized(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 1, (9, 7, 3))
        save_png(tmp_path / "x.png", img)
        back = load_image(tmp_path / "x.png")
        assert back.shape == (9, 7, 3)
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-9

    def test_npy_roundtrip_exact(self, tmp_path):
        img = np.random.default_rng(1).uniform(0, 1, (5, 5, 1)).astype(np.float32)
        np.save(tmp_path / "x.npy", img)
        back = load_image(tmp_path / "x.npy")
        np.testing.assert_array_equal(back, img)

    def test_grayscale_png_gets_channel(self, tmp_path):
        save_png(tmp_path / "g.png", np.zeros((4, 4)))
        assert load_image(tmp_path / "g.png").shape == (4, 4, 1)


class TestLoadDataset:
    def test_split_rule_two_frames(self, tmp_path):
        tiny_scene(tmp_path, n_cameras=2)
        ds = load_dataset(tmp_path)
        assert ds.test_indices == [0]
        assert ds.train_indices == [1]

    def test_split_covers_disjoint(self, tmp_path):
        tiny_scene(tmp_path, n_cameras=10)
        ds = load_dataset(tmp_path)
        assert sorted(ds.train_indices + ds.test_indices) == list(range(10))
        assert not set(ds.train_indices) & set(ds.test_indices)

    def test_pure_reload(self, tmp_path):
        tiny_scene(tmp_path)
        a = load_dataset(tmp_path)
        b = load_dataset(tmp_path)
        assert len(a.frames) == len(b.frames)
        for fa, fb in zip(a.frames, b.frames):
            np.testing.assert_array_equal(fa.camera.world_to_cam, fb.camera.world_to_cam)
        np.testing.assert_array_equal(a.rgb(0), b.rgb(0))

    def test_missing_thermal_path(self, tmp_path):
        tiny_scene(tmp_path)
        with open(tmp_path / "transforms.json") as fh:
            manifest = json.load(fh)
        del manifest["frames"][1]["thermal_path"]
        with open(tmp_path / "transforms.json", "w") as fh:
            json.dump(manifest, fh)
        with pytest.raises(MissingImage, match="frame 1"):
            load_dataset(tmp_path)

    def test_missing_image_file(self, tmp_path):
        tiny_scene(tmp_path)
        (tmp_path / "images/r_0000_rgb.npy").unlink()
        with pytest.raises(MissingImage, match="frame 0"):
            load_dataset(tmp_path)

    def test_missing_intrinsics(self, tmp_path):
        tiny_scene(tmp_path)
        with open(tmp_path / "transforms.json") as fh:
            manifest = json.load(fh)
        del manifest["fl_x"]
        with open(tmp_path / "transforms.json", "w") as fh:
            json.dump(manifest, fh)
        with pytest.raises(MissingField):
            load_dataset(tmp_path)

    def test_bad_rotation(self, tmp_path):
        tiny_scene(tmp_path)
        with open(tmp_path / "transforms.json") as fh:
            manifest = json.load(fh)
        m = np.asarray(manifest["frames"][0]["transform_matrix"])
        m[:3, 0] = -m[:3, 0]  # reflection
        manifest["frames"][0]["transform_matrix"] = m.tolist()
        with open(tmp_path / "transforms.json", "w") as fh:
            json.dump(manifest, fh)
        with pytest.raises(BadMatrix):
            load_dataset(tmp_path)

    def test_camera_angle_x_fallback(self, tmp_path):
        tiny_scene(tmp_path)
        with open(tmp_path / "transforms.json") as fh:
            manifest = json.load(fh)
        fx = manifest.pop("fl_x")
        manifest.pop("fl_y")
        manifest["camera_angle_x"] = 2 * np.arctan(0.5 * manifest["w"] / fx)
        with open(tmp_path / "transforms.json", "w") as fh:
            json.dump(manifest, fh)
        ds = load_dataset(tmp_path)
        assert ds.frames[0].camera.fx == pytest.approx(fx, rel=1e-12)

    def test_pseudocolored_thermal_inverted(self, tmp_path):
        tiny_scene(tmp_path, n_cameras=2)
        # replace a thermal .npy with an ironbow-colored PNG of known levels
        levels = (np.arange(256)[:16 * 16] % 256).reshape(16, 16) / 255.0
        save_png(tmp_path / "images/r_0001_thermal.png", ironbow_forward(levels))
        with open(tmp_path / "transforms.json") as fh:
            manifest = json.load(fh)
        manifest["frames"][1]["thermal_path"] = "images/r_0001_thermal.png"
        with open(tmp_path / "transforms.json", "w") as fh:
            json.dump(manifest, fh)
        ds = load_dataset(tmp_path)
        np.testing.assert_allclose(ds.thermal(1)[..., 0], levels, atol=1e-12)


class TestInitCloud:
    def test_random_box_invariants(self):
        cloud = init_cloud_random_box(10, seed=1, feature_dim=8, sh_degree=2)
        cloud.validate()
        assert cloud.n == 10
        assert np.all(cloud.thermal_opacity_offsets == 0)
        from scipy.special import expit
        np.testing.assert_allclose(expit(cloud.opacity_logits), 0.1, atol=1e-6)

    def test_from_points_ascii(self, tmp_path):
        path = tmp_path / "pts.ply"
        path.write_text("ply\nformat ascii 1.0\nelement vertex 3\n"
                        "property float x\nproperty float y\nproperty float z\n"
                        "end_header\n0 0 0\n1 2 3\n-1 0.5 2\n")
        cloud = init_cloud_from_points(path, feature_dim=8, sh_degree=1)
        np.testing.assert_allclose(cloud.positions,
                                   [[0, 0, 0], [1, 2, 3], [-1, 0.5, 2]], atol=1e-6)

    def test_from_points_binary(self, tmp_path):
        pts = np.array([[0.5, -1.0, 2.0], [3.0, 0.0, 1.0]], dtype="<f4")
        header = ("ply\nformat binary_little_endian 1.0\nelement vertex 2\n"
                  "property float x\nproperty float y\nproperty float z\nend_header\n")
        path = tmp_path / "pts.ply"
        path.write_bytes(header.encode() + pts.tobytes())
        np.testing.assert_allclose(read_ply_points(path), pts, atol=1e-7)

    def test_from_points_truncated(self, tmp_path):
        path = tmp_path / "bad.ply"
        path.write_text("ply\nformat ascii 1.0\nelement vertex 5\n"
                        "property float x\nproperty float y\nproperty float z\n"
                        "end_header\n0 0 0\n")
        with pytest.raises(FormatError):
            read_ply_points(path)

    def test_perturb_zero_sigma_is_clone(self):
        gt = synth_scene(n_gaussians=5, n_cameras=1, image_size=8, seed=2).cloud
        clone = perturb_cloud(gt, 0.0, seed=9)
        for (_, a), (_, b) in zip(gt.named_params(), clone.named_params()):
            np.testing.assert_allclose(a, b, atol=1e-7)

    def test_perturb_changes_all_groups(self):
        gt = synth_scene(n_gaussians=5, n_cameras=1, image_size=8, seed=2).cloud
        noisy = perturb_cloud(gt, 0.05, seed=9)
        for (name, a), (_, b) in zip(gt.named_params(), noisy.named_params()):
            assert not np.array_equal(a, b), name


class TestSynthScene:
    def test_seed_determinism(self):
        a = synth_scene(n_gaussians=8, n_cameras=2, image_size=16, seed=5)
        b = synth_scene(n_gaussians=8, n_cameras=2, image_size=16, seed=5)
        for ia, ib in zip(a.rgb_images, b.rgb_images):
            assert np.array_equal(ia, ib)
        for ia, ib in zip(a.thermal_images, b.thermal_images):
            assert np.array_equal(ia, ib)

    def test_single_camera(self):
        scene = synth_scene(n_gaussians=4, n_cameras=1, image_size=8, seed=1)
        assert len(scene.rgb_images) == 1 and len(scene.thermal_images) == 1

    def test_gt_self_consistency(self):
        # re-rendering the GT parameters reproduces the stored images exactly,
        # so the data-fit part of the objective is identically zero at GT
        scene = synth_scene(n_gaussians=10, n_cameras=3, image_size=16, seed=7)
        for i, cam in enumerate(scene.cameras):
            out = render_frame(scene.cloud, scene.net, cam, scene.settings)
            assert np.array_equal(out.c_rgb.astype(np.float32), scene.rgb_images[i])
            assert np.array_equal(out.c_thermal.astype(np.float32), scene.thermal_images[i])
            r_rgb, _ = rec_loss(out.c_rgb.astype(np.float32), scene.rgb_images[i], 0.2)
            r_th, _ = rec_loss(out.c_thermal.astype(np.float32), scene.thermal_images[i], 0.2)
            assert r_rgb == 0.0 and r_th == 0.0
            breakdown, _ = total_loss(
                out.c_rgb.astype(np.float32), out.c_thermal.astype(np.float32),
                out.a_f.astype(np.float32), out.a_ft.astype(np.float32),
                scene.rgb_images[i], scene.thermal_images[i],
                LossWeights(lambda_s=0.2, eta=0.5, lambda_rf=0.0, lambda_sm=0.0))
            assert breakdown.total < 1e-10

    def test_roundtrip_through_disk(self, tmp_path):
        scene = tiny_scene(tmp_path, n_cameras=3)
        ds = load_dataset(tmp_path)
        assert len(ds.frames) == 3
        for i in range(3):
            np.testing.assert_array_equal(ds.rgb(i), scene.rgb_images[i])
            np.testing.assert_array_equal(ds.thermal(i), scene.thermal_images[i])
            np.testing.assert_allclose(ds.cameras[i].world_to_cam,
                                       scene.cameras[i].world_to_cam, atol=1e-12)

    def test_decoupled_scene_properties(self):
        scene = synth_scene(n_gaussians=30, n_cameras=2, image_size=24, seed=11,
                            kind="decoupled")
        offsets = scene.cloud.thermal_opacity_offsets
        assert (offsets < -3.0).sum() >= 15  # texture blobs thermally transparent

        # the thermal render carries less high-frequency content than the RGB
        # render (the thermal field may still have strong large-scale gradients)
        from scipy import ndimage

        def hf_energy(img):
            blur = ndimage.uniform_filter(img, size=(5, 5, 1), mode="nearest")
            return float(np.abs(img - blur).mean())

        hf_th = np.mean([hf_energy(t.astype(np.float64)) for t in scene.thermal_images])
        hf_rgb = np.mean([hf_energy(r.mean(axis=2, keepdims=True).astype(np.float64))
                          for r in scene.rgb_images])
        assert hf_th < hf_rgb
