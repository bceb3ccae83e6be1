"""Dataset loading, synthetic scene generation and cloud initialization.

On-disk datasets use a transforms.json manifest (documented in the README):
shared pinhole intrinsics, one entry per frame with a camera-to-world
matrix (OpenGL-style: camera looks down -z, y up) plus paths to the RGB
and thermal images. Images may be 8-bit PNG or float .npy; synthetic
scenes write .npy so their ground truth is exact, with PNG previews
alongside. Pseudo-colored thermal images are converted to scalar intensity
through the inverse Ironbow palette at load time; grayscale ones pass
through.

Every 8th frame (index % 8 == 0) is held out for evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.special import expit as sigmoid

from .cloud import Camera, GaussianCloud
from .errors import BadMatrix, FormatError, MissingField, MissingImage
from .ironbow import ironbow_forward, ironbow_inverse
from .modnet import ModulationNet, init_modulation_net
from .pipeline import RenderSettings, render_frame

_GL_FLIP = np.diag([1.0, -1.0, -1.0, 1.0])


# ---------------------------------------------------------------------------
# image IO


def load_image(path) -> np.ndarray:
    """Read a PNG or .npy image as float (H,W,C) in [0,1] (PNG assumed linear)."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path)
        if arr.ndim == 2:
            arr = arr[..., None]
        return np.asarray(arr, dtype=np.float64)
    with Image.open(path) as img:
        arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr[..., :3]


def save_png(path, img: np.ndarray) -> None:
    """Write a float [0,1] image as 8-bit PNG (single- or 3-channel)."""
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = arr[..., 0]
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


# ---------------------------------------------------------------------------
# camera conventions


def w2c_to_nerf_matrix(world_to_cam: np.ndarray) -> np.ndarray:
    """OpenCV-style world-to-camera -> NeRF camera-to-world (OpenGL axes)."""
    c2w = np.linalg.inv(world_to_cam)
    return c2w @ _GL_FLIP


def nerf_matrix_to_w2c(transform: np.ndarray) -> np.ndarray:
    """NeRF camera-to-world (OpenGL axes) -> OpenCV-style world-to-camera."""
    c2w = np.asarray(transform, dtype=np.float64) @ _GL_FLIP
    r = c2w[:3, :3]
    dev = np.abs(r.T @ r - np.eye(3)).max()
    if dev > 1e-6 or np.linalg.det(r) < 0:
        raise BadMatrix(f"transform rotation not a proper rotation (dev {dev:.2e}, "
                        f"det {np.linalg.det(r):.3f})")
    w2c = np.eye(4)
    w2c[:3, :3] = r.T
    w2c[:3, 3] = -r.T @ c2w[:3, 3]
    return w2c


def look_at(position, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at `position` looking at `target`."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(np.asarray(up, dtype=np.float64), forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    w2c = np.eye(4)
    w2c[:3, :3] = np.stack([right, down, forward])
    w2c[:3, 3] = -w2c[:3, :3] @ position
    return w2c


# ---------------------------------------------------------------------------
# on-disk datasets


@dataclass
class MultiModalFrame:
    camera: Camera
    rgb_path: Path
    thermal_path: Path


@dataclass
class RgbtDataset:
    name: str
    frames: list
    train_indices: list
    test_indices: list
    width: int
    height: int
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def cameras(self):
        return [f.camera for f in self.frames]

    def rgb(self, i: int) -> np.ndarray:
        key = ("rgb", i)
        if key not in self._cache:
            self._cache[key] = load_image(self.frames[i].rgb_path)
        return self._cache[key]

    def thermal(self, i: int) -> np.ndarray:
        """Scalar thermal intensity (H,W,1); pseudo-colored inputs are inverted."""
        key = ("th", i)
        if key not in self._cache:
            img = load_image(self.frames[i].thermal_path)
            self._cache[key] = ironbow_inverse(img)
        return self._cache[key]


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise MissingField(f"{where}: missing required field {key!r}")
    return mapping[key]


def load_dataset(root) -> RgbtDataset:
    """Load a transforms.json dataset; every 8th frame goes to the test split."""
    root = Path(root)
    manifest_path = root / "transforms.json"
    if not manifest_path.exists():
        raise MissingField(f"{root}: no transforms.json")
    with open(manifest_path) as fh:
        manifest = json.load(fh)

    width = int(_require(manifest, "w", "transforms.json"))
    height = int(_require(manifest, "h", "transforms.json"))
    if "fl_x" in manifest:
        fx = float(manifest["fl_x"])
        fy = float(manifest.get("fl_y", fx))
        cx = float(manifest.get("cx", width / 2))
        cy = float(manifest.get("cy", height / 2))
    elif "camera_angle_x" in manifest:
        fx = 0.5 * width / np.tan(0.5 * float(manifest["camera_angle_x"]))
        fy = fx
        cx, cy = width / 2, height / 2
    else:
        raise MissingField("transforms.json: need fl_x or camera_angle_x")
    near = float(manifest.get("near", 0.05))
    far = float(manifest.get("far", 100.0))

    frames = []
    for i, fr in enumerate(_require(manifest, "frames", "transforms.json")):
        where = f"frame {i}"
        rgb_path = root / str(_require(fr, "file_path", where))
        transform = _require(fr, "transform_matrix", where)
        if "thermal_path" not in fr:
            raise MissingImage(f"{where}: no thermal_path declared")
        thermal_path = root / str(fr["thermal_path"])
        for p, modality in ((rgb_path, "rgb"), (thermal_path, "thermal")):
            if not p.exists():
                raise MissingImage(f"{where}: {modality} image {p} does not exist")
        w2c = nerf_matrix_to_w2c(np.asarray(transform, dtype=np.float64))
        camera = Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                        world_to_cam=w2c, near=near, far=far)
        camera.validate()
        frames.append(MultiModalFrame(camera=camera, rgb_path=rgb_path,
                                      thermal_path=thermal_path))

    test = [i for i in range(len(frames)) if i % 8 == 0]
    train = [i for i in range(len(frames)) if i % 8 != 0]
    return RgbtDataset(name=manifest.get("name", root.name), frames=frames,
                       train_indices=train, test_indices=test,
                       width=width, height=height)


# ---------------------------------------------------------------------------
# cloud initialization


def _base_cloud(n: int, positions: np.ndarray, feature_dim: int, sh_degree: int,
                rng: np.random.Generator, box_extent: float,
                dtype) -> GaussianCloud:
    k = (sh_degree + 1) ** 2
    cloud = GaussianCloud(
        positions=positions.astype(dtype),
        log_scales=np.full((n, 3), np.log(0.05 * box_extent), dtype=dtype),
        rotations=np.tile(np.array([1.0, 0, 0, 0], dtype=dtype), (n, 1)),
        opacity_logits=np.full(n, np.log(0.1 / 0.9), dtype=dtype),
        thermal_opacity_offsets=np.zeros(n, dtype=dtype),
        sh_coeffs=np.zeros((n, k, 3), dtype=dtype),
        features=rng.normal(0.0, 0.1, (n, feature_dim)).astype(dtype),
    )
    cloud.validate()
    return cloud


def init_cloud_random_box(n: int, seed: int = 0, feature_dim: int = 8,
                          sh_degree: int = 3, box: float = 1.0,
                          dtype=np.float32) -> GaussianCloud:
    """Uniform positions in [-box, box]^3 with dim, low-opacity defaults."""
    rng = np.random.default_rng(seed)
    positions = rng.uniform(-box, box, (n, 3))
    return _base_cloud(n, positions, feature_dim, sh_degree, rng, 2 * box, dtype)


def init_cloud_from_points(path, seed: int = 0, feature_dim: int = 8,
                           sh_degree: int = 3, dtype=np.float32) -> GaussianCloud:
    """Positions from an ASCII or binary-LE PLY point list; rest as random_box."""
    positions = read_ply_points(path)
    rng = np.random.default_rng(seed)
    extent = float(np.ptp(positions, axis=0).max()) or 1.0
    return _base_cloud(positions.shape[0], positions, feature_dim, sh_degree,
                       rng, extent, dtype)


def perturb_cloud(gt: GaussianCloud, sigma: float, seed: int = 0) -> GaussianCloud:
    """Ground truth plus Gaussian noise of scale sigma on every parameter group."""
    rng = np.random.default_rng(seed)
    out = gt.copy()
    for name, arr in out.named_params():
        arr += rng.normal(0.0, sigma, arr.shape).astype(arr.dtype)
    out.normalize_rotations()
    return out


def read_ply_points(path) -> np.ndarray:
    """Minimal PLY reader for x/y/z vertex lists (ascii or binary little-endian)."""
    with open(path, "rb") as fh:
        header = []
        while True:
            line = fh.readline()
            if not line:
                raise FormatError(f"{path}: truncated PLY header")
            header.append(line.decode("ascii", "replace").strip())
            if header[-1] == "end_header":
                break
        if not header or header[0] != "ply":
            raise FormatError(f"{path}: not a PLY file")
        fmt = next((h.split()[1] for h in header if h.startswith("format ")), None)
        n = next((int(h.split()[2]) for h in header if h.startswith("element vertex")), None)
        if fmt is None or n is None:
            raise FormatError(f"{path}: missing format/element lines")
        props = [h.split()[2] for h in header if h.startswith("property ")]
        if props[:3] != ["x", "y", "z"]:
            raise FormatError(f"{path}: vertex properties must start with x y z")
        if fmt == "ascii":
            rows = []
            for _ in range(n):
                parts = fh.readline().split()
                if len(parts) < 3:
                    raise FormatError(f"{path}: truncated ASCII vertex data")
                rows.append([float(v) for v in parts[:3]])
            return np.asarray(rows, dtype=np.float64)
        if fmt == "binary_little_endian":
            raw = fh.read(4 * len(props) * n)
            if len(raw) != 4 * len(props) * n:
                raise FormatError(f"{path}: truncated binary vertex data")
            data = np.frombuffer(raw, dtype="<f4").reshape(n, len(props))
            return data[:, :3].astype(np.float64)
        raise FormatError(f"{path}: unsupported PLY format {fmt!r}")


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SynthScene:
    """In-memory scene: GT parameters plus the exact rendered image pairs."""

    name: str
    cloud: GaussianCloud
    net: ModulationNet
    frames: list            # list of Camera
    rgb_images: list
    thermal_images: list
    train_indices: list
    test_indices: list
    width: int
    height: int
    settings: RenderSettings

    @property
    def cameras(self):
        return self.frames

    def rgb(self, i: int) -> np.ndarray:
        return self.rgb_images[i]

    def thermal(self, i: int) -> np.ndarray:
        return self.thermal_images[i]


def ring_cameras(n_cameras: int, image_size: int, radius: float = 4.0,
                 height: float = 1.2, fov_deg: float = 42.0) -> list:
    f = 0.5 * image_size / np.tan(np.radians(fov_deg) / 2)
    cams = []
    for i in range(n_cameras):
        theta = 2 * np.pi * i / n_cameras
        pos = np.array([radius * np.cos(theta), height * np.sin(2 * theta + 0.4),
                        radius * np.sin(theta)])
        cams.append(Camera(fx=f, fy=f, cx=image_size / 2, cy=image_size / 2,
                           width=image_size, height=image_size,
                           world_to_cam=look_at(pos, (0.0, 0.0, 0.0)),
                           near=0.1, far=20.0))
    return cams


def _default_gt_cloud(rng, n: int, feature_dim: int, sh_degree: int, dtype):
    k = (sh_degree + 1) ** 2
    positions = rng.uniform(-0.9, 0.9, (n, 3))
    quats = rng.normal(0, 1, (n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    colors = rng.uniform(0.1, 0.9, (n, 3))
    features = np.concatenate([
        colors,
        rng.uniform(0.1, 0.9, (n, 1)),               # thermal proxy channel
        rng.normal(0, 0.3, (n, feature_dim - 4)),
    ], axis=1)
    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = (colors - 0.5) / 0.28209479177387814
    if k > 1:
        sh[:, 1:, :] = rng.normal(0, 0.04, (n, k - 1, 3))
    offsets = np.zeros(n)
    decoupled = rng.random(n) < 0.3
    offsets[decoupled] = rng.uniform(1.5, 3.5, decoupled.sum()) * rng.choice(
        [-1.0, 1.0], decoupled.sum())
    opacity = rng.uniform(0.35, 0.95, n)
    cloud = GaussianCloud(
        positions=positions.astype(dtype),
        log_scales=rng.uniform(np.log(0.08), np.log(0.22), (n, 3)).astype(dtype),
        rotations=quats.astype(dtype),
        opacity_logits=np.log(opacity / (1 - opacity)).astype(dtype),
        thermal_opacity_offsets=offsets.astype(dtype),
        sh_coeffs=sh.astype(dtype),
        features=features.astype(dtype),
    )
    return cloud


def _decoupled_gt_cloud(rng, n: int, feature_dim: int, sh_degree: int, dtype):
    """Smooth thermal structure occluded by RGB-only texture blobs.

    A core of large, thermally opaque Gaussians carries a strongly varying
    but spatially smooth thermal proxy. A shell of small, saturated,
    opaque texture blobs surrounds the core: visible (and occluding) in
    RGB from every camera on the ring, but transparent in the thermal pass
    through strongly negative opacity offsets. Because the occlusion
    pattern is view-dependent, a coupled model cannot compensate for it
    with per-pixel feature adjustments.
    """
    k = (sh_degree + 1) ** 2
    n_backdrop = 2
    n_smooth = max(6, n // 4)
    n_tex = n - n_smooth - n_backdrop

    # two huge ambient blobs keep the whole frame thermally covered (no hard
    # sky-to-structure boundary), the core carries the smooth thermal signal,
    # the shell carries RGB-only texture
    pos_backdrop = np.array([[0.0, 0.0, 0.15], [0.0, 0.0, -0.15]])
    pos_smooth = rng.uniform(-0.55, 0.55, (n_smooth, 3))
    shell_dir = rng.normal(0, 1, (n_tex, 3))
    shell_dir /= np.linalg.norm(shell_dir, axis=1, keepdims=True)
    pos_tex = shell_dir * rng.uniform(0.75, 1.1, (n_tex, 1))
    positions = np.concatenate([pos_backdrop, pos_smooth, pos_tex])

    log_scales = np.concatenate([
        np.full((n_backdrop, 3), np.log(1.1)),
        rng.uniform(np.log(0.3), np.log(0.5), (n_smooth, 3)),
        rng.uniform(np.log(0.13), np.log(0.25), (n_tex, 3)),
    ])
    quats = rng.normal(0, 1, (n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    quats[:n_backdrop] = [1.0, 0.0, 0.0, 0.0]

    colors = np.concatenate([
        np.full((n_backdrop, 3), 0.45),
        rng.uniform(0.35, 0.65, (n_smooth, 3)),              # soft base colors
        rng.choice([0.05, 0.95], (n_tex, 3)),                # saturated texture
    ])
    # thermal proxy: real dynamic range but spatially smooth over the core;
    # texture blobs collide with the same value range so pollution cannot be
    # separated channel-wise
    th_smooth = 0.5 + 0.4 * np.sin(1.1 * pos_smooth[:, 0] + 0.8 * pos_smooth[:, 1])
    th_tex = rng.uniform(0.0, 1.0, n_tex)
    thermal_proxy = np.concatenate([np.full(n_backdrop, 0.5), th_smooth, th_tex])[:, None]
    features = np.concatenate([
        colors, thermal_proxy, rng.normal(0, 0.25, (n, feature_dim - 4))], axis=1)
    features[:n_backdrop, 4:] = 0.0

    sh = np.zeros((n, k, 3))
    sh[:, 0, :] = (colors - 0.5) / 0.28209479177387814
    if k > 1:
        sh[:, 1:, :] = rng.normal(0, 0.03, (n, k - 1, 3))
        sh[:n_backdrop, 1:, :] = 0.0

    opacity = np.concatenate([
        np.full(n_backdrop, 0.75),
        rng.uniform(0.45, 0.7, n_smooth),
        rng.uniform(0.92, 0.98, n_tex),
    ])
    offsets = np.concatenate([
        np.zeros(n_backdrop),
        rng.uniform(-0.2, 0.4, n_smooth),
        rng.uniform(-6.0, -4.5, n_tex),              # thermally transparent
    ])
    cloud = GaussianCloud(
        positions=positions.astype(dtype),
        log_scales=log_scales.astype(dtype),
        rotations=quats.astype(dtype),
        opacity_logits=np.log(opacity / (1 - opacity)).astype(dtype),
        thermal_opacity_offsets=offsets.astype(dtype),
        sh_coeffs=sh.astype(dtype),
        features=features.astype(dtype),
    )
    return cloud


def _boost_thermal_contrast(cloud, net, probe_camera, settings,
                            target_std: float = 0.9, max_gain: float = 5000.0) -> None:
    """Rescale the thermal decoder's last layer so its output has real contrast.

    A randomly initialized decoder tends to produce a nearly flat image, which
    makes fitting the thermal branch trivially easy; the decoupling study
    needs a target with structure. The probe render determines the gain, the
    transform is exact (final layer is linear before the sigmoid).
    """
    out = render_frame(cloud, net, probe_camera, settings)
    covered = out.alpha > 0.5
    th = np.clip(out.c_thermal[..., 0][covered], 1e-6, 1 - 1e-6)
    pre = np.log(th / (1 - th))
    center = float(np.mean(pre))
    spread = float(np.std(pre))
    gain = min(max_gain, target_std / max(spread, 1e-6))
    w, b = net.thermal_decoder[-1]
    net.thermal_decoder[-1] = ((gain * w).astype(w.dtype),
                               (gain * (b - center)).astype(b.dtype))


def synth_scene(n_gaussians: int = 50, n_cameras: int = 24, image_size: int = 64,
                seed: int = 0, kind: str = "default", feature_dim: int = 8,
                sh_degree: int = 3, net_hidden: int = 32, thermal_hidden: int = 16,
                dtype=np.float32) -> SynthScene:
    """Sample a GT scene and render its image pairs with the engine itself.

    The ground truth is realizable by construction: training from the GT
    parameters reproduces the images exactly, so convergence failures
    indicate engine bugs rather than model mismatch.
    """
    if n_gaussians < 1:
        raise ValueError("need at least one Gaussian")
    rng = np.random.default_rng(seed)
    if kind == "default":
        cloud = _default_gt_cloud(rng, n_gaussians, feature_dim, sh_degree, dtype)
    elif kind == "decoupled":
        cloud = _decoupled_gt_cloud(rng, n_gaussians, feature_dim, sh_degree, dtype)
    else:
        raise ValueError(f"unknown scene kind {kind!r}")
    cloud.validate()

    net = init_modulation_net(feature_dim, hidden=net_hidden,
                              thermal_hidden=thermal_hidden,
                              seed=int(rng.integers(1 << 31)), dtype=dtype)
    # give the GT conditioning path real weights so modulation carries signal
    net.film = ((rng.normal(0, 0.15, net.film[0].shape)).astype(dtype),
                (net.film[1] + rng.normal(0, 0.1, net.film[1].shape)).astype(dtype))

    cameras = ring_cameras(n_cameras, image_size)
    settings = RenderSettings()

    if kind == "decoupled":
        # a fresh uniform init contracts per-pixel variation layer by layer,
        # which would leave the GT thermal image almost flat; widen the GT
        # weights (variance-preserving) and give the decoder real contrast
        for stage in (net.shared, net.thermal_head, net.rgb_decoder,
                      net.thermal_decoder):
            for i, (w, b) in enumerate(stage):
                stage[i] = ((2.5 * w).astype(dtype), b)
        _boost_thermal_contrast(cloud, net, cameras[0], settings,
                                target_std=0.9, max_gain=30.0)
    rgb_images, thermal_images = [], []
    for cam in cameras:
        out = render_frame(cloud, net, cam, settings)
        rgb_images.append(out.c_rgb.astype(dtype))
        thermal_images.append(out.c_thermal.astype(dtype))

    test = [i for i in range(n_cameras) if i % 8 == 0]
    train = [i for i in range(n_cameras) if i % 8 != 0]
    return SynthScene(name=f"synth-{kind}-{seed}", cloud=cloud, net=net,
                      frames=cameras, rgb_images=rgb_images,
                      thermal_images=thermal_images, train_indices=train,
                      test_indices=test, width=image_size, height=image_size,
                      settings=settings)


def write_scene(scene: SynthScene, out_dir) -> Path:
    """Write a SynthScene as a loadable dataset plus its GT checkpoint.

    Image data goes to .npy so the ground truth stays exact; 8-bit PNG
    previews (thermal recolored through the Ironbow palette) sit alongside.
    """
    from .checkpoint import save_checkpoint

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    cam0 = scene.frames[0]
    frames = []
    for i, cam in enumerate(scene.frames):
        rgb_rel = f"images/r_{i:04d}_rgb.npy"
        th_rel = f"images/r_{i:04d}_thermal.npy"
        np.save(out / rgb_rel, scene.rgb_images[i])
        np.save(out / th_rel, scene.thermal_images[i])
        save_png(out / f"images/r_{i:04d}_rgb.png", scene.rgb_images[i])
        save_png(out / f"images/r_{i:04d}_thermal.png",
                 ironbow_forward(scene.thermal_images[i]))
        frames.append({
            "file_path": rgb_rel,
            "thermal_path": th_rel,
            "transform_matrix": w2c_to_nerf_matrix(cam.world_to_cam).tolist(),
        })
    manifest = {
        "name": scene.name,
        "w": scene.width,
        "h": scene.height,
        "fl_x": cam0.fx, "fl_y": cam0.fy, "cx": cam0.cx, "cy": cam0.cy,
        "near": cam0.near, "far": cam0.far,
        "frames": frames,
    }
    with open(out / "transforms.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    save_checkpoint(out / "gt.ckpt", scene.cloud, scene.net,
                    {"scene": scene.name, "kind": "ground-truth"})
    return out
