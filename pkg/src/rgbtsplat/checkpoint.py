"""Checkpoint IO: binary PLY vertex payload plus a network sidecar section.

Layout of one file:

    ply                                  ASCII header; comments record the
    format binary_little_endian 1.0      feature dimension and SH degree
    comment feature_dim 8
    comment sh_degree 3
    element vertex N
    property float x ...                 x,y,z, scale_0..2 (log), rot_0..3,
    end_header                           opacity (logit), thermal_opacity_offset,
    <N * P float32 LE>                   f_dc_0..2, f_rest_*, feat_0..d-1
    MODNET01                             sidecar magic
    <u32 manifest length> <manifest JSON> <float32 LE tensors>

The manifest names every network tensor with its shape (in written order)
and carries a free-form config echo. All floats are little-endian float32,
so a cloud/net stored in float32 round-trips bit-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .cloud import GaussianCloud
from .errors import FormatError
from .modnet import ModulationNet

_MAGIC = b"MODNET01"


def _vertex_property_names(sh_coeff_count: int, feature_dim: int) -> list[str]:
    names = ["x", "y", "z", "scale_0", "scale_1", "scale_2",
             "rot_0", "rot_1", "rot_2", "rot_3",
             "opacity", "thermal_opacity_offset",
             "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * (sh_coeff_count - 1))]
    names += [f"feat_{i}" for i in range(feature_dim)]
    return names


def _cloud_to_table(cloud: GaussianCloud) -> np.ndarray:
    n = cloud.n
    k = cloud.sh_coeffs.shape[1]
    cols = [cloud.positions, cloud.log_scales, cloud.rotations,
            cloud.opacity_logits[:, None], cloud.thermal_opacity_offsets[:, None],
            cloud.sh_coeffs[:, 0, :], cloud.sh_coeffs[:, 1:, :].reshape(n, 3 * (k - 1)),
            cloud.features]
    return np.concatenate([np.asarray(c, dtype=np.float32) for c in cols], axis=1)


def _table_to_cloud(table: np.ndarray, sh_coeff_count: int, feature_dim: int,
                    dtype=np.float32) -> GaussianCloud:
    n = table.shape[0]
    k = sh_coeff_count
    at = 0

    def take(width):
        nonlocal at
        block = table[:, at:at + width]
        at += width
        return np.ascontiguousarray(block, dtype=dtype)

    positions = take(3)
    log_scales = take(3)
    rotations = take(4)
    opacity = take(1)[:, 0]
    offsets = take(1)[:, 0]
    f_dc = take(3)
    f_rest = take(3 * (k - 1)).reshape(n, k - 1, 3)
    features = take(feature_dim)
    sh = np.concatenate([f_dc[:, None, :], f_rest], axis=1)
    return GaussianCloud(positions=positions, log_scales=log_scales,
                         rotations=rotations, opacity_logits=opacity,
                         thermal_opacity_offsets=offsets,
                         sh_coeffs=np.ascontiguousarray(sh, dtype=dtype),
                         features=features)


def save_checkpoint(path, cloud: GaussianCloud, net: ModulationNet,
                    config: dict | None = None) -> None:
    if net.feature_dim != cloud.feature_dim:
        raise FormatError("cloud and network disagree on the feature dimension")
    k = cloud.sh_coeffs.shape[1]
    d = cloud.feature_dim
    table = _cloud_to_table(cloud)
    names = _vertex_property_names(k, d)

    header = ["ply", "format binary_little_endian 1.0",
              f"comment feature_dim {d}", f"comment sh_degree {cloud.sh_degree}",
              f"element vertex {cloud.n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")

    tensors = net.named_params()
    manifest = {
        "version": 1,
        "feature_dim": d,
        "sh_degree": cloud.sh_degree,
        "tensors": [{"name": name, "shape": list(p.shape)} for name, p in tensors],
        "config": config or {},
    }
    manifest_bytes = json.dumps(manifest).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(table.astype("<f4").tobytes())
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(manifest_bytes)))
        fh.write(manifest_bytes)
        for _, p in tensors:
            fh.write(np.asarray(p, dtype="<f4").tobytes())


def _build_net(tensor_specs: list, blobs: list, dtype) -> ModulationNet:
    stages: dict[str, dict[int, dict[str, np.ndarray]]] = {}
    for spec, arr in zip(tensor_specs, blobs):
        try:
            stage, idx, kind = spec["name"].rsplit(".", 2)
        except ValueError:
            raise FormatError(f"bad tensor name {spec['name']!r}")
        stages.setdefault(stage, {}).setdefault(int(idx), {})[kind] = arr.astype(dtype)

    def layers(stage):
        if stage not in stages:
            raise FormatError(f"checkpoint missing network stage {stage!r}")
        out = []
        for i in sorted(stages[stage]):
            entry = stages[stage][i]
            if "weight" not in entry or "bias" not in entry:
                raise FormatError(f"stage {stage!r} layer {i} incomplete")
            out.append((entry["weight"], entry["bias"]))
        return out

    film = layers("film")[0]
    net = ModulationNet(shared=layers("shared"), thermal_head=layers("thermal_head"),
                        film=film, rgb_decoder=layers("rgb_decoder"),
                        thermal_decoder=layers("thermal_decoder"))
    net.validate()
    return net


def load_checkpoint(path, expected_feature_dim: int | None = None,
                    dtype=np.float32) -> tuple[GaussianCloud, ModulationNet, dict]:
    """Read a checkpoint; returns (cloud, net, config echo).

    Raises FormatError for bad magic, truncation, inconsistent shapes, or a
    feature-dimension mismatch against expected_feature_dim.
    """
    path = Path(path)
    raw = path.read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a PLY checkpoint")
    header_lines = raw[:end].decode("ascii", "replace").splitlines()
    body = raw[end + len(b"end_header\n"):]

    if len(header_lines) < 2 or "format binary_little_endian 1.0" not in header_lines[1]:
        raise FormatError(f"{path}: unsupported PLY format")
    comments = dict(line.split()[1:3] for line in header_lines
                    if line.startswith("comment "))
    try:
        d = int(comments["feature_dim"])
        sh_degree = int(comments["sh_degree"])
    except (KeyError, ValueError):
        raise FormatError(f"{path}: header comments must record feature_dim and sh_degree")
    n = next((int(line.split()[2]) for line in header_lines
              if line.startswith("element vertex")), None)
    if n is None:
        raise FormatError(f"{path}: no vertex element")
    props = [line.split()[2] for line in header_lines if line.startswith("property ")]
    k = (sh_degree + 1) ** 2
    expected_props = _vertex_property_names(k, d)
    if props != expected_props:
        raise FormatError(f"{path}: vertex properties do not match the expected layout")

    if expected_feature_dim is not None and d != expected_feature_dim:
        raise FormatError(f"{path}: feature_dim mismatch — checkpoint has d={d}, "
                          f"configuration wants d={expected_feature_dim}")

    vertex_bytes = 4 * len(props) * n
    if len(body) < vertex_bytes + len(_MAGIC) + 4:
        raise FormatError(f"{path}: truncated vertex payload")
    table = np.frombuffer(body[:vertex_bytes], dtype="<f4").reshape(n, len(props))
    cloud = _table_to_cloud(table, k, d, dtype=dtype)

    rest = body[vertex_bytes:]
    if rest[:len(_MAGIC)] != _MAGIC:
        raise FormatError(f"{path}: network sidecar magic missing")
    (manifest_len,) = struct.unpack("<I", rest[len(_MAGIC):len(_MAGIC) + 4])
    at = len(_MAGIC) + 4
    if len(rest) < at + manifest_len:
        raise FormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(rest[at:at + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad manifest JSON ({exc})")
    at += manifest_len
    if manifest.get("version") != 1:
        raise FormatError(f"{path}: unsupported checkpoint version")
    if manifest.get("feature_dim") != d:
        raise FormatError(f"{path}: manifest/header feature_dim disagree")

    blobs = []
    for spec in manifest["tensors"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = 4 * count
        if len(rest) < at + nbytes:
            raise FormatError(f"{path}: truncated tensor {spec['name']!r}")
        blobs.append(np.frombuffer(rest[at:at + nbytes], dtype="<f4")
                     .reshape(spec["shape"]))
        at += nbytes
    net = _build_net(manifest["tensors"], blobs, dtype)
    if net.feature_dim != d:
        raise FormatError(f"{path}: network input width disagrees with feature_dim")
    cloud.validate()
    return cloud, net, manifest.get("config", {})
