"""Adam training loop over cloud parameters and network weights.

One frame is sampled per iteration (seeded shuffle, reshuffled every
epoch); the loop is: render, total loss, backward, Adam step, quaternion
renormalization. The SH degree unlocks one level per `sh_unlock_every`
iterations and the position learning rate decays exponentially over the
run. Optional opacity pruning drops Gaussians whose opacity stays low in
both modalities (off by default: the cloud size is otherwise fixed, there
is no densification).

A metrics record is appended per iteration as a plain dict; evaluation
fields hold None except at `eval_every` checkpoints and at the end. Runs
are deterministic given the seed; wall_ms is the only nondeterministic
field.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit as sigmoid

from .cloud import GaussianCloud
from .config import TrainConfig
from .errors import DataError, ShapeMismatch
from .losses import psnr, ssim
from .modnet import ModulationNet, init_modulation_net
from .pipeline import RenderSettings, render_and_loss, render_frame


class Adam:
    """Standard bias-corrected Adam over a dict of named parameter arrays.

    Learning rates are resolved per parameter name through the `group_of`
    mapping; `lr_overrides` lets the caller reschedule a group per step.
    """

    def __init__(self, params: dict[str, np.ndarray], lrs: dict[str, float],
                 group_of, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-15):
        self.lrs = dict(lrs)
        self.group_of = group_of
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr_overrides: dict[str, float] | None = None) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeMismatch(f"{name}: grad shape {g.shape} != param {p.shape}")
            group = self.group_of(name)
            lr = (lr_overrides or {}).get(group, self.lrs[group])
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def drop_rows(self, keep: np.ndarray, row_param_names: list[str]) -> None:
        """Remap moment buffers after pruning rows of per-Gaussian tensors."""
        for name in row_param_names:
            self.m[name] = self.m[name][keep]
            self.v[name] = self.v[name][keep]


def _group_of(name: str) -> str:
    return "net" if name.startswith("net.") else name


def _param_dict(cloud: GaussianCloud, net: ModulationNet) -> dict[str, np.ndarray]:
    params = {name: arr for name, arr in cloud.named_params()}
    for name, arr in net.named_params():
        params[f"net.{name}"] = arr
    return params


def _lr_table(config: TrainConfig) -> dict[str, float]:
    return {
        "positions": config.lr_positions,
        "log_scales": config.lr_log_scales,
        "rotations": config.lr_rotations,
        "opacity_logits": config.lr_opacity,
        "thermal_opacity_offsets": config.lr_thermal_offset,
        "sh_coeffs": config.lr_sh,
        "features": config.lr_features,
        "net": config.lr_net,
    }


def position_lr(config: TrainConfig, iteration: int) -> float:
    """Exponential decay from lr_positions to lr_positions_final over the run."""
    if config.iterations <= 1:
        return config.lr_positions
    frac = iteration / max(1, config.iterations - 1)
    ratio = config.lr_positions_final / config.lr_positions
    return float(config.lr_positions * ratio ** frac)


def prune(cloud: GaussianCloud, adam: Adam | None, threshold: float
          ) -> tuple[GaussianCloud, np.ndarray]:
    """Drop Gaussians transparent in both modalities; returns (cloud, keep mask)."""
    if not 0.0 <= threshold < 1.0:
        raise ValueError("prune threshold must be in [0, 1)")
    base = sigmoid(cloud.opacity_logits)
    therm = sigmoid(cloud.opacity_logits + cloud.thermal_opacity_offsets)
    keep = np.maximum(base, therm) >= threshold
    if keep.all():
        return cloud, keep
    kept = GaussianCloud(*(arr[keep] for _, arr in cloud.named_params()))
    if adam is not None:
        adam.drop_rows(keep, [name for name, _ in cloud.named_params()])
    return kept, keep


def active_sh_degree(config: TrainConfig, iteration: int) -> int:
    return min(config.sh_degree, iteration // config.sh_unlock_every)


def evaluate(dataset, indices, cloud: GaussianCloud, net: ModulationNet,
             settings: RenderSettings, sh_degree: int | None = None) -> dict:
    """Mean held-out PSNR/SSIM per modality plus per-view rows."""
    rows = []
    for i in indices:
        out = render_frame(cloud, net, dataset.cameras[i], settings,
                           active_sh_degree=sh_degree)
        rgb_gt = dataset.rgb(i)
        th_gt = dataset.thermal(i)
        row = {"view": int(i),
               "psnr_rgb": psnr(out.c_rgb, rgb_gt),
               "psnr_thermal": psnr(out.c_thermal, th_gt),
               "ssim_rgb": ssim(np.asarray(out.c_rgb, dtype=np.float64), rgb_gt)[0],
               "ssim_thermal": ssim(np.asarray(out.c_thermal, dtype=np.float64), th_gt)[0]}
        rows.append(row)
    mean = {k: float(np.mean([r[k] for r in rows])) for k in
            ("psnr_rgb", "psnr_thermal", "ssim_rgb", "ssim_thermal")} if rows else {}
    return {"per_view": rows, "mean": mean}


@dataclass
class TrainResult:
    cloud: GaussianCloud
    net: ModulationNet
    metrics: list = field(default_factory=list)
    final_eval: dict = field(default_factory=dict)


def _check_dataset(dataset) -> None:
    n = len(dataset.cameras)
    if n == 0:
        raise DataError("dataset has no frames")
    for i in range(n):
        if dataset.rgb(i) is None or dataset.thermal(i) is None:
            raise DataError(f"frame {i} is missing a modality")


def train(dataset, config: TrainConfig, cloud: GaussianCloud | None = None,
          net: ModulationNet | None = None, metrics_path=None,
          quiet: bool = True) -> TrainResult:
    """Optimize (cloud, net) on the dataset's training split.

    When cloud/net are not supplied they are initialized per the config
    (uniform random box, fresh network). Thermal ground truth arrives from
    the dataset already reduced to scalar intensity.
    """
    config.validate()
    _check_dataset(dataset)
    dtype = config.dtype
    rng = np.random.default_rng(config.seed)

    if cloud is None:
        from .datasets import init_cloud_random_box
        cloud = init_cloud_random_box(config.n_gaussians, seed=config.seed,
                                      feature_dim=config.feature_dim,
                                      sh_degree=config.sh_degree, dtype=dtype)
    if net is None:
        net = init_modulation_net(config.feature_dim, hidden=config.net_hidden,
                                  thermal_hidden=config.net_thermal_hidden,
                                  seed=config.seed, dtype=dtype)
    if cloud.dtype != dtype:
        cloud = cloud.astype(dtype)
    if net.dtype != dtype:
        net = net.astype(dtype)

    settings = RenderSettings.from_config(config)
    weights = config.loss_weights
    params = _param_dict(cloud, net)
    adam = Adam(params, _lr_table(config), _group_of,
                beta1=config.adam_beta1, beta2=config.adam_beta2,
                eps=config.adam_eps)

    train_idx = list(dataset.train_indices)
    if not train_idx:
        raise DataError("training split is empty")
    order: list[int] = []

    metrics: list[dict] = []
    log_fh = open(metrics_path, "w") if metrics_path else None
    try:
        for it in range(config.iterations):
            t0 = time.perf_counter()
            if not order:
                order = [train_idx[j] for j in rng.permutation(len(train_idx))]
            frame = order.pop()
            cam = dataset.cameras[frame]
            i_rgb = np.asarray(dataset.rgb(frame), dtype=dtype)
            i_th = np.asarray(dataset.thermal(frame), dtype=dtype)

            deg = active_sh_degree(config, it)
            _, breakdown, grads = render_and_loss(
                cloud, net, cam, i_rgb, i_th, settings, weights,
                include_fea_rgb=not config.disable_fea_rgb,
                include_fea_th=not config.disable_fea_th,
                active_sh_degree=deg)

            grad_dict = {name: arr for name, arr in grads.cloud.named()}
            for name, arr in grads.net.items():
                grad_dict[f"net.{name}"] = arr
            adam.step(params, grad_dict,
                      lr_overrides={"positions": position_lr(config, it)})
            cloud.normalize_rotations()

            if (config.prune_enabled and config.prune_every > 0
                    and (it + 1) % config.prune_every == 0):
                cloud, keep = prune(cloud, adam, config.prune_threshold)
                if not keep.all():
                    for name, arr in cloud.named_params():
                        params[name] = arr

            record = {
                "iter": it,
                "total": float(breakdown.total),
                "l_rec_rgb": float(breakdown.rec_rgb),
                "l_rec_th": float(breakdown.rec_thermal),
                "l_feat": float(breakdown.feature),
                "l_smooth": float(breakdown.smooth),
                "psnr_rgb": None, "psnr_th": None,
                "ssim_rgb": None, "ssim_th": None,
                "n_gaussians": cloud.n,
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            }
            is_eval = (config.eval_every > 0
                       and ((it + 1) % config.eval_every == 0 or it + 1 == config.iterations)
                       and dataset.test_indices)
            if is_eval:
                ev = evaluate(dataset, dataset.test_indices, cloud, net, settings,
                              sh_degree=deg)["mean"]
                record.update(psnr_rgb=ev["psnr_rgb"], psnr_th=ev["psnr_thermal"],
                              ssim_rgb=ev["ssim_rgb"], ssim_th=ev["ssim_thermal"])
                if not quiet:
                    print(f"[{it + 1}/{config.iterations}] loss={breakdown.total:.5f} "
                          f"psnr_rgb={ev['psnr_rgb']:.2f} psnr_th={ev['psnr_thermal']:.2f}")
            metrics.append(record)
            if log_fh:
                import json
                log_fh.write(json.dumps(record) + "\n")
    finally:
        if log_fh:
            log_fh.close()

    final_eval = (evaluate(dataset, dataset.test_indices, cloud, net, settings,
                           sh_degree=active_sh_degree(config, max(config.iterations - 1, 0)))
                  if dataset.test_indices else {})
    return TrainResult(cloud=cloud, net=net, metrics=metrics, final_eval=final_eval)
