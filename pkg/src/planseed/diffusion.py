"""Conditional DDPM over normalized joint trajectories.

The denoiser is a fully connected trunk conditioned on a depth-scan embedding
(strided 1-D convolutions), a problem embedding (start config + goal pose), a
sensor-pose embedding, and a sinusoidal timestep embedding. Training minimizes
a forward-kinematics-weighted MSE between true and predicted noise, upweighted
for expert trajectories that needed the graph fallback. Inference is
deterministic DDIM, optionally with cost-gradient guidance.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .arm import ArmModel, Pose2, fk_pose, normalize, denormalize
from .autodiff import Adam, Tensor, concat, conv1d, linear
from .geometry import DepthScan, Rect, WORKSPACE

CKPT_MAGIC = b"PSCK"


# ----------------------------------------------------------------------------
# Noise schedule
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Beta/alpha-bar tables; index k is 1-based (k in [1, K])."""

    betas: np.ndarray

    @property
    def K(self) -> int:
        return self.betas.shape[0]

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)

    def alpha_bar(self, k) -> np.ndarray:
        return self.alpha_bars[np.asarray(k) - 1]


# With K=100 the classic (1e-4, 2e-2) beta range leaves alpha_bar_K ~ 0.37, far
# from pure noise. The default here gives alpha_bar_K ~ 0.016: below the 0.05
# terminal-signal bound while keeping the 1/sqrt(alpha_bar) reconstruction
# amplification at the first denoising step manageable.
def make_schedule(K: int = 100, beta_start: float = 1e-3, beta_end: float = 8e-2) -> NoiseSchedule:
    if K < 2:
        raise ValueError("need at least 2 diffusion steps")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ValueError("betas must satisfy 0 < beta_start < beta_end < 1")
    return NoiseSchedule(betas=np.linspace(beta_start, beta_end, K))


def forward_noise(x0: np.ndarray, k, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form forward diffusion x_k = sqrt(ab_k) x0 + sqrt(1 - ab_k) eps.

    k may be a scalar or a leading-batch vector matching x0's first axis.
    """
    k_arr = np.asarray(k)
    if np.any(k_arr < 1) or np.any(k_arr > schedule.K):
        raise ValueError(f"k must lie in [1, {schedule.K}]")
    ab = schedule.alpha_bar(k_arr)
    if k_arr.ndim > 0:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# ----------------------------------------------------------------------------
# Architecture
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ArchConfig:
    t_len: int = 32
    dof: int = 7
    n_rays: int = 256
    scan_channels: Tuple[int, ...] = (8, 16, 16)
    scan_kernels: Tuple[int, ...] = (5, 5, 3)
    scan_strides: Tuple[int, ...] = (2, 2, 2)
    scan_embed: int = 64
    problem_embed: int = 32
    pose_embed: int = 32
    t_embed: int = 32
    embed_hidden: int = 64
    hidden: int = 512
    n_hidden: int = 3
    joint_lo: Tuple[float, ...] = (-2.8973,) * 7
    joint_hi: Tuple[float, ...] = (2.8973,) * 7
    bounds_lo: Tuple[float, float] = WORKSPACE.lo
    bounds_hi: Tuple[float, float] = WORKSPACE.hi
    max_range: float = 2.0 * WORKSPACE.diagonal

    @property
    def cond_dim(self) -> int:
        return self.scan_embed + self.problem_embed + self.pose_embed

    @property
    def x_dim(self) -> int:
        return self.t_len * self.dof

    def conv_out_len(self) -> int:
        n = self.n_rays
        for kk, ss in zip(self.scan_kernels, self.scan_strides):
            n = (n - kk) // ss + 1
        return n

    def lo_hi(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.array(self.joint_lo), np.array(self.joint_hi)


def arch_for_arm(arm: ArmModel, bounds: Rect = WORKSPACE, **overrides) -> ArchConfig:
    base = dict(
        dof=arm.dof,
        joint_lo=tuple(arm.lo.tolist()),
        joint_hi=tuple(arm.hi.tolist()),
        bounds_lo=tuple(bounds.lo),
        bounds_hi=tuple(bounds.hi),
        max_range=2.0 * bounds.diagonal,
    )
    base.update(overrides)
    return ArchConfig(**base)


@dataclass
class DenoiserNet:
    config: ArchConfig
    params: Dict[str, Tensor]
    init_seed: int = 0

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())


def _param_shapes(cfg: ArchConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    shapes: List[Tuple[str, Tuple[int, ...]]] = []
    c_prev = 1
    for i, (c, k) in enumerate(zip(cfg.scan_channels, cfg.scan_kernels)):
        shapes.append((f"scan_conv{i}_w", (c, c_prev, k)))
        shapes.append((f"scan_conv{i}_b", (c,)))
        c_prev = c
    flat = cfg.scan_channels[-1] * cfg.conv_out_len()
    shapes.append(("scan_fc_w", (flat, cfg.scan_embed)))
    shapes.append(("scan_fc_b", (cfg.scan_embed,)))
    shapes.append(("prob_fc1_w", (cfg.dof + 4, cfg.embed_hidden)))
    shapes.append(("prob_fc1_b", (cfg.embed_hidden,)))
    shapes.append(("prob_fc2_w", (cfg.embed_hidden, cfg.problem_embed)))
    shapes.append(("prob_fc2_b", (cfg.problem_embed,)))
    shapes.append(("pose_fc1_w", (4, cfg.embed_hidden)))
    shapes.append(("pose_fc1_b", (cfg.embed_hidden,)))
    shapes.append(("pose_fc2_w", (cfg.embed_hidden, cfg.pose_embed)))
    shapes.append(("pose_fc2_b", (cfg.pose_embed,)))
    shapes.append(("t_fc1_w", (cfg.t_embed, cfg.embed_hidden)))
    shapes.append(("t_fc1_b", (cfg.embed_hidden,)))
    shapes.append(("t_fc2_w", (cfg.embed_hidden, cfg.t_embed)))
    shapes.append(("t_fc2_b", (cfg.t_embed,)))
    d_in = cfg.x_dim + cfg.cond_dim + cfg.t_embed
    mod_in = cfg.cond_dim + cfg.t_embed
    for i in range(cfg.n_hidden):
        shapes.append((f"trunk{i}_w", (d_in, cfg.hidden)))
        shapes.append((f"trunk{i}_b", (cfg.hidden,)))
        # feature-wise modulation lets the condition rescale activations, which a
        # pure concatenation trunk can only approximate
        shapes.append((f"trunk{i}_scale_w", (mod_in, cfg.hidden)))
        shapes.append((f"trunk{i}_scale_b", (cfg.hidden,)))
        shapes.append((f"trunk{i}_shift_w", (mod_in, cfg.hidden)))
        shapes.append((f"trunk{i}_shift_b", (cfg.hidden,)))
        d_in = cfg.hidden
    shapes.append(("trunk_out_w", (d_in, cfg.x_dim)))
    shapes.append(("trunk_out_b", (cfg.x_dim,)))
    return shapes


def create_net(cfg: ArchConfig, seed: int = 0) -> DenoiserNet:
    """Uniform fan-in initialization with a fixed seed."""
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    for name, shape in _param_shapes(cfg):
        if name.endswith("_b"):
            params[name] = Tensor(np.zeros(shape), requires_grad=True)
        elif "_scale_" in name or "_shift_" in name:
            # modulation starts as the identity
            params[name] = Tensor(np.zeros(shape), requires_grad=True)
        else:
            fan_in = int(np.prod(shape[:-1])) if name.endswith("fc_w") or "trunk" in name \
                or "fc1" in name or "fc2" in name else int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(max(fan_in, 1))
            params[name] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
    return DenoiserNet(config=cfg, params=params, init_seed=seed)


# ----------------------------------------------------------------------------
# Feature maps (inputs are normalized before entering the network)
# ----------------------------------------------------------------------------

def scan_features(cfg: ArchConfig, depths: np.ndarray) -> np.ndarray:
    return np.asarray(depths, dtype=np.float64) / cfg.max_range


def _norm_pos(cfg: ArchConfig, p) -> np.ndarray:
    lo = np.array(cfg.bounds_lo)
    return (np.asarray(p, dtype=np.float64) - lo) / (np.array(cfg.bounds_hi) - lo)


def problem_features(cfg: ArchConfig, q0: np.ndarray, goal: Pose2) -> np.ndarray:
    lo, hi = cfg.lo_hi()
    q0n = (np.asarray(q0, dtype=np.float64) - lo) / (hi - lo)
    g = _norm_pos(cfg, goal.pos)
    return np.concatenate([q0n, [g[0], g[1], np.cos(goal.theta), np.sin(goal.theta)]])


def pose_features(cfg: ArchConfig, pose) -> np.ndarray:
    p = _norm_pos(cfg, pose.position)
    return np.array([p[0], p[1], np.cos(pose.heading), np.sin(pose.heading)])


def timestep_features(cfg: ArchConfig, k: np.ndarray, K: int) -> np.ndarray:
    """Sinusoidal embedding of diffusion step k (1-based), shape (B, t_embed)."""
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    half = cfg.t_embed // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = k[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# ----------------------------------------------------------------------------
# Forward graphs
# ----------------------------------------------------------------------------

def _mlp2(p: Dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    h = linear(x, p[f"{prefix}_fc1_w"], p[f"{prefix}_fc1_b"]).silu()
    return linear(h, p[f"{prefix}_fc2_w"], p[f"{prefix}_fc2_b"])


def condition_graph(net: DenoiserNet, scans: np.ndarray, prob_feats: np.ndarray,
                    pose_feats: np.ndarray) -> Tensor:
    """(B, n_rays), (B, dof+4), (B, 4) -> (B, cond_dim) embedding tensor."""
    cfg, p = net.config, net.params
    h = Tensor(scans.reshape(scans.shape[0], 1, cfg.n_rays))
    for i, stride in enumerate(cfg.scan_strides):
        h = conv1d(h, p[f"scan_conv{i}_w"], p[f"scan_conv{i}_b"], stride=stride).silu()
    h = h.reshape(scans.shape[0], cfg.scan_channels[-1] * cfg.conv_out_len())
    scan_emb = linear(h, p["scan_fc_w"], p["scan_fc_b"])
    prob_emb = _mlp2(p, "prob", Tensor(prob_feats))
    pose_emb = _mlp2(p, "pose", Tensor(pose_feats))
    return concat([scan_emb, prob_emb, pose_emb], axis=-1)


def encode_condition(net: DenoiserNet, scan: DepthScan, q0: np.ndarray, goal: Pose2) -> np.ndarray:
    """Deterministic condition embedding of one observation/problem pair."""
    cfg = net.config
    out = condition_graph(
        net,
        scan_features(cfg, scan.depths)[None, :],
        problem_features(cfg, q0, goal)[None, :],
        pose_features(cfg, scan.pose)[None, :],
    )
    return out.data[0]


def predict_noise_graph(net: DenoiserNet, x: Tensor, k: np.ndarray, cond: Tensor,
                        K: int) -> Tensor:
    cfg, p = net.config, net.params
    b = x.data.shape[0]
    t_emb = _mlp2(p, "t", Tensor(timestep_features(cfg, k, K)))
    mod = concat([cond, t_emb], axis=-1)
    h = concat([x.reshape(b, cfg.x_dim), cond, t_emb], axis=-1)
    for i in range(cfg.n_hidden):
        h = linear(h, p[f"trunk{i}_w"], p[f"trunk{i}_b"]).silu()
        scale = linear(mod, p[f"trunk{i}_scale_w"], p[f"trunk{i}_scale_b"])
        shift = linear(mod, p[f"trunk{i}_shift_w"], p[f"trunk{i}_shift_b"])
        h = h * (1.0 + scale) + shift
    out = linear(h, p["trunk_out_w"], p["trunk_out_b"])
    return out.reshape(b, cfg.t_len, cfg.dof)


def predict_noise(net: DenoiserNet, x_k: np.ndarray, k, cond: np.ndarray,
                  K: int = 100) -> np.ndarray:
    """Deterministic forward pass. x_k (T,D) or (B,T,D); cond (cond_dim,) or (B, cond_dim)."""
    x = np.asarray(x_k, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    c = np.atleast_2d(np.asarray(cond, dtype=np.float64))
    if c.shape[0] == 1 and x.shape[0] > 1:
        c = np.broadcast_to(c, (x.shape[0], c.shape[1]))
    ks = np.full(x.shape[0], k) if np.ndim(k) == 0 else np.asarray(k)
    out = predict_noise_graph(net, Tensor(x), ks, Tensor(np.ascontiguousarray(c)), K).data
    return out[0] if single else out


# ----------------------------------------------------------------------------
# FK-weighted loss
# ----------------------------------------------------------------------------

def fk_points_graph(cfg: ArchConfig, u: Tensor, lengths: np.ndarray, base: np.ndarray,
                    fracs: np.ndarray) -> Tuple[Tensor, Tensor]:
    """Collision-point coordinates of normalized joint tensors u (B,T,D).

    u passes through the joint denormalization map before the FK chain.
    Returns (px, py) of shape (B,T,D,M).
    """
    lo, hi = cfg.lo_hi()
    q = Tensor(lo) + u * Tensor(hi - lo)
    th = q.cumsum(axis=-1)
    c = th.cos()
    s = th.sin()
    lx = c * Tensor(lengths)
    ly = s * Tensor(lengths)
    pre_x = lx.cumsum(axis=-1) - lx
    pre_y = ly.cumsum(axis=-1) - ly
    b, t, d = u.data.shape
    fr = Tensor(fracs.reshape(1, 1, 1, -1))
    px = Tensor(base[0]) + pre_x.reshape(b, t, d, 1) + lx.reshape(b, t, d, 1) * fr
    py = Tensor(base[1]) + pre_y.reshape(b, t, d, 1) + ly.reshape(b, t, d, 1) * fr
    return px, py


def fk_weighted_mse(cfg: ArchConfig, arm: ArmModel, eps_true: np.ndarray, eps_pred: Tensor,
                    weights: np.ndarray, points_per_link: Optional[int] = None) -> Tensor:
    """Mean squared distance between the FK point sets of true and predicted noise,
    scaled per sample by (1 + alpha * graph_used)."""
    m = points_per_link or arm.points_per_link
    fracs = (np.arange(m) + 0.5) / m
    px_t, py_t = fk_points_graph(cfg, Tensor(eps_true), arm.lengths, arm.base, fracs)
    px_p, py_p = fk_points_graph(cfg, eps_pred, arm.lengths, arm.base, fracs)
    b, t, d = eps_true.shape
    n_pts = t * d * m
    dx = (px_p - Tensor(px_t.data)).square().sum(axis=(1, 2, 3))
    dy = (py_p - Tensor(py_t.data)).square().sum(axis=(1, 2, 3))
    per_sample = (dx + dy) * (1.0 / n_pts)
    return (per_sample * Tensor(weights)).mean()


def plain_weighted_mse(eps_true: np.ndarray, eps_pred: Tensor, weights: np.ndarray) -> Tensor:
    b = eps_true.shape[0]
    n = eps_true[0].size
    per_sample = (eps_pred - Tensor(eps_true)).square().sum(axis=(1, 2)) * (1.0 / n)
    return (per_sample * Tensor(weights)).mean()


# ----------------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 256
    lr: float = 3e-4
    lr_final: Optional[float] = None  # exponential decay target, None keeps lr constant
    epochs: int = 400
    alpha_loss: float = 4.0
    seed: int = 0
    fk_points_per_link: Optional[int] = None
    augment_reversal: bool = True
    fk_loss_target: str = "noise"  # or "x0_reconstruction"
    # strength of the plain noise-MSE term stabilizing the FK loss; the FK
    # point-set comparison alone is flat far from the solution because
    # denormalized noise wraps multiple turns through the joint chain
    mse_stabilizer: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.alpha_loss < 0:
            raise ValueError("alpha_loss must be >= 0")
        if self.fk_loss_target not in ("noise", "x0_reconstruction"):
            raise ValueError(f"unknown fk_loss_target {self.fk_loss_target!r}")


@dataclass
class _Sample:
    """Record preprocessed into both trajectory directions.

    Reversal swaps the two endpoint poses and flips the rows, which is an exact
    involution: the reversed trajectory ends at the start configuration whose
    pose becomes the reversed goal.
    """

    traj_fwd: np.ndarray          # normalized (T, D)
    prob_fwd: np.ndarray          # problem features, forward direction
    prob_rev: np.ndarray
    scans: np.ndarray             # (n_scans, n_rays) normalized depths
    poses: np.ndarray             # (n_scans, 4) sensor pose features
    weight: float


def prepare_samples(cfg: ArchConfig, arm: ArmModel, records: Sequence, alpha_loss: float) -> List[_Sample]:
    out = []
    for rec in records:
        traj = np.asarray(rec.expert, dtype=np.float64)
        q0 = rec.problem.q_start
        goal = rec.problem.goal
        start_pose = fk_pose(arm, q0)
        out.append(_Sample(
            traj_fwd=normalize(arm, traj),
            prob_fwd=problem_features(cfg, q0, goal),
            prob_rev=problem_features(cfg, traj[-1], start_pose),
            scans=np.stack([scan_features(cfg, s.depths) for s in rec.scans]),
            poses=np.stack([pose_features(cfg, s.pose) for s in rec.scans]),
            weight=1.0 + alpha_loss * float(rec.graph_used),
        ))
    return out


def _batch_loss(net: DenoiserNet, arm: ArmModel, schedule: NoiseSchedule, cfg: TrainConfig,
                trajs: np.ndarray, probs: np.ndarray, scans: np.ndarray, poses: np.ndarray,
                weights: np.ndarray, ks: np.ndarray, eps: np.ndarray) -> Tensor:
    x_k = forward_noise(trajs, ks, eps, schedule)
    cond = condition_graph(net, scans, probs, poses)
    eps_hat = predict_noise_graph(net, Tensor(x_k), ks, cond, schedule.K)
    if cfg.fk_loss_target == "noise":
        loss = fk_weighted_mse(net.config, arm, eps, eps_hat, weights, cfg.fk_points_per_link)
    else:
        # x0_reconstruction: compare FK of the denoised trajectory estimates instead
        ab = schedule.alpha_bar(ks).reshape(-1, 1, 1)
        x0_hat = (Tensor(x_k) - eps_hat * Tensor(np.sqrt(1 - ab))) * Tensor(1.0 / np.sqrt(ab))
        loss = fk_weighted_mse(net.config, arm, trajs, x0_hat, weights, cfg.fk_points_per_link)
    if cfg.mse_stabilizer > 0.0:
        loss = loss + plain_weighted_mse(eps, eps_hat, weights) * cfg.mse_stabilizer
    return loss


def loss_eq2(arm: ArmModel, net: DenoiserNet, record, k: int, eps: np.ndarray,
             alpha_loss: float = 4.0, schedule: Optional[NoiseSchedule] = None,
             scan_index: int = 0) -> Tuple[float, Dict[str, np.ndarray]]:
    """Single-record training loss and its parameter gradients."""
    if len(record.scans) < 1:
        raise ValueError("record carries no depth scan")
    schedule = schedule or make_schedule()
    cfg = TrainConfig(batch_size=1, alpha_loss=alpha_loss)
    sample = prepare_samples(net.config, arm, [record], alpha_loss)[0]
    for p in net.params.values():
        p.grad = None
    loss = _batch_loss(
        net, arm, schedule, cfg,
        sample.traj_fwd[None], sample.prob_fwd[None],
        sample.scans[scan_index][None], sample.poses[scan_index][None],
        np.array([sample.weight]), np.array([k]), np.asarray(eps)[None],
    )
    loss.backward()
    grads = {name: p.grad.copy() for name, p in net.params.items()}
    return float(loss.data), grads


def train(net: DenoiserNet, records: Sequence, schedule: NoiseSchedule, arm: ArmModel,
          cfg: TrainConfig, log_every: int = 0,
          callback: Optional[Callable[[int, float], None]] = None) -> List[float]:
    """Adam training per the sampling recipe; returns per-epoch mean losses.

    Each step draws records iid, picks one scan per record uniformly, reverses
    direction with probability 1/2, then regresses the injected noise.
    """
    if len(records) == 0:
        raise ValueError("training needs a nonempty dataset")
    samples = prepare_samples(net.config, arm, records, cfg.alpha_loss)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.params, lr=cfg.lr)
    t_len, dof = net.config.t_len, net.config.dof
    steps_per_epoch = max(1, len(samples) // cfg.batch_size)
    curve = []
    step = 0
    for epoch in range(cfg.epochs):
        if cfg.lr_final is not None and cfg.epochs > 1:
            opt.lr = cfg.lr * (cfg.lr_final / cfg.lr) ** (epoch / (cfg.epochs - 1))
        epoch_losses = []
        for _ in range(steps_per_epoch):
            idx = rng.integers(0, len(samples), size=cfg.batch_size)
            trajs = np.empty((cfg.batch_size, t_len, dof))
            probs = np.empty((cfg.batch_size, dof + 4))
            scans = np.empty((cfg.batch_size, net.config.n_rays))
            poses = np.empty((cfg.batch_size, 4))
            weights = np.empty(cfg.batch_size)
            for i, j in enumerate(idx):
                s = samples[j]
                si = rng.integers(0, s.scans.shape[0])
                reverse = cfg.augment_reversal and rng.random() < 0.5
                trajs[i] = s.traj_fwd[::-1] if reverse else s.traj_fwd
                probs[i] = s.prob_rev if reverse else s.prob_fwd
                scans[i] = s.scans[si]
                poses[i] = s.poses[si]
                weights[i] = s.weight
            ks = rng.integers(1, schedule.K + 1, size=cfg.batch_size)
            eps = rng.standard_normal((cfg.batch_size, t_len, dof))
            opt.zero_grad()
            loss = _batch_loss(net, arm, schedule, cfg, trajs, probs, scans, poses,
                               weights, ks, eps)
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.data))
            step += 1
            if log_every and step % log_every == 0:
                print(f"step {step}: loss {epoch_losses[-1]:.6f}")
        curve.append(float(np.mean(epoch_losses)))
        if callback is not None:
            callback(epoch, curve[-1])
    return curve


def reverse_sample(traj_norm: np.ndarray, prob_fwd: np.ndarray, prob_rev: np.ndarray):
    """Direction flip used by the augmentation; applying it twice is the identity."""
    return traj_norm[::-1].copy(), prob_rev, prob_fwd


# ----------------------------------------------------------------------------
# DDIM sampling
# ----------------------------------------------------------------------------

def ddim_steps(K: int, n_steps: int) -> np.ndarray:
    """Evenly spaced denoising indices from K down to 1, inclusive."""
    if n_steps > K:
        raise ValueError("n_steps cannot exceed K")
    if n_steps == 1:
        return np.array([K], dtype=np.int64)
    return np.round(np.linspace(K, 1, n_steps)).astype(np.int64)


# joint trajectories are normalized to [0, 1]; clipping the running denoised
# estimate to a slightly wider band bounds the 1/sqrt(alpha_bar) error
# amplification of the first denoising steps
X0_CLIP = (-0.1, 1.1)


def _ddim_core(net: DenoiserNet, schedule: NoiseSchedule, cond: np.ndarray,
               x_start: np.ndarray, n_steps: int,
               guide_fn=None, x0_clip: Tuple[float, float] = X0_CLIP) -> np.ndarray:
    """Deterministic (eta = 0) DDIM over the evenly spaced sub-schedule.

    guide_fn(step_index, k, x0_hat) may modify the running denoised estimate;
    the final step never sees guidance. Returns the last x0 reconstruction.
    """
    ks = ddim_steps(schedule.K, n_steps)
    x = np.asarray(x_start, dtype=np.float64).copy()
    x0_hat = x
    for i, k in enumerate(ks):
        ab = float(schedule.alpha_bar(int(k)))
        eps_hat = predict_noise(net, x, int(k), cond, schedule.K)
        x0_hat = np.clip((x - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab),
                         x0_clip[0], x0_clip[1])
        if guide_fn is not None and i + 1 < len(ks):
            x0_hat = guide_fn(i, int(k), x0_hat)
        if i + 1 < len(ks):
            ab_next = float(schedule.alpha_bar(int(ks[i + 1])))
            x = np.sqrt(ab_next) * x0_hat + np.sqrt(1.0 - ab_next) * eps_hat
    return x0_hat


def ddim_sample(net: DenoiserNet, schedule: NoiseSchedule, cond: np.ndarray,
                x_K: np.ndarray, q0: np.ndarray, arm: ArmModel,
                n_steps: int = 5) -> np.ndarray:
    """Denoise x_K into a physical-unit trajectory; row 0 is pinned to q0.

    Accepts (T,D) or a batch (B,T,D) sharing one condition.
    """
    x0 = _ddim_core(net, schedule, cond, x_K, n_steps)
    traj = denormalize(arm, x0)
    traj[..., 0, :] = np.asarray(q0, dtype=np.float64)
    return traj


def guided_ddim_sample(
    net: DenoiserNet,
    schedule: NoiseSchedule,
    cond: np.ndarray,
    x_K: np.ndarray,
    q0: np.ndarray,
    arm: ArmModel,
    cost_fn: Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]],
    n_steps: int = 5,
    k_guide_frac: float = 0.6,
    n_grad: int = 20,
    alpha_guide: float = 1.0,
    max_halvings: int = 8,
) -> Tuple[np.ndarray, List[Tuple[int, bool]]]:
    """DDIM with cost-gradient descent on the intermediate denoised estimates.

    Guidance applies only to sub-steps whose underlying index k is below
    k_guide_frac * K and never to the final step. Each of the n_grad descent
    steps starts at step size alpha_guide and backtracks (halving) until the
    cost decreases, so guidance cannot worsen a seed estimate it touches.
    cost_fn maps physical trajectories (B,T,D) -> (costs (B,), grads (B,T,D)).
    Returns (trajectories, per-step (k, guided) log).
    """
    lo, hi = net.config.lo_hi()
    span = hi - lo
    k_guide = k_guide_frac * schedule.K
    log: List[Tuple[int, bool]] = []

    def guide(i, k, x0_hat):
        guided = k < k_guide and alpha_guide != 0.0
        log.append((k, guided))
        if not guided:
            return x0_hat
        batched = x0_hat.ndim == 3
        x = x0_hat if batched else x0_hat[None]
        for _ in range(n_grad):
            costs, grads = cost_fn(denormalize(arm, x))
            g_norm = grads * span  # chain rule through the denormalization map
            step = np.full(x.shape[0], alpha_guide)
            remaining = np.ones(x.shape[0], dtype=bool)
            for _ in range(max_halvings):
                if not remaining.any():
                    break
                cand = x - step[:, None, None] * g_norm
                new_costs, _ = cost_fn(denormalize(arm, cand))
                improved = remaining & (new_costs < costs)
                x = np.where(improved[:, None, None], cand, x)
                remaining = remaining & ~improved
                step = np.where(remaining, step * 0.5, step)
        return x if batched else x[0]

    x0 = _ddim_core(net, schedule, cond, x_K, n_steps, guide_fn=guide)
    # the final step is never guided; record it for instrumentation
    log.append((int(ddim_steps(schedule.K, n_steps)[-1]), False))
    traj = denormalize(arm, x0)
    traj[..., 0, :] = np.asarray(q0, dtype=np.float64)
    return traj, log


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------

def save_checkpoint(path, net: DenoiserNet, schedule: NoiseSchedule, meta: Optional[dict] = None):
    """JSON header (architecture, schedule, metadata) + little-endian float64 blob."""
    names = [n for n, _ in _param_shapes(net.config)]
    header = {
        "format": 1,
        "arch": asdict(net.config),
        "init_seed": net.init_seed,
        "schedule": {"betas": net_list(schedule.betas)},
        "meta": meta or {},
        "params": [{"name": n, "shape": list(net.params[n].data.shape)} for n in names],
    }
    blob = b"".join(np.ascontiguousarray(net.params[n].data, dtype="<f8").tobytes()
                    for n in names)
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        f.write(blob)


def net_list(a: np.ndarray) -> list:
    return [float(x) for x in np.asarray(a).ravel()]


def load_checkpoint(path) -> Tuple[DenoiserNet, NoiseSchedule, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        if f.read(4) != CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        blob = f.read()
    arch = header["arch"]
    for key in ("scan_channels", "scan_kernels", "scan_strides", "joint_lo", "joint_hi",
                "bounds_lo", "bounds_hi"):
        arch[key] = tuple(arch[key])
    cfg = ArchConfig(**arch)
    params: Dict[str, Tensor] = {}
    off = 0
    for spec in header["params"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        params[spec["name"]] = Tensor(arr, requires_grad=True)
        off += n * 8
    if off != len(blob):
        raise ValueError(f"checkpoint blob size mismatch in {path}")
    net = DenoiserNet(config=cfg, params=params, init_seed=header.get("init_seed", 0))
    schedule = NoiseSchedule(betas=np.array(header["schedule"]["betas"]))
    return net, schedule, header.get("meta", {})
