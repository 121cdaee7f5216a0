"""Stagewise teacher-forcing training and evaluation.

Stages 1 and 2 train on independently batched transitions (no sequential
unroll), which is what makes them fast; stage 3 optionally fine-tunes by
backpropagating through truncated rollouts of the filter's own sampled
estimates. Per-stage parameter snapshots are kept so earlier-stage
checkpoints can be evaluated.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .baselines import (DiskParticleFilter, MismatchedDiskKf, MismatchedOdomEkf,
                        OracleDiskKf)
from .diffusion import Denoiser, StateNormalizer, ddpm_loss, make_schedule
from .filtering import (COND_DIM, FEATURE_DIM, WINDOW, DiskObservationEncoder,
                        DnDFilter, OdomObservationEncoder, start_frame,
                        stack_windows)
from .nets import Linear, Mlp
from .optim import Adam, TrainingDiverged, clip_global_norm
from .rng import Rng
from .simulators import DISK, ODOM, Episode


@dataclass
class StageSpec:
    stage_id: int
    epochs: int
    batch_size: int  # transitions for stages 1-2, sequences for stage 3
    lr: float
    trunc_window: int = 10  # stage 3 only

    def __post_init__(self):
        if self.stage_id not in (1, 2, 3):
            raise ValueError(f"stage_id must be 1, 2 or 3, got {self.stage_id}")
        if min(self.epochs, self.batch_size, self.trunc_window) < 1 or self.lr < 0:
            raise ValueError("stage counts must be positive and lr >= 0")


def default_stages() -> list[StageSpec]:
    return [StageSpec(1, 30, 128, 1e-3), StageSpec(2, 30, 128, 5e-4)]


def default_stage3() -> StageSpec:
    return StageSpec(3, 10, 16, 1e-4, trunc_window=10)


@dataclass
class TrainConfig:
    task: str = DISK
    k_steps: int = 10
    seed: int = 0
    stages: list[StageSpec] = field(default_factory=default_stages)
    pred_mode: str = "model"  # "none" trains/evaluates the observation-only variant
    val_fraction: float = 0.1
    patience: int = 5
    grad_clip: float = 1.0
    window: int = WINDOW
    feature_dim: int = FEATURE_DIM
    cond_dim: int = COND_DIM
    sensor_hidden: tuple = (128,)
    denoiser_hidden: tuple = (128, 128)
    emb_dim: int = 32
    schedule_kind: str = "linear-few-step"

    def __post_init__(self):
        ids = [s.stage_id for s in self.stages]
        if ids != sorted(ids):
            raise ValueError("stages must be ordered ascending")
        if self.pred_mode not in ("model", "none"):
            raise ValueError("pred_mode must be 'model' or 'none'")


def build_model(cfg: TrainConfig, train_episodes: list[Episode], world_cfg) -> DnDFilter:
    """Initialize a filter: normalizers fitted on the training split,
    parameters drawn from the config seed."""
    task = cfg.task
    state_dim = train_episodes[0].state_dim
    states = np.concatenate([ep.states for ep in train_episodes])
    state_norm = StateNormalizer.fit(states)
    if task == DISK:
        encoder = DiskObservationEncoder(world_cfg.arena, world_cfg.n_slots)
    else:
        obs = np.concatenate([ep.obs for ep in train_episodes])
        encoder = OdomObservationEncoder(StateNormalizer.fit(obs))
    rng = Rng(cfg.seed).substream("init")
    obs_dim = train_episodes[0].obs.shape[1]
    sensor = Mlp([cfg.window * obs_dim, *cfg.sensor_hidden, cfg.feature_dim],
                 rng.substream("sensor"))
    fusion = Linear(cfg.feature_dim + state_dim + 1, cfg.cond_dim,
                    rng.substream("fusion"))
    denoiser = Denoiser(state_dim, cfg.cond_dim, cfg.k_steps,
                        rng.substream("denoiser"), hidden=cfg.denoiser_hidden,
                        emb_dim=cfg.emb_dim)
    schedule = make_schedule(cfg.k_steps, cfg.schedule_kind)
    return DnDFilter(task, encoder, sensor, fusion, denoiser, schedule,
                     state_norm, window=cfg.window, pred_mode=cfg.pred_mode)


# ---------------------------------------------------------------------------
# stage batch construction (teacher forcing)
# ---------------------------------------------------------------------------


def xbar_chain(states: np.ndarray, occluded: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Dead-reckoned stand-in for the prediction at frames 1..T: chained
    across consecutive occlusions, re-anchored on the last visible ground
    truth (frame 0 counts as visible)."""
    t_steps = occluded.shape[0]
    xbar = np.zeros((t_steps, states.shape[1]), dtype=np.float32)
    for t in range(1, t_steps + 1):
        prev_occluded = bool(occluded[t - 2]) if t >= 2 else False
        prev = xbar[t - 2] if prev_occluded else states[t - 1]
        xbar[t - 1] = prev + v
    return xbar


def stage_slots(episode: Episode, stage_id: int, rng: Rng | None,
                use_pred: bool = True):
    """Prediction-slot values and validity flags for frames 1..T.

    Disk: occluded frames get the ground truth (stage 1) or the chained
    dead-reckoned approximation (stage 2); visible frames get the null
    token. Odometry: stage 1 is always null, stage 2 draws ground truth or
    null with equal probability per transition.
    """
    t_steps = episode.seq_len
    dim = episode.state_dim
    slots = np.zeros((t_steps, dim), dtype=np.float32)
    valid = np.zeros((t_steps, 1), dtype=np.float32)
    if not use_pred:
        return slots, valid
    if episode.task == DISK:
        occ = episode.occluded.astype(bool)
        if stage_id == 1:
            fill = episode.states[1:]
        else:
            fill = xbar_chain(episode.states, episode.occluded, episode.constants)
        slots[occ] = fill[occ]
        valid[occ, 0] = 1.0
    else:
        if stage_id >= 2:
            pick = rng.bernoulli(0.5, (t_steps,))
            slots[pick] = episode.states[1:][pick]
            valid[pick, 0] = 1.0
    return slots, valid


@dataclass
class StageData:
    """Flattened per-transition training arrays (network-ready)."""

    windows: np.ndarray       # (N, window*obs_dim) encoded observations
    slots_norm: np.ndarray    # (N, D) normalized prediction slot (0 for null)
    validity: np.ndarray      # (N, 1)
    targets_norm: np.ndarray  # (N, D)
    ep_index: np.ndarray
    frame_index: np.ndarray

    @property
    def n(self) -> int:
        return self.windows.shape[0]


def build_stage_batch(episodes: list[Episode], model: DnDFilter, stage_id: int,
                      rng: Rng | None, use_pred: bool = True) -> StageData:
    """Assemble all transitions of a stage. Strictly causal: the row for
    frame t reads observations up to t and ground truth up to t only."""
    t0 = start_frame(model.task)
    wins, slots, valids, targets, eps_ix, frames = [], [], [], [], [], []
    for ei, ep in enumerate(episodes):
        enc = model.obs_encoder.encode(ep.obs)
        w = stack_windows(enc, model.window)
        s_rng = rng.substream("slots", stage_id, ei) if rng is not None else None
        s, v = stage_slots(ep, stage_id, s_rng, use_pred)
        sn = model.state_norm.normalize(s) * v  # null rows stay zero
        rows = slice(t0 - 1, ep.seq_len)
        wins.append(w[rows])
        slots.append(sn[rows])
        valids.append(v[rows])
        targets.append(model.state_norm.normalize(ep.states[t0:]))
        n_rows = ep.seq_len - t0 + 1
        eps_ix.append(np.full(n_rows, ei))
        frames.append(np.arange(t0, ep.seq_len + 1))
    return StageData(
        np.ascontiguousarray(np.concatenate(wins), dtype=np.float32),
        np.concatenate(slots), np.concatenate(valids), np.concatenate(targets),
        np.concatenate(eps_ix), np.concatenate(frames))


def build_stage1_batch(episodes, model, use_pred=True) -> StageData:
    return build_stage_batch(episodes, model, 1, None, use_pred)


def build_stage2_batch(episodes, model, rng: Rng, use_pred=True) -> StageData:
    return build_stage_batch(episodes, model, 2, rng, use_pred)


# ---------------------------------------------------------------------------
# stage 1-2 training
# ---------------------------------------------------------------------------


def _batch_loss(model: DnDFilter, data: StageData, idx: np.ndarray, rng: Rng) -> ad.Tensor:
    f = model.sensor.forward_t(ad.constant(data.windows[idx]))
    c = model.fuse_t(f, ad.constant(data.slots_norm[idx]),
                     ad.constant(data.validity[idx]))
    return ddpm_loss(model.denoiser, data.targets_norm[idx], c, model.schedule, rng)


def _eval_loss(model: DnDFilter, data: StageData, rng: Rng, chunk: int = 4096) -> float:
    total = 0.0
    for lo in range(0, data.n, chunk):
        idx = np.arange(lo, min(lo + chunk, data.n))
        loss = _batch_loss(model, data, idx, rng)
        total += float(loss.data) * idx.size
    return total / data.n


def train_stage(model: DnDFilter, stage: StageSpec, train_eps: list[Episode],
                val_eps: list[Episode], rng: Rng, use_pred: bool = True,
                grad_clip: float = 1.0, patience: int = 5) -> list[dict]:
    """Transition-batched training of sensor, fusion and denoiser jointly.
    Early-stops when validation loss plateaus; the best-validation snapshot
    is restored at the end."""
    data = build_stage_batch(train_eps, model, stage.stage_id,
                             rng.substream("slots-train"), use_pred)
    val = None
    if val_eps:
        val = build_stage_batch(val_eps, model, stage.stage_id,
                                rng.substream("slots-val"), use_pred)
    opt = Adam(model.params(), lr=stage.lr)
    sgd = rng.substream("sgd", stage.stage_id)
    curve = []
    best_loss, best_snap, bad = np.inf, None, 0
    for epoch in range(stage.epochs):
        perm = sgd.permutation(data.n)
        tot = 0.0
        for lo in range(0, data.n, stage.batch_size):
            idx = perm[lo: lo + stage.batch_size]
            with ad.recording():
                loss = _batch_loss(model, data, idx, sgd)
                if not np.isfinite(loss.data):
                    raise TrainingDiverged(
                        f"stage {stage.stage_id} epoch {epoch}: non-finite loss")
                ad.backward(loss)
            clip_global_norm(opt.params, grad_clip)
            opt.step()
            opt.zero_grad()
            tot += float(loss.data) * idx.size
        train_loss = tot / data.n
        val_loss = (_eval_loss(model, val, rng.substream("val", stage.stage_id, epoch))
                    if val is not None else train_loss)
        curve.append({"stage": stage.stage_id, "epoch": epoch,
                      "train_loss": train_loss, "val_loss": val_loss})
        if val_loss < best_loss - 1e-6:
            best_loss, best_snap, bad = val_loss, model.snapshot(), 0
        else:
            bad += 1
            if bad > patience:
                break
    if best_snap is not None:
        model.restore(best_snap)
    return curve


# ---------------------------------------------------------------------------
# stage 3: truncated backprop through the sampled rollout
# ---------------------------------------------------------------------------


def _sample_chain_t(cond: ad.Tensor, denoiser: Denoiser, sched, rng: Rng,
                    batch: int) -> ad.Tensor:
    """In-graph reverse chain; the per-step noise draws are fixed constants,
    so gradients flow through the affine chain (reparameterization)."""
    x = ad.constant(rng.normal((batch, denoiser.state_dim)))
    for k in range(sched.k_steps, 0, -1):
        j = k - 1
        eps = denoiser.forward_t(x, k, cond)
        x = ad.mul(ad.add(x, ad.mul(eps, float(sched.eps_coef[j]))),
                   float(sched.rescale[j]))
        if k > 1:
            z = rng.normal((batch, denoiser.state_dim))
            x = ad.add(x, ad.constant(float(sched.sigma[j]) * z))
    return x


def train_stage3(model: DnDFilter, stage: StageSpec, episodes: list[Episode],
                 rng: Rng, abort_loss: float | None = None,
                 grad_clip: float = 1.0) -> tuple[list[dict], bool]:
    """Rollout training with gradients truncated to `trunc_window` steps;
    the filter's own sampled estimates feed subsequent predictions.

    Returns (loss curve, aborted). On divergence (epoch loss above 10x the
    stage-2 reference) parameters are restored to the entry snapshot.
    """
    t0 = start_frame(model.task)
    t_steps = episodes[0].seq_len
    w_steps = stage.trunc_window
    opt = Adam(model.params(), lr=stage.lr)
    entry_snap = model.snapshot()
    sgd = rng.substream("sgd3")
    windows_all = [stack_windows(model.obs_encoder.encode(ep.obs), model.window)
                   for ep in episodes]
    curve = []
    for epoch in range(stage.epochs):
        perm = sgd.permutation(len(episodes))
        tot, count = 0.0, 0
        for glo in range(0, len(episodes), stage.batch_size):
            group = perm[glo: glo + stage.batch_size]
            eps_group = [episodes[i] for i in group]
            batch = len(eps_group)
            windows = np.stack([windows_all[i] for i in group])
            targets = np.stack([model.state_norm.normalize(ep.states) for ep in eps_group])
            x_prev = np.stack([ep.states[t0 - 1] for ep in eps_group]).astype(np.float32)
            deltas = None
            if model.task == DISK:
                deltas = [np.stack([ep.states[1] - ep.states[0] for ep in eps_group])]
            for lo in range(t0, t_steps + 1, w_steps):
                hi = min(lo + w_steps - 1, t_steps)
                with ad.recording():
                    x_t = ad.constant(x_prev)
                    deltas_t = ([ad.constant(d) for d in deltas]
                                if deltas is not None else None)
                    terms = []
                    for t in range(lo, hi + 1):
                        if model.task == DISK:
                            acc = deltas_t[0]
                            for d in deltas_t[1:]:
                                acc = ad.add(acc, d)
                            v_hat = ad.mul(acc, 1.0 / len(deltas_t))
                            xhat = model.process.predict_t(x_t, v_hat)
                        else:
                            xhat = model.process.predict_t(x_t)
                        f = model.sensor.forward_t(ad.constant(windows[:, t - 1]))
                        cond = model.fuse_t(f, model.state_norm.normalize_t(xhat),
                                            ad.constant(np.ones((batch, 1), np.float32)))
                        est_norm = _sample_chain_t(cond, model.denoiser,
                                                   model.schedule, sgd, batch)
                        est = model.state_norm.denormalize_t(est_norm)
                        terms.append(ad.row_sse_mean(
                            est_norm, ad.constant(targets[:, t])))
                        if deltas_t is not None:
                            deltas_t.append(ad.sub(est, x_t))
                            if len(deltas_t) > 5:
                                deltas_t.pop(0)
                        x_t = est
                    loss = terms[0]
                    for term in terms[1:]:
                        loss = ad.add(loss, term)
                    loss = ad.mul(loss, 1.0 / len(terms))
                    if not np.isfinite(loss.data):
                        raise TrainingDiverged(f"stage 3 epoch {epoch}: non-finite loss")
                    ad.backward(loss)
                clip_global_norm(opt.params, grad_clip)
                opt.step()
                opt.zero_grad()
                tot += float(loss.data) * len(terms)
                count += len(terms)
                x_prev = x_t.data.copy()
                if deltas_t is not None:
                    deltas = [d.data.copy() for d in deltas_t]
        epoch_loss = tot / count
        curve.append({"stage": 3, "epoch": epoch, "train_loss": epoch_loss,
                      "val_loss": epoch_loss})
        if abort_loss is not None and epoch_loss > 10.0 * abort_loss:
            model.restore(entry_snap)
            return curve, True
    return curve, False


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: DnDFilter
    curves: list[dict]
    stage_params: dict[int, list[np.ndarray]]
    stage3_aborted: bool = False


def train_filter(cfg: TrainConfig, episodes: list[Episode], world_cfg) -> TrainResult:
    """Run the configured stages in order on a train/validation split."""
    rng = Rng(cfg.seed)
    n_val = int(round(cfg.val_fraction * len(episodes)))
    order = rng.substream("split").permutation(len(episodes))
    val_eps = [episodes[i] for i in order[:n_val]]
    train_eps = [episodes[i] for i in order[n_val:]]
    model = build_model(cfg, train_eps, world_cfg)
    use_pred = cfg.pred_mode == "model"
    curves: list[dict] = []
    stage_params: dict[int, list[np.ndarray]] = {}
    aborted = False
    last_loss = None
    for stage in cfg.stages:
        if stage.stage_id in (1, 2):
            curve = train_stage(model, stage, train_eps, val_eps,
                                rng.substream("stage", stage.stage_id),
                                use_pred=use_pred, grad_clip=cfg.grad_clip,
                                patience=cfg.patience)
            last_loss = curve[-1]["val_loss"]
        else:
            if not use_pred:
                raise ValueError("stage 3 applies to the with-prediction variant")
            curve, aborted = train_stage3(model, stage, train_eps,
                                          rng.substream("stage", 3),
                                          abort_loss=last_loss,
                                          grad_clip=cfg.grad_clip)
        curves.extend(curve)
        stage_params[stage.stage_id] = model.snapshot()
    return TrainResult(model, curves, stage_params, aborted)


# ---------------------------------------------------------------------------
# metrics & evaluation
# ---------------------------------------------------------------------------


def disk_mse(est: np.ndarray, gt: np.ndarray) -> float:
    """Mean squared euclidean position error over frames (arena units^2)."""
    err = est.astype(np.float64) - gt.astype(np.float64)
    return float((err**2).sum(axis=1).mean())


def _relative_motion(p: np.ndarray, th: np.ndarray, a: int, b: int):
    rot = np.array([[np.cos(-th[a]), -np.sin(-th[a])],
                    [np.sin(-th[a]), np.cos(-th[a])]])
    dp = rot @ (p[b] - p[a])
    return dp, ad.wrap_angle_np(th[b] - th[a])


def odom_segment_errors(est: np.ndarray, states: np.ndarray,
                        segment: int = 100):
    """Per-segment final-pose error normalized by traveled distance.

    Non-overlapping `segment`-frame chunks; each chunk compares the
    estimated relative motion (from its own start pose) against the ground
    truth relative motion, so errors measure drift accumulated within the
    segment. With one full-episode segment and the start pose given, this
    equals the final-pose error over traveled distance.
    """
    t_steps = est.shape[0]
    full_est = np.vstack([states[0:1], est]).astype(np.float64)
    gt = states.astype(np.float64)
    m_per_m, deg_per_m = [], []
    for a in range(0, t_steps - segment + 1, segment):
        b = a + segment
        dp_est, dth_est = _relative_motion(full_est[:, :2], full_est[:, 2], a, b)
        dp_gt, dth_gt = _relative_motion(gt[:, :2], gt[:, 2], a, b)
        dist = float(np.linalg.norm(np.diff(gt[a + 1: b + 1, :2], axis=0,
                                            prepend=gt[a: a + 1, :2]), axis=1).sum())
        m_per_m.append(float(np.linalg.norm(dp_est - dp_gt)) / dist)
        deg_per_m.append(abs(float(np.degrees(ad.wrap_angle_np(dth_est - dth_gt)))) / dist)
    return m_per_m, deg_per_m


@dataclass
class MetricsReport:
    task: str
    method: str
    n_episodes: int
    values: dict[str, list[float]]

    def mean(self, name: str) -> float:
        return float(np.mean(self.values[name]))

    def std(self, name: str) -> float:
        return float(np.std(self.values[name]))

    def metric_names(self) -> list[str]:
        return ["mse"] if self.task == DISK else ["m_per_m", "deg_per_m"]

    def summary(self) -> dict:
        out = {"task": self.task, "method": self.method, "n_episodes": self.n_episodes}
        for name in self.metric_names():
            out[f"{name}_mean"] = self.mean(name)
            out[f"{name}_std"] = self.std(name)
        return out


def _estimates_to_report(task: str, method: str, episodes, estimates) -> MetricsReport:
    if task == DISK:
        values = {"mse": [disk_mse(est, ep.states[2:])
                          for ep, est in zip(episodes, estimates)]}
    else:
        mpm, dpm = [], []
        for ep, est in zip(episodes, estimates):
            m, d = odom_segment_errors(est, ep.states)
            mpm.extend(m)
            dpm.extend(d)
        values = {"m_per_m": mpm, "deg_per_m": dpm}
    return MetricsReport(task, method, len(episodes), values)


def evaluate_dnd(model: DnDFilter, episodes: list[Episode], rng: Rng,
                 pred_mode: str | None = None, method: str = "dnd") -> MetricsReport:
    if not episodes:
        raise ValueError("evaluate: empty test set")
    est = model.rollout_batch(episodes, rng, pred_mode=pred_mode)
    return _estimates_to_report(model.task, method, episodes, est)


def evaluate_baseline(method: str, episodes: list[Episode], world_cfg,
                      rng: Rng, pf_particles: int = 256) -> MetricsReport:
    if not episodes:
        raise ValueError("evaluate: empty test set")
    task = episodes[0].task
    estimates = []
    if method == "kf-oracle":
        flt = OracleDiskKf(world_cfg)
        estimates = [flt.run(ep) for ep in episodes]
    elif method == "kf-mismatched":
        if task == DISK:
            flt = MismatchedDiskKf(world_cfg)
            estimates = [flt.run(ep) for ep in episodes]
        else:
            flt = MismatchedOdomEkf(world_cfg)
            estimates = [flt.run(ep) for ep in episodes]
    elif method == "pf":
        flt = DiskParticleFilter(world_cfg, pf_particles)
        estimates = [flt.run(ep, rng.substream("episode", i))
                     for i, ep in enumerate(episodes)]
    else:
        raise ValueError(f"unknown baseline {method!r}")
    return _estimates_to_report(task, method, episodes, estimates)


# ---------------------------------------------------------------------------
# throughput
# ---------------------------------------------------------------------------


def measure_throughput(model: DnDFilter, episode: Episode, k_list: list[int],
                       n_steps: int = 1000, backend: str | None = None) -> list[dict]:
    """Single-sequence filter steps per second for each requested K. The
    denoiser weights are reused across K (timing only; accuracy is a
    per-model property)."""
    rows = []
    enc = model.obs_encoder.encode(episode.obs)
    windows = stack_windows(enc, model.window)
    t0 = start_frame(model.task)
    v0 = (episode.states[1] - episode.states[0]) if model.task == DISK else None
    base_sched = model.schedule
    with kernels.use_backend(backend):
        for k in k_list:
            sched = base_sched if k == base_sched.k_steps else make_schedule(k)
            model.schedule = sched
            rng = Rng(1234).substream("bench", k)
            x_prev = episode.states[t0 - 1]
            start = time.perf_counter()
            for i in range(n_steps):
                w = windows[(t0 - 1 + i) % windows.shape[0]]
                x_prev = model.step(x_prev, w, rng, v_hat=v0)
            elapsed = time.perf_counter() - start
            rows.append({"k": k, "backend": kernels.backend_name(),
                         "steps_per_sec": n_steps / elapsed})
    model.schedule = base_sched
    return rows
