"""Training loop, iterative localization, and evaluation metrics.

This module glues the building blocks into the end-to-end procedure:
render a depth image at a hypothesized pose, run both encoders, correlate,
decode pose queries, and supervise every decoder head against the sampled
perturbation.  At inference the same machinery runs up to three times with
progressively finer-trained checkpoints, re-rendering the depth image at
each refined pose.

Conventions fixed here once and relied on everywhere numbers are emitted:
translation errors are reported in centimeters; rotation errors are the
full geodesic angle in degrees, i.e. twice the quaternion half-angle
distance returned by the rotation loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry as G
from .correlation import compute_cost_volume
from .encoders import DEPTH_PREFIX, IMAGE_PREFIX, init_encoder_params
from .encoders import calibrate_encoder_gains, encode_depth, encode_image
from .maprender import (
    PerturbationRange,
    PointMap,
    SyntheticScene,
    mirror_horizontal,
    render_depth,
    sample_perturbation,
)
from .poet import init_poet_params, poet_forward
from .tensor import (
    Tensor,
    load_checkpoint,
    make_rng,
    save_checkpoint,
    smooth_l1,
)

__all__ = [
    "Frame",
    "StageConfig",
    "TrainSettings",
    "LocalizationResult",
    "LocalizationModel",
    "MetricsRow",
    "TrainingDiverged",
    "localization_loss",
    "pose_residual",
    "translation_error_cm",
    "rotation_error_degrees",
    "sample_view_poses",
    "build_frames",
    "train",
    "localize",
    "evaluate",
    "metrics_to_csv",
    "format_metrics_table",
    "make_optimizer",
    "AdamOptimizer",
    "MomentumOptimizer",
]

DEFAULT_SEARCH_RADIUS = 1
METRICS_COLUMNS = (
    "iteration",
    "mean_trans_cm",
    "mean_rot_deg",
    "median_trans_cm",
    "median_rot_deg",
    "std_trans_cm",
    "std_rot_deg",
    "runs",
)

_META_INTRINSICS = "meta.intrinsics"
_META_RADIUS = "meta.search_radius"


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class Frame:
    """One rendered view of the scene with its ground-truth camera pose."""

    frame_id: int
    image: np.ndarray
    pose: G.Pose7D

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError("frame image must be (H, W, 3)")
        self.image = img


@dataclass
class TrainSettings:
    steps: int
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    mirror_probability: float = 0.5
    nq: int = 1
    batch_size: int = 1
    warmup_steps: int = 0
    translation_weight: float = 1.0
    rotation_weight: float = 1.0
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if not 0.0 <= self.mirror_probability <= 1.0:
            raise ValueError("mirror probability must lie in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup steps must be nonnegative")
        if self.translation_weight < 0 or self.rotation_weight < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.translation_weight == 0 and self.rotation_weight == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class StageConfig:
    """One refinement stage: a perturbation range and the network for it.

    ``model`` may be filled directly (tests use stubs with a
    ``predict_delta`` method); otherwise it is loaded lazily from
    ``checkpoint``.
    """

    prange: PerturbationRange
    checkpoint: str | None = None
    model: object = None

    def resolve(self):
        if self.model is None:
            if self.checkpoint is None:
                raise ValueError("stage has neither a model nor a checkpoint")
            self.model = LocalizationModel.load(self.checkpoint)
        return self.model


@dataclass
class LocalizationResult:
    """Pose trajectory of one localization run, with optional errors.

    ``poses[0]`` is the initial pose, followed by one entry per
    refinement iteration (three at most).  Error lists, when ground truth
    was available, align index-for-index with ``poses``.
    """

    poses: list
    translation_errors_cm: list = None
    rotation_errors_deg: list = None

    def __post_init__(self):
        if not 1 <= len(self.poses) <= 4:
            raise ValueError("expected an initial pose plus at most three refinements")
        for errs in (self.translation_errors_cm, self.rotation_errors_deg):
            if errs is not None and len(errs) != len(self.poses):
                raise ValueError("error list must align with the pose list")

    @property
    def iterations(self):
        return len(self.poses) - 1


def pose_residual(estimate: G.Pose7D, ground_truth: G.Pose7D) -> G.Pose7D:
    """Relative transform taking the true pose to the estimate.

    This is the same quantity the network regresses during training, so
    error metrics and training targets share one definition.
    """
    return G.compose_refined_pose(G.pose_inverse(ground_truth), estimate)


def translation_error_cm(estimate: G.Pose7D, ground_truth: G.Pose7D) -> float:
    res = pose_residual(estimate, ground_truth)
    return float(np.linalg.norm(res.t)) * 100.0


def rotation_error_degrees(estimate: G.Pose7D, ground_truth: G.Pose7D) -> float:
    """Full geodesic rotation angle between two poses, in degrees.

    The quaternion distance is a half angle; the reported metric doubles
    it so that a 2 degree residual rotation reads as 2 degrees.
    """
    half = G.quaternion_distance(ground_truth.q, estimate.q)
    return math.degrees(2.0 * half)


def localization_loss(predictions, target: G.Pose7D,
                      translation_weight=1.0, rotation_weight=1.0) -> Tensor:
    """Deep-supervision loss summed over every decoder head.

    Each head contributes a smooth-L1 penalty on the translation (meters)
    plus the quaternion half-angle distance to the target rotation.  The
    default weights add the two terms plainly, which balances them when
    translation errors are around a meter; at smaller scene scales the
    smooth-L1 gradient shrinks with the error while the angular gradient
    does not, so desk-scale training raises ``translation_weight`` to
    restore the balance.
    """
    if not predictions:
        raise ValueError("loss needs at least one head prediction")
    total = None
    for pred in predictions:
        t_term = smooth_l1(pred.t, target.t)
        r_term = G.quaternion_distance_graph(pred.q, target.q)
        if translation_weight != 1.0:
            t_term = t_term * translation_weight
        if rotation_weight != 1.0:
            r_term = r_term * rotation_weight
        term = t_term + r_term
        total = term if total is None else total + term
    return total


class AdamOptimizer:
    """First/second-moment adaptive steps with bias correction."""

    def __init__(self, params, learning_rate=1e-4, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.m = {n: np.zeros_like(params[n].data) for n in sorted(params)}
        self.v = {n: np.zeros_like(params[n].data) for n in sorted(params)}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.step_count += 1
        scale = (
            self.learning_rate
            * math.sqrt(1.0 - self.beta2 ** self.step_count)
            / (1.0 - self.beta1 ** self.step_count)
        )
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= scale * m / (np.sqrt(v) + self.epsilon)


class MomentumOptimizer:
    """Plain gradient descent with heavy-ball momentum 0.9."""

    def __init__(self, params, learning_rate=1e-4, momentum=0.9):
        self.params = params
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity = {n: np.zeros_like(params[n].data) for n in sorted(params)}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad
            if g is None:
                continue
            vel = self.velocity[name]
            vel *= self.momentum
            vel += g
            p.data -= self.learning_rate * vel


def make_optimizer(kind, params, learning_rate):
    if kind == "adam":
        return AdamOptimizer(params, learning_rate=learning_rate)
    if kind == "momentum":
        return MomentumOptimizer(params, learning_rate=learning_rate)
    raise ValueError("unknown optimizer %r (choose adam or momentum)" % (kind,))


class LocalizationModel:
    """All learned parameters of one network instance, plus its camera.

    The parameter dict mixes both encoders and the decoder under distinct
    name prefixes; a checkpoint stores them together with the camera
    intrinsics and the correlation search radius so a saved model is
    self-describing.
    """

    def __init__(self, params, intrinsics: G.CameraIntrinsics,
                 search_radius: int = DEFAULT_SEARCH_RADIUS):
        self.params = params
        self.intrinsics = intrinsics
        self.search_radius = int(search_radius)

    @classmethod
    def initialize(cls, intrinsics: G.CameraIntrinsics, rng,
                   search_radius: int = DEFAULT_SEARCH_RADIUS, dtype=np.float32,
                   probe_image=None, probe_depth=None):
        """Fresh random model; optional probes rescale the encoder init.

        When a representative image and rendered depth are supplied, each
        encoder's layer gains are calibrated on them so activations and
        gradients start at a trainable scale (see
        calibrate_encoder_gains).  Omitting the probes keeps the plain
        fan-in initialization.
        """
        params = {}
        params.update(init_encoder_params(IMAGE_PREFIX, 3, rng, dtype=dtype))
        params.update(init_encoder_params(DEPTH_PREFIX, 1, rng, dtype=dtype))
        channels = (2 * search_radius + 1) ** 2
        params.update(init_poet_params(channels, rng, dtype=dtype))
        if probe_image is not None:
            calibrate_encoder_gains(params, IMAGE_PREFIX, probe_image)
        if probe_depth is not None:
            calibrate_encoder_gains(params, DEPTH_PREFIX, probe_depth)
        return cls(params, intrinsics, search_radius)

    def forward(self, image, depth, nq=1, rng=None, aggregation="queries"):
        """Per-head pose predictions for one image/depth pair."""
        if rng is None:
            rng = make_rng(0)
        fi = encode_image(image, self.params)
        fl = encode_depth(depth, self.params)
        volume = compute_cost_volume(fi, fl, self.search_radius)
        return poet_forward(volume, self.params, nq, rng, aggregation=aggregation)

    def predict_delta(self, image, depth, nq=1, rng=None, aggregation="queries"):
        """Final-head prediction only; earlier heads matter for training."""
        return self.forward(image, depth, nq=nq, rng=rng, aggregation=aggregation)[-1]

    def save(self, path):
        blob = dict(self.params)
        k = self.intrinsics
        blob[_META_INTRINSICS] = np.array(
            [k.fx, k.fy, k.cx, k.cy, k.width, k.height], dtype=np.float32
        )
        blob[_META_RADIUS] = np.array([self.search_radius], dtype=np.float32)
        save_checkpoint(blob, path)

    @classmethod
    def load(cls, path):
        raw = load_checkpoint(path)
        try:
            meta_k = raw.pop(_META_INTRINSICS)
            meta_r = raw.pop(_META_RADIUS)
        except KeyError:
            raise ValueError("%s: checkpoint lacks model metadata" % (path,))
        intrinsics = G.CameraIntrinsics(
            float(meta_k[0]), float(meta_k[1]), float(meta_k[2]), float(meta_k[3]),
            int(meta_k[4]), int(meta_k[5]),
        )
        params = {n: Tensor(a, requires_grad=True) for n, a in raw.items()}
        return cls(params, intrinsics, int(meta_r[0]))


def sample_view_poses(count, prange: PerturbationRange, rng):
    """Ground-truth camera poses: bounded offsets from the canonical view."""
    return [sample_perturbation(prange, rng) for _ in range(count)]


def build_frames(scene: SyntheticScene, poses, k: G.CameraIntrinsics):
    """Render the scene's shaded image at each pose, pairing it with the pose."""
    return [
        Frame(i, scene.render_rgb(pose, k), pose)
        for i, pose in enumerate(poses)
    ]


def train(model: LocalizationModel, frames, point_map: PointMap,
          prange: PerturbationRange, settings: TrainSettings, rng,
          log=None):
    """Run the sampled-perturbation training loop; returns per-step losses.

    Every step draws, in a fixed order: a frame index, a perturbation,
    a mirror coin, then the decoder's query vectors.  The depth image is
    rendered at the pose displaced from ground truth by the inverse
    perturbation, so the perturbation itself is the regression target.
    Raises TrainingDiverged as soon as the loss stops being finite.
    """
    if not frames:
        raise ValueError("training needs at least one frame")
    optimizer = make_optimizer(settings.optimizer, model.params, settings.learning_rate)
    losses = []
    for step in range(settings.steps):
        if settings.warmup_steps:
            optimizer.learning_rate = settings.learning_rate * min(
                1.0, (step + 1) / settings.warmup_steps
            )
        optimizer.zero_grad()
        batch_total = 0.0
        for _ in range(settings.batch_size):
            frame = frames[int(rng.integers(len(frames)))]
            delta = sample_perturbation(prange, rng)
            start = G.compose_refined_pose(frame.pose, G.pose_inverse(delta))
            depth = render_depth(point_map, start, model.intrinsics)
            image, target = frame.image, delta
            coin = float(rng.uniform())
            if coin < settings.mirror_probability:
                image, depth, target, _ = mirror_horizontal(
                    image, depth, target, model.intrinsics
                )
            predictions = model.forward(image, depth, nq=settings.nq, rng=rng)
            loss = localization_loss(
                predictions, target,
                translation_weight=settings.translation_weight,
                rotation_weight=settings.rotation_weight,
            )
            value = float(loss.item())
            if not math.isfinite(value):
                raise TrainingDiverged(
                    "loss became %r at step %d; try a smaller learning rate"
                    % (value, step)
                )
            loss.backward()
            batch_total += value
        if settings.batch_size > 1:
            scale = 1.0 / settings.batch_size
            for p in model.params.values():
                if p.grad is not None:
                    p.grad *= scale
        optimizer.step()
        losses.append(batch_total / settings.batch_size)
        if log is not None and settings.log_every and step % settings.log_every == 0:
            log("step %d loss %.6f" % (step, losses[-1]))
    return losses


def _check_stage_order(stages):
    for earlier, later in zip(stages, stages[1:]):
        a, b = earlier.prange, later.prange
        if b.max_translation > a.max_translation or b.max_rotation > a.max_rotation:
            raise ValueError("stages must come in non-increasing range order")


def localize(image, point_map: PointMap, p0: G.Pose7D, stages, nq=1,
             rng=None, ground_truth=None) -> LocalizationResult:
    """Iteratively refine a pose hypothesis, one pass per stage.

    Each iteration renders the map at the current estimate, predicts the
    residual transform, and composes it on.  With ground truth supplied
    the result carries per-iteration errors, entry 0 being the initial
    pose's own error.
    """
    if not 1 <= len(stages) <= 3:
        raise ValueError("localization runs one to three stages")
    _check_stage_order(stages)
    if rng is None:
        rng = make_rng(0)
    poses = [p0]
    for stage in stages:
        model = stage.resolve()
        depth = render_depth(point_map, poses[-1], model.intrinsics)
        pred = model.predict_delta(image, depth, nq=nq, rng=rng)
        poses.append(G.compose_refined_pose(poses[-1], pred.to_pose7d()))
    t_errs = r_errs = None
    if ground_truth is not None:
        t_errs = [translation_error_cm(p, ground_truth) for p in poses]
        r_errs = [rotation_error_degrees(p, ground_truth) for p in poses]
    return LocalizationResult(poses, t_errs, r_errs)


@dataclass
class MetricsRow:
    iteration: int
    mean_trans_cm: float
    mean_rot_deg: float
    median_trans_cm: float
    median_rot_deg: float
    std_trans_cm: float
    std_rot_deg: float
    runs: int


def evaluate(runs):
    """Aggregate localization errors into per-iteration summary rows.

    ``runs`` is either a flat list of results (treated as one run) or a
    list of runs for repeated-seed studies.  Mean and median pool every
    frame of every run; the std columns hold the sample standard
    deviation (n-1 divisor) of the per-run means, 0.0 for a single run.
    """
    if runs and isinstance(runs[0], LocalizationResult):
        runs = [runs]
    if not runs or any(not run for run in runs):
        raise ValueError("evaluation needs at least one non-empty run")
    width = None
    for run in runs:
        for res in run:
            if res.translation_errors_cm is None:
                raise ValueError("result lacks ground-truth errors")
            if width is None:
                width = len(res.translation_errors_cm)
            elif len(res.translation_errors_cm) != width:
                raise ValueError("runs disagree on iteration count")
    rows = []
    for i in range(width):
        t_runs = [[res.translation_errors_cm[i] for res in run] for run in runs]
        r_runs = [[res.rotation_errors_deg[i] for res in run] for run in runs]
        t_all = np.concatenate(t_runs)
        r_all = np.concatenate(r_runs)
        t_means = np.array([np.mean(chunk) for chunk in t_runs])
        r_means = np.array([np.mean(chunk) for chunk in r_runs])
        if len(runs) > 1:
            t_std = float(np.std(t_means, ddof=1))
            r_std = float(np.std(r_means, ddof=1))
        else:
            t_std = r_std = 0.0
        rows.append(MetricsRow(
            iteration=i,
            mean_trans_cm=float(np.mean(t_all)),
            mean_rot_deg=float(np.mean(r_all)),
            median_trans_cm=float(np.median(t_all)),
            median_rot_deg=float(np.median(r_all)),
            std_trans_cm=t_std,
            std_rot_deg=r_std,
            runs=len(runs),
        ))
    return rows


def metrics_to_csv(rows) -> str:
    lines = [",".join(METRICS_COLUMNS)]
    for row in rows:
        lines.append(
            "%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%d" % (
                row.iteration,
                row.mean_trans_cm, row.mean_rot_deg,
                row.median_trans_cm, row.median_rot_deg,
                row.std_trans_cm, row.std_rot_deg,
                row.runs,
            )
        )
    return "\n".join(lines) + "\n"


def format_metrics_table(rows) -> str:
    """Plain-text table; rotation columns are full angles in degrees."""
    header = "%4s  %14s  %13s  %16s  %15s  %13s  %12s  %4s" % (
        "iter", "mean trans[cm]", "mean rot[deg]",
        "median trans[cm]", "median rot[deg]",
        "std trans[cm]", "std rot[deg]", "runs",
    )
    lines = [header]
    for row in rows:
        lines.append("%4d  %14.3f  %13.3f  %16.3f  %15.3f  %13.3f  %12.3f  %4d" % (
            row.iteration,
            row.mean_trans_cm, row.mean_rot_deg,
            row.median_trans_cm, row.median_rot_deg,
            row.std_trans_cm, row.std_rot_deg,
            row.runs,
        ))
    return "\n".join(lines) + "\n"
