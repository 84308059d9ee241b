"""Training the feature network from pose supervision alone.

One training step runs scan pair -> network heads -> keypoints -> soft matching ->
weighted pose solve -> pose loss against the ground-truth relative pose, then
back-propagates through every stage by hand and applies one Adam update.
"""

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from core.exceptions import (
    ConfigurationError,
    DataError,
    DegenerateGeometryError,
    NoInformationError,
    TrainingAbortedError,
)
from core.geometry import Se2, rot
from core.grids import Grid2, bilinear_sample, pix2world, sigmoid, world2pix
from keypoints.services import KeypointOptions, keypoint_cells, soft_locations, soft_locations_backward
from matcher.services import PRECISIONS, match_points, match_points_backward
from place_recognition.services import embed, embed_backward, sample_triplets, triplet_loss, triplet_loss_backward
from pose_solver.services import (
    CONDITION_LIMIT,
    WeightedCorrespondences,
    pose_loss,
    pose_loss_backward,
    solve_pose,
    solve_pose_backward,
)

from .network import FeatureNet, backward, forward
from .optim import Adam
from .signals import train_step_finished

logger = logging.getLogger(__name__)

# sampling slack so rotation by 0 does not zero the last row/column
EDGE_SLACK = 1e-9


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    steps: int = 3000
    batch_size: int = 1
    augmentation_range: float = np.pi
    max_consecutive_skips: int = 20
    init_scale: float = 1.0
    encoder_channels: tuple = (4, 4, 8)
    decoder_channels: tuple = (8, 4, 4)
    triplet_steps: int = 0
    temperature: float = 50.0
    block_size: int = 64
    precision: str = "float32"
    alpha: float = 10.0
    condition_limit: float = CONDITION_LIMIT
    margin: float = 0.5
    positives: int = 5
    negatives: int = 5
    positive_radius: float = 5.0
    negative_radius: float = 25.0
    keypoints: KeypointOptions = field(default_factory=KeypointOptions)
    seed: int = 0

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.epsilon > 0):
            raise ConfigurationError("learner.learning_rate and learner.epsilon must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("learner.beta1 and learner.beta2 must lie in [0, 1)")
        if self.steps < 0 or self.batch_size < 1 or self.max_consecutive_skips < 1:
            raise ConfigurationError("learner.steps, batch_size and max_consecutive_skips must be positive")
        if not 0 <= self.augmentation_range <= np.pi:
            raise ConfigurationError(f"learner.augmentation_range must lie in [0, pi], got {self.augmentation_range}")
        if self.precision not in PRECISIONS:
            raise ConfigurationError(
                f"matcher.precision must be one of {', '.join(PRECISIONS)}, got {self.precision!r}"
            )

    @classmethod
    def from_config(cls, config, seed=0):
        """Build from the merged pipeline config dict."""
        learner = config["learner"]
        return cls(
            learning_rate=float(learner["learning_rate"]),
            beta1=float(learner["beta1"]),
            beta2=float(learner["beta2"]),
            epsilon=float(learner["epsilon"]),
            steps=int(learner["steps"]),
            batch_size=int(learner["batch_size"]),
            augmentation_range=float(learner["augmentation_range"]),
            max_consecutive_skips=int(learner["max_consecutive_skips"]),
            init_scale=float(learner["init_scale"]),
            encoder_channels=tuple(int(c) for c in learner["encoder_channels"]),
            decoder_channels=tuple(int(c) for c in learner["decoder_channels"]),
            triplet_steps=int(learner["triplet_steps"]),
            temperature=float(config["matcher"]["temperature"]),
            block_size=int(config["matcher"]["block_size"]),
            precision=str(config["matcher"]["precision"]),
            alpha=float(config["pose_solver"]["alpha"]),
            condition_limit=float(config["pose_solver"]["condition_limit"]),
            margin=float(config["place_recognition"]["margin"]),
            positives=int(config["place_recognition"]["positives"]),
            negatives=int(config["place_recognition"]["negatives"]),
            positive_radius=float(config["place_recognition"]["positive_radius"]),
            negative_radius=float(config["place_recognition"]["negative_radius"]),
            keypoints=KeypointOptions.from_dict(config["keypoints"]),
            seed=int(seed),
        )

    def build_network(self):
        return FeatureNet.initialised(self.seed, self.encoder_channels, self.decoder_channels, self.init_scale)


class TrainingPair(NamedTuple):
    src: Grid2
    dst: Grid2
    relative: Se2  # inverse(T_src) ∘ T_dst


def rotate_scan(scan, angle):
    """Scan content rotated by `angle` about the grid centre, zero outside the source."""
    if angle == 0:
        return scan
    centre = pix2world(((scan.width - 1) / 2.0, (scan.height - 1) / 2.0), scan)
    target_world = pix2world(scan.pixel_coordinates(), scan)
    source_world = (target_world - centre) @ rot(-angle).T + centre
    source_pixels = world2pix(source_world, scan)
    values = bilinear_sample(scan.data, source_pixels).values
    inside = (
        (source_pixels[:, 0] >= -EDGE_SLACK)
        & (source_pixels[:, 0] <= scan.width - 1 + EDGE_SLACK)
        & (source_pixels[:, 1] >= -EDGE_SLACK)
        & (source_pixels[:, 1] <= scan.height - 1 + EDGE_SLACK)
    )
    values[~inside] = 0.0
    return scan.with_data(values.reshape(scan.data.shape))


def augment(pair, angle):
    """Rotate the destination scan and compose the ground truth to match.

    With G the rotation by `angle` about the grid centre, destination points move as
    q' = G q, so the new relative pose is relative ∘ G⁻¹.
    """
    if abs(angle) > np.pi + 1e-12:
        raise DataError(f"augmentation angle must lie in [-pi, pi], got {angle}")
    if angle == 0:
        return pair
    dst = pair.dst
    centre = pix2world(((dst.width - 1) / 2.0, (dst.height - 1) / 2.0), dst)
    G = Se2.from_xytheta(*centre, 0.0) @ Se2.from_xytheta(0.0, 0.0, angle) @ Se2.from_xytheta(*(-centre), 0.0)
    return TrainingPair(pair.src, rotate_scan(dst, angle), pair.relative @ G.inverse())


@dataclass(frozen=True, eq=False)
class ChainResult:
    loss: float
    grad: np.ndarray
    skipped: bool
    weight_sum: float
    estimate: Se2 = None
    reason: str = ""


def _score_maps(head, options):
    if options.use_score_head:
        return sigmoid(head.score_logits.plane)
    return np.ones(head.score_logits.plane.shape)


def _correspond(head_s, head_d, src, dst, cfg, precision="float64"):
    cells = keypoint_cells(head_s, cfg.keypoints)
    if cfg.keypoints.use_location_head:
        p_s = soft_locations(head_s.location_logits, cells)
    else:
        p_s = cells.centres()
    S_s = _score_maps(head_s, cfg.keypoints)
    S_d = _score_maps(head_d, cfg.keypoints)
    match = match_points(
        p_s, head_s.descriptor_map, head_d.descriptor_map, S_s, S_d, cfg.temperature, cfg.block_size, precision
    )
    corr = WeightedCorrespondences(pix2world(p_s, src), pix2world(match.dst_locations, dst), match.weights)
    return cells, p_s, S_s, S_d, match, corr


def estimate_pose(head_src, head_dst, src, dst, cfg):
    """PoseSolution mapping src sensor-frame points into the dst frame.

    Raises NoInformationError or DegenerateGeometryError when the matches carry no pose.
    """
    return solve_pose(_correspond(head_src, head_dst, src, dst, cfg, cfg.precision)[-1], cfg.condition_limit)


def pose_chain(net, pair, cfg, need_grad=True):
    """Pose loss of one scan pair and, optionally, its gradient over the network parameters."""
    head_s, cache_s = forward(net, pair.src)
    head_d, cache_d = forward(net, pair.dst)
    cells, p_s, S_s, S_d, match, corr = _correspond(head_s, head_d, pair.src, pair.dst, cfg)
    weight_sum = float(match.weights.sum())
    try:
        solution = solve_pose(corr, cfg.condition_limit)
    except (NoInformationError, DegenerateGeometryError) as exc:
        return ChainResult(float("nan"), None, True, weight_sum, reason=str(exc))
    if solution.ill_conditioned:
        return ChainResult(float("nan"), None, True, weight_sum, solution.pose, "ill-conditioned pose solve")

    target = pair.relative.inverse()
    loss = pose_loss(solution.pose, target, cfg.alpha).value
    if not need_grad:
        return ChainResult(loss, None, False, weight_sum, solution.pose)

    g_R, g_t = pose_loss_backward(solution.pose, target, cfg.alpha)
    g_corr = solve_pose_backward(corr, g_R, g_t, cfg.condition_limit)
    g_match = match_points_backward(
        p_s,
        head_s.descriptor_map,
        head_d.descriptor_map,
        S_s,
        S_d,
        cfg.temperature,
        pair.dst.resolution * g_corr.dst,
        g_corr.weights,
        cfg.block_size,
    )
    g_p_s = pair.src.resolution * g_corr.src + g_match.src_locations
    g_location = None
    if cfg.keypoints.use_location_head:
        g_location = soft_locations_backward(head_s.location_logits, cells, g_p_s)
    g_score_s = g_score_d = None
    if cfg.keypoints.use_score_head:
        g_score_s = g_match.src_score_map * S_s * (1.0 - S_s)
        g_score_d = g_match.dst_score_map * S_d * (1.0 - S_d)
    grad = backward(net, cache_s, g_location, g_score_s, g_match.src_descriptor_map)
    grad += backward(net, cache_d, None, g_score_d, g_match.dst_descriptor_map)
    return ChainResult(loss, grad, False, weight_sum, solution.pose)


@dataclass(frozen=True)
class TrainStepResult:
    step: int
    loss: float
    skipped: bool
    weight_sum: float


def train_step(net, optimiser, batch, cfg, step=0):
    """One Adam update averaged over the non-degenerate pairs of `batch`."""
    grads, losses, weight_sums = [], [], []
    for pair in batch:
        result = pose_chain(net, pair, cfg)
        weight_sums.append(result.weight_sum)
        if result.skipped:
            logger.warning(f"training step {step}: skipping degenerate pair ({result.reason})")
            continue
        grads.append(result.grad)
        losses.append(result.loss)
    if not grads:
        return TrainStepResult(step, float("nan"), True, float(np.mean(weight_sums)))
    grad = np.mean(grads, axis=0)
    if not np.all(np.isfinite(grad)):
        raise TrainingAbortedError(f"non-finite gradient at training step {step}")
    optimiser.step(net.params, grad)
    return TrainStepResult(step, float(np.mean(losses)), False, float(np.mean(weight_sums)))


class Trainer:
    """Holds the optimiser state and skip accounting across steps."""

    def __init__(self, net, cfg):
        self.net = net
        self.cfg = cfg
        self.optimiser = Adam(net.parameter_count, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
        self.step_count = 0
        self.consecutive_skips = 0
        self.losses = []

    def step(self, batch):
        result = train_step(self.net, self.optimiser, batch, self.cfg, self.step_count)
        self.step_count += 1
        self.losses.append(result.loss)
        if result.skipped:
            self.consecutive_skips += 1
            if self.consecutive_skips >= self.cfg.max_consecutive_skips:
                raise TrainingAbortedError(
                    f"{self.consecutive_skips} consecutive degenerate training steps (last at step {result.step})"
                )
        else:
            self.consecutive_skips = 0
        train_step_finished.send(
            sender=self.__class__,
            step=result.step,
            loss=result.loss,
            skipped=result.skipped,
            weight_sum=result.weight_sum,
            phase="odometry",
        )
        return result

    def run(self, pairs, rng, steps=None):
        """Sample batches (with rotation augmentation) for `steps` updates; returns the loss curve."""
        pairs = list(pairs)
        if not pairs:
            raise DataError("no training pairs")
        steps = self.cfg.steps if steps is None else steps
        for _ in range(steps):
            batch = []
            for index in rng.integers(0, len(pairs), self.cfg.batch_size):
                angle = rng.uniform(-self.cfg.augmentation_range, self.cfg.augmentation_range)
                batch.append(augment(pairs[index], angle))
            self.step(batch)
        return np.array(self.losses)


def finetune_step(net, optimiser, scans, positions, anchor, rng, cfg, step=0):
    """One triplet-loss update of the descriptor layers; None when no triplet can be mined."""
    triplet = sample_triplets(
        positions, anchor, rng, cfg.positives, cfg.negatives, cfg.positive_radius, cfg.negative_radius
    )
    if triplet is None:
        return None
    near, far = triplet
    indices = [anchor, *near, *far]
    heads = {i: forward(net, scans[i]) for i in dict.fromkeys(indices)}
    vectors = {i: embed(heads[i][0].descriptor_map).vector for i in heads}
    a, p, n = vectors[anchor], np.array([vectors[i] for i in near]), np.array([vectors[i] for i in far])
    loss = triplet_loss(a, p, n, cfg.margin)
    g_a, g_p, g_n = triplet_loss_backward(a, p, n, cfg.margin)
    upstream = {i: np.zeros_like(vectors[i]) for i in heads}
    upstream[anchor] += g_a
    for i, g in zip(near, g_p):
        upstream[i] += g
    for i, g in zip(far, g_n):
        upstream[i] += g
    grad = np.zeros_like(net.params)
    for i, (head, cache) in heads.items():
        if np.any(upstream[i]):
            grad += backward(net, cache, grad_descriptors=embed_backward(head.descriptor_map, upstream[i]))
    if np.any(grad):
        optimiser.step(net.params, grad)
    train_step_finished.send(
        sender=finetune_step, step=step, loss=loss, skipped=False, weight_sum=float("nan"), phase="triplet"
    )
    return loss
