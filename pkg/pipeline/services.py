"""What the management commands do, without the command-line plumbing.

Each function takes a RunContext (merged config, hash, per-module seeds) and returns
plain values; the commands own file names and user output.
"""

import logging
import queue
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from core.exceptions import ConfigurationError, DataError, DegenerateGeometryError, NoInformationError
from core.geometry import Se2
from evaluation.services import ClosureProposal
from learner.checkpoint import load_checkpoint
from learner.network import forward
from learner.optim import Adam
from learner.services import TrainConfig, Trainer, TrainingPair, estimate_pose, finetune_step
from keypoints.services import extract_keypoints
from place_recognition.services import (
    EmbeddingIndex,
    PlaceRecognitionOptions,
    calibrate_threshold,
    embed,
    embed_keypoints,
)
from pose_graph.services import PoseGraphOptions, PoseGraphStore, information_from_weight, optimise
from pose_solver.services import solve_pose
from simulator.services import (
    SimulatorOptions,
    Trajectory,
    generate_trajectory,
    make_dataset,
    oracle_correspondences,
)
from simulator.store import read_dataset, read_world
from simulator.world import generate_world

from .conf import read_manifest

logger = logging.getLogger(__name__)


def simulator_options(config):
    return SimulatorOptions.from_dict(config["simulator"])


def sequence_trajectory(sequence, options):
    return generate_trajectory(
        sequence["kind"],
        float(sequence["length"]),
        float(sequence["step"]),
        lateral_offset=float(sequence.get("lateral_offset", 0.0)),
        laps=int(sequence.get("laps", 1)),
        speed=options.speed,
        max_speed=options.max_speed,
    )


def simulate(context):
    """World plus one rendered Dataset per configured sequence, in name order."""
    options = simulator_options(context.config)
    sequences = context.config["pipeline"]["sequences"]
    trajectories = {name: sequence_trajectory(sequences[name], options) for name in sorted(sequences)}
    world = generate_world(options, context.seeds["world"], avoid=[t.positions for t in trajectories.values()])
    datasets = {
        name: make_dataset(world, trajectory, options, context.seeds["simulator"])
        for name, trajectory in trajectories.items()
    }
    return world, datasets


def training_pairs(dataset):
    return [
        TrainingPair(dataset.scans[i], dataset.scans[i + 1], relative)
        for i, relative in enumerate(dataset.relative_poses)
    ]


@dataclass(frozen=True, eq=False)
class TrainingRun:
    net: object
    losses: np.ndarray
    triplet_losses: np.ndarray
    calibration: object = None


def train(context, dataset, steps=None):
    """Train a fresh network on consecutive pairs of `dataset`, then the optional triplet phase.

    The closure threshold is calibrated on the same sequence once training is done.
    """
    cfg = TrainConfig.from_config(context.config, context.seeds["learner"])
    net = cfg.build_network()
    rng = np.random.default_rng(context.seeds["sampler"])
    trainer = Trainer(net, cfg)
    losses = trainer.run(training_pairs(dataset), rng, steps)

    triplet_losses = []
    if cfg.triplet_steps:
        optimiser = Adam(net.parameter_count, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
        positions = dataset.trajectory.positions
        for step in range(cfg.triplet_steps):
            anchor = int(rng.integers(0, len(dataset)))
            loss = finetune_step(net, optimiser, dataset.scans, positions, anchor, rng, cfg, step)
            triplet_losses.append(np.nan if loss is None else loss)
    logger.info(f"trained {len(losses)} odometry steps and {len(triplet_losses)} triplet steps")
    place_options = PlaceRecognitionOptions.from_dict(context.config["place_recognition"])
    frontend = NetworkFrontend(net, dataset, cfg, embedding=place_options.embedding)
    calibration = calibrate_closure_threshold(frontend, dataset, place_options)
    return TrainingRun(net, losses, np.array(triplet_losses), calibration)


def loss_frame(losses, phase="odometry"):
    return pd.DataFrame(
        {"step": np.arange(len(losses)), "phase": phase, "loss": losses, "skipped": np.isnan(losses)}
    )


def training_losses(run):
    """Loss curve table: odometry steps, then triplet steps when there were any."""
    frames = [loss_frame(run.losses)]
    if len(run.triplet_losses):
        frames.append(loss_frame(run.triplet_losses, "triplet"))
    return pd.concat(frames, ignore_index=True)


class NetworkFrontend:
    """Features, embeddings and relative poses from a trained network."""

    def __init__(self, net, dataset, cfg, trajectory_id=0, embedding="dense"):
        self.net = net
        self.dataset = dataset
        self.cfg = cfg
        self.trajectory_id = trajectory_id
        self.embedding_source = embedding

    def features(self, index):
        return forward(self.net, self.dataset.scans[index])[0]

    def embedding(self, index, features):
        position = self.dataset.trajectory.positions[index]
        if self.embedding_source == "keypoints":
            keypoints = extract_keypoints(features, self.cfg.keypoints)
            return embed_keypoints(keypoints, scan_id=index, trajectory_id=self.trajectory_id, position=position)
        return embed(features.descriptor_map, scan_id=index, trajectory_id=self.trajectory_id, position=position)

    def relative(self, src, dst, src_features, dst_features):
        """(inverse(T_src) ∘ T_dst, total match weight), or None when the matches carry no pose."""
        scans = self.dataset.scans
        try:
            solution = estimate_pose(src_features, dst_features, scans[src], scans[dst], self.cfg)
        except (NoInformationError, DegenerateGeometryError) as exc:
            logger.warning(f"no pose between scans {src} and {dst}: {exc}")
            return None
        if solution.ill_conditioned:
            logger.warning(f"ill-conditioned pose between scans {src} and {dst}")
            return None
        return solution.pose.inverse(), solution.total_weight


class OracleFrontend(NetworkFrontend):
    """Relative poses from simulator landmarks matched directly; the network is not used for motion."""

    def __init__(self, world, dataset, options, net=None, cfg=None, trajectory_id=0, embedding="dense"):
        super().__init__(net, dataset, cfg, trajectory_id, embedding)
        self.world = world
        self.options = options

    def features(self, index):
        return None if self.net is None else super().features(index)

    def embedding(self, index, features):
        if features is None:
            raise DataError("oracle mode needs a network checkpoint to build place embeddings")
        return super().embedding(index, features)

    def relative(self, src, dst, src_features=None, dst_features=None):
        trajectory = self.dataset.trajectory
        try:
            corr = oracle_correspondences(self.world, trajectory[src], trajectory[dst], self.options)
            solution = solve_pose(corr)
        except (NoInformationError, DegenerateGeometryError) as exc:
            logger.warning(f"no oracle pose between scans {src} and {dst}: {exc}")
            return None
        return solution.pose.inverse(), solution.total_weight


def build_frontend(context, dataset_dir, sequence, checkpoint=None, oracle=False):
    """Dataset and the frontend that reads it: network-driven, or landmark oracle with --oracle."""
    dataset = read_dataset(dataset_dir, sequence)
    names = sorted(context.config["pipeline"]["sequences"])
    trajectory_id = names.index(sequence) if sequence in names else len(names)
    cfg = TrainConfig.from_config(context.config, context.seeds["learner"])
    embedding = context.config["place_recognition"]["embedding"]
    net = None
    if checkpoint is not None:
        net, _ = load_checkpoint(checkpoint, expected_hash=context.config_hash)
    if oracle:
        world = read_world(dataset_dir)
        options = simulator_options(context.config)
        return dataset, OracleFrontend(world, dataset, options, net, cfg, trajectory_id, embedding)
    if net is None:
        raise ConfigurationError("a checkpoint is required unless oracle matching is requested")
    return dataset, NetworkFrontend(net, dataset, cfg, trajectory_id, embedding)


def odometry(frontend, dataset):
    """Chain frame-to-frame estimates from the first ground-truth pose.

    A pair without a usable estimate repeats the previous motion (identity at the start).
    Returns the estimated Trajectory, the per-step (relative, weight) list and the
    location embeddings (empty when the frontend has no network).
    """
    steps = []
    previous = (Se2.identity(), 0.0)
    features = frontend.features(0)
    embeddings = [] if features is None else [frontend.embedding(0, features)]
    for i in range(1, len(dataset)):
        following = frontend.features(i)
        if following is not None:
            embeddings.append(frontend.embedding(i, following))
        estimate = frontend.relative(i - 1, i, features, following)
        if estimate is None:
            estimate = (previous[0], 0.0)
        steps.append(estimate)
        previous = estimate
        features = following
    trajectory = Trajectory.from_relative(
        dataset.trajectory[0], [relative for relative, _ in steps], dataset.trajectory.timestamps
    )
    return trajectory, steps, embeddings


def calibrate_closure_threshold(frontend, dataset, place_options):
    """ThresholdCalibration from the proposals the closure detector would make on `dataset`.

    A proposal is a true closure when its two ground-truth positions lie within
    `positive_radius`. Falls back to the configured threshold when there are no proposals.
    """
    positions = dataset.trajectory.positions
    index = EmbeddingIndex(place_options.backend)
    similarities, is_true = [], []
    for i in range(len(dataset)):
        embedding = frontend.embedding(i, frontend.features(i))
        newest = i - place_options.min_index_gap
        if newest >= 0:
            for neighbour in index.query(embedding, place_options.max_candidates, max_id=newest):
                similarities.append(neighbour.similarity)
                gap = np.linalg.norm(positions[i] - positions[neighbour.scan_id])
                is_true.append(gap <= place_options.positive_radius)
        index.add(embedding)
    return calibrate_threshold(similarities, is_true, fallback=place_options.closure_threshold)


def closure_threshold(context, checkpoint):
    """Threshold calibrated by `train` for this checkpoint, else place_recognition.closure_threshold."""
    configured = float(context.config["place_recognition"]["closure_threshold"])
    path = Path(checkpoint).with_name("train.manifest.yaml")
    if not path.exists():
        logger.warning(f"no train manifest beside {checkpoint}; using closure threshold {configured}")
        return configured
    manifest = read_manifest(path)
    if manifest["config_hash"] != context.config_hash or "closure_threshold" not in manifest:
        logger.warning(f"{path} carries no calibration for config {context.config_hash}; using {configured}")
        return configured
    return float(manifest["closure_threshold"])


@dataclass(frozen=True, eq=False)
class NodeMessage:
    index: int
    features: object
    embedding: object
    relative: Se2 = None
    weight: float = 0.0


@dataclass(frozen=True, eq=False)
class EdgeMessage:
    kind: str  # "odometry" or "loop"
    source: int
    target: int
    relative: Se2
    weight: float


# shutdown marker; every role forwards it downstream and stops
FLUSH = object()


class _Aborted(Exception):
    pass


@dataclass(frozen=True, eq=False)
class SlamResult:
    graph: object
    open_loop: object
    proposals: pd.DataFrame
    optimisations: int


class SlamRunner:
    """Odometry, closure detection and graph optimisation as three threads.

    odometry -> nodes queue -> closure detector -> edges queue -> optimiser. The
    optimiser is the only writer to the graph and applies edges in queue order, so the
    edge set and the optimised poses do not depend on thread scheduling.
    """

    def __init__(self, frontend, dataset, place_options=PlaceRecognitionOptions(),
                 graph_options=PoseGraphOptions(), queue_size=64, optimise_every=10):
        self.frontend = frontend
        self.dataset = dataset
        self.place_options = place_options
        self.graph_options = graph_options
        self.optimise_every = max(int(optimise_every), 1)
        self.nodes = queue.Queue(maxsize=queue_size)
        self.edges = queue.Queue(maxsize=queue_size)
        self.store = PoseGraphStore()
        self.proposals = []
        self.optimisations = 0
        self._errors = []
        self._abort = threading.Event()

    def _put(self, channel, item):
        while True:
            try:
                channel.put(item, timeout=0.1)
                return
            except queue.Full:
                if self._abort.is_set():
                    raise _Aborted()

    def _get(self, channel):
        while True:
            try:
                return channel.get(timeout=0.1)
            except queue.Empty:
                if self._abort.is_set():
                    raise _Aborted()

    def _role(self, body, downstream=None):
        def run():
            try:
                body()
            except _Aborted:
                pass
            except Exception as exc:
                logger.exception(f"slam role {body.__name__} failed")
                self._errors.append(exc)
                self._abort.set()
            finally:
                if downstream is not None:
                    try:
                        self._put(downstream, FLUSH)
                    except _Aborted:
                        pass

        return threading.Thread(target=run, name=body.__name__, daemon=True)

    def _odometry_role(self):
        previous = (Se2.identity(), 0.0)
        last = None
        for i in range(len(self.dataset)):
            if self._abort.is_set():
                raise _Aborted()
            features = self.frontend.features(i)
            message = NodeMessage(i, features, self.frontend.embedding(i, features))
            if last is not None:
                estimate = self.frontend.relative(i - 1, i, last.features, features)
                if estimate is None:
                    estimate = (previous[0], 0.0)
                previous = estimate
                message = NodeMessage(i, features, message.embedding, estimate[0], estimate[1])
            self._put(self.nodes, message)
            last = message

    def _closure_role(self):
        options = self.place_options
        index = EmbeddingIndex(options.backend)
        features = {}
        while True:
            message = self._get(self.nodes)
            if message is FLUSH:
                return
            i = message.index
            features[i] = message.features
            if i > 0:
                self._put(self.edges, EdgeMessage("odometry", i - 1, i, message.relative, message.weight))
            newest = i - options.min_index_gap
            if newest >= 0:
                for neighbour in index.query(message.embedding, options.max_candidates, max_id=newest):
                    self._propose(i, neighbour, features, message.features)
            index.add(message.embedding)

    def _propose(self, query, neighbour, features, query_features):
        accepted = neighbour.similarity >= self.place_options.closure_threshold
        relative = None
        if accepted:
            relative = self.frontend.relative(neighbour.scan_id, query, features[neighbour.scan_id], query_features)
            accepted = relative is not None
        row = {"query": query, "match": neighbour.scan_id, "similarity": neighbour.similarity,
               "accepted": accepted, "dx": np.nan, "dy": np.nan, "dtheta": np.nan, "weight": np.nan}
        if accepted:
            pose, weight = relative
            row.update(dx=pose.x, dy=pose.y, dtheta=pose.theta, weight=weight)
            self._put(self.edges, EdgeMessage("loop", neighbour.scan_id, query, pose, weight))
        self.proposals.append(row)

    def _information(self, weight):
        # a step without its own estimate gets the weakest information in use
        return information_from_weight(max(weight, 1e-6), self.graph_options)

    def _optimise(self):
        optimised, report = optimise(self.store.snapshot(), self.graph_options)
        self.store.commit(optimised)
        self.optimisations += 1
        logger.info(
            f"optimised {len(optimised.nodes)} nodes: chi2 {report.initial_chi2:.6g} -> {report.final_chi2:.6g} "
            f"in {report.iterations} iterations"
        )

    def _optimiser_role(self):
        self.store.add_node(0, self.dataset.trajectory[0])
        pending_loops = 0
        nodes_since = 0
        while True:
            message = self._get(self.edges)
            if message is FLUSH:
                break
            info = self._information(message.weight)
            if message.kind == "odometry":
                self.store.add_odometry_edge(message.source, message.target, message.relative, info)
                nodes_since += 1
            else:
                self.store.add_loop_edge(message.source, message.target, message.relative, info)
                pending_loops += 1
            if pending_loops and nodes_since >= self.optimise_every:
                self._optimise()
                pending_loops = nodes_since = 0
        if pending_loops and not self._abort.is_set():
            self._optimise()

    def run(self):
        threads = [
            self._role(self._odometry_role, self.nodes),
            self._role(self._closure_role, self.edges),
            self._role(self._optimiser_role),
        ]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
        if self._errors:
            raise self._errors[0]
        graph = self.store.graph()
        open_loop = _open_loop(graph, self.dataset.trajectory[0])
        proposals = pd.DataFrame(
            self.proposals, columns=["query", "match", "similarity", "accepted", "dx", "dy", "dtheta", "weight"]
        )
        logger.info(
            f"slam finished: {len(graph.nodes)} nodes, {len(graph.loop_edges())} loop closures, "
            f"{self.optimisations} optimisations"
        )
        return SlamResult(graph, open_loop, proposals, self.optimisations)


def _open_loop(graph, start):
    poses = [start]
    for edge in sorted((e for e in graph.edges if e.kind == "odometry"), key=lambda e: e.target):
        poses.append(poses[-1] @ edge.measurement)
    return poses


def trajectory_from_poses(poses, timestamps):
    return Trajectory(timestamps, [p.to_vector() for p in poses])


def graph_trajectory(graph, timestamps):
    return trajectory_from_poses([graph.nodes[k] for k in sorted(graph.nodes)], timestamps)


def closure_proposals(frame):
    """ClosureProposal list from a closures table (every proposal, accepted or not)."""
    try:
        return [
            ClosureProposal(int(row.query), int(row.match), float(row.similarity))
            for row in frame.itertuples(index=False)
        ]
    except (AttributeError, ValueError) as exc:
        raise DataError(f"closures table is malformed: {exc}") from exc
