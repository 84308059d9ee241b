"""SE(2) pose graph and its damped Gauss-Newton optimiser.

Nodes hold absolute poses T_i. An edge i -> j with measurement Z and information Ω
contributes e^T Ω e to chi², where e = (x, y, theta) of Z⁻¹ ∘ (T_i⁻¹ ∘ T_j) with theta
wrapped to (-pi, pi]. The state is updated additively in (x, y, theta) per node and the
first node added is held fixed.
"""

import logging
import threading
from dataclasses import dataclass, field, fields

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from sksparse.cholmod import CholmodError, cholesky

from core.exceptions import ConfigurationError, DataError, OptimisationError
from core.geometry import Se2, rot, rot_derivative, wrap_angle

logger = logging.getLogger(__name__)

EDGE_KINDS = ("odometry", "loop")
CHI2_FLOOR = 1e-20


@dataclass(frozen=True)
class PoseGraphOptions:
    max_iters: int = 50
    tol: float = 1e-9
    lambda_init: float = 1e-4
    lambda_max: float = 1e8
    translation_sigma: float = 0.5
    rotation_sigma: float = 0.05

    def __post_init__(self):
        if self.max_iters < 0 or not self.tol >= 0:
            raise ConfigurationError("pose_graph.max_iters and pose_graph.tol must be non-negative")
        if not 0 < self.lambda_init <= self.lambda_max:
            raise ConfigurationError("pose_graph damping needs 0 < lambda_init <= lambda_max")
        if not (self.translation_sigma > 0 and self.rotation_sigma > 0):
            raise ConfigurationError("pose_graph sigmas must be positive")

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


def information_from_weight(total_weight, options=PoseGraphOptions()):
    """Diagonal information scaled by the total match weight behind a measurement."""
    if not total_weight > 0:
        raise DataError(f"edge weight must be positive, got {total_weight}")
    return total_weight * np.diag(
        [options.translation_sigma**-2, options.translation_sigma**-2, options.rotation_sigma**-2]
    )


@dataclass(frozen=True, eq=False)
class Edge:
    edge_id: str
    source: int
    target: int
    measurement: Se2
    information: np.ndarray
    kind: str = "odometry"

    def __post_init__(self):
        info = np.array(self.information, dtype=np.float64)
        if info.shape != (3, 3) or not np.all(np.isfinite(info)):
            raise DataError(f"edge {self.edge_id}: information must be a finite 3x3 matrix")
        if not np.allclose(info, info.T, atol=1e-12 * max(1.0, np.abs(info).max())):
            raise DataError(f"edge {self.edge_id}: information matrix is not symmetric")
        if np.linalg.eigvalsh(info).min() <= 0:
            raise DataError(f"edge {self.edge_id}: information matrix is not positive definite")
        if self.kind not in EDGE_KINDS:
            raise DataError(f"edge {self.edge_id}: unknown kind {self.kind!r}")
        info.setflags(write=False)
        object.__setattr__(self, "information", info)


def edge_residual(measurement, pose_i, pose_j):
    """(x, y, theta) of measurement⁻¹ ∘ (pose_i⁻¹ ∘ pose_j)."""
    delta = measurement.inverse() @ (pose_i.inverse() @ pose_j)
    return np.array([delta.x, delta.y, wrap_angle(delta.theta)])


def edge_jacobians(measurement, xi, xj):
    """d residual / d (x, y, theta) of both endpoint poses, given as state vectors."""
    Rz_t = measurement.rotation.T
    Ri_t = rot(xi[2]).T
    dt = xj[:2] - xi[:2]
    A = np.zeros((3, 3))
    B = np.zeros((3, 3))
    A[:2, :2] = -Rz_t @ Ri_t
    A[:2, 2] = Rz_t @ rot_derivative(xi[2]).T @ dt
    A[2, 2] = -1.0
    B[:2, :2] = Rz_t @ Ri_t
    B[2, 2] = 1.0
    return A, B


class PoseGraph:
    def __init__(self):
        self.nodes = {}
        self.edges = []
        self._edge_ids = set()

    def __len__(self):
        return len(self.nodes)

    def copy(self):
        other = PoseGraph()
        other.nodes = dict(self.nodes)
        other.edges = list(self.edges)
        other._edge_ids = set(self._edge_ids)
        return other

    def add_node(self, node_id, pose):
        node_id = int(node_id)
        if node_id in self.nodes:
            raise DataError(f"node {node_id} already exists")
        self.nodes[node_id] = pose

    def _add_edge(self, edge):
        if edge.edge_id in self._edge_ids:
            raise DataError(f"duplicate edge id {edge.edge_id}")
        for node in (edge.source, edge.target):
            if node not in self.nodes:
                raise DataError(f"edge {edge.edge_id} refers to missing node {node}")
        if edge.source == edge.target:
            raise DataError(f"edge {edge.edge_id} is a self-loop")
        self._edge_ids.add(edge.edge_id)
        self.edges.append(edge)
        return edge

    def add_odometry_edge(self, source, target, measurement, information, edge_id=None):
        """Odometry edge; a missing target node is created at the composed estimate."""
        if target not in self.nodes:
            if source not in self.nodes:
                raise DataError(f"odometry edge from missing node {source}")
            self.add_node(target, self.nodes[source] @ measurement)
        edge_id = edge_id or f"odometry:{source}:{target}"
        return self._add_edge(Edge(edge_id, int(source), int(target), measurement, information, "odometry"))

    def add_loop_edge(self, source, target, measurement, information, edge_id=None):
        edge_id = edge_id or f"loop:{source}:{target}"
        return self._add_edge(Edge(edge_id, int(source), int(target), measurement, information, "loop"))

    def has_edge(self, edge_id):
        return edge_id in self._edge_ids

    @property
    def node_ids(self):
        return list(self.nodes)

    def loop_edges(self):
        return [e for e in self.edges if e.kind == "loop"]

    def positions(self):
        return np.array([p.to_vector()[:2] for p in self.nodes.values()]).reshape(-1, 2)

    def edge_chi2(self, edge):
        e = edge_residual(edge.measurement, self.nodes[edge.source], self.nodes[edge.target])
        return float(e @ edge.information @ e)

    def chi2(self):
        return float(sum(self.edge_chi2(edge) for edge in self.edges))

    def component_count(self):
        index = {node: k for k, node in enumerate(self.nodes)}
        n = len(index)
        if n == 0:
            return 0
        rows = [index[e.source] for e in self.edges]
        cols = [index[e.target] for e in self.edges]
        adjacency = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        count, _ = connected_components(adjacency, directed=False)
        return int(count)

    def is_connected(self):
        return self.component_count() == 1


@dataclass(frozen=True)
class OptimisationReport:
    iterations: int
    initial_chi2: float
    final_chi2: float
    converged: bool
    history: tuple = field(default_factory=tuple)


def _state(graph):
    return np.array([graph.nodes[n].to_vector() for n in graph.nodes])


def _chi2_at(graph, x, index):
    total = 0.0
    for edge in graph.edges:
        i, j = index[edge.source], index[edge.target]
        e = edge_residual(edge.measurement, Se2.from_vector(x[i]), Se2.from_vector(x[j]))
        total += e @ edge.information @ e
    return float(total)


def _normal_equations(graph, x, index):
    """Sparse H = J^T Ω J and gradient b = J^T Ω e over the full state."""
    n = 3 * len(index)
    rows, cols, values = [], [], []
    b = np.zeros(n)
    block = np.arange(3)
    for edge in graph.edges:
        i, j = index[edge.source], index[edge.target]
        e = edge_residual(edge.measurement, Se2.from_vector(x[i]), Se2.from_vector(x[j]))
        A, B = edge_jacobians(edge.measurement, x[i], x[j])
        omega = edge.information
        for a, Ja in ((i, A), (j, B)):
            b[3 * a + block] += Ja.T @ omega @ e
            for c, Jc in ((i, A), (j, B)):
                r, k = np.meshgrid(3 * a + block, 3 * c + block, indexing="ij")
                rows.append(r.ravel())
                cols.append(k.ravel())
                values.append((Ja.T @ omega @ Jc).ravel())
    H = sp.coo_matrix((np.concatenate(values), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)).tocsr()
    return H, b


def optimise(graph, options=PoseGraphOptions()):
    """Return (optimised copy of graph, OptimisationReport).

    Levenberg damping: H + λ diag(H); λ shrinks ×10 after an accepted step and grows ×10
    after a rejected one. Stops when the relative chi² change drops below `tol`, chi² reaches
    zero, or `max_iters` accepted steps have been taken.
    """
    if len(graph) == 0:
        raise DataError("cannot optimise an empty pose graph")
    components = graph.component_count()
    if components != 1:
        raise DataError(f"pose graph is disconnected ({components} components)")
    index = {node: k for k, node in enumerate(graph.nodes)}
    x = _state(graph)
    chi2 = initial = _chi2_at(graph, x, index)
    history = [chi2]
    lam = options.lambda_init
    iterations = 0
    converged = chi2 <= CHI2_FLOOR
    free = np.arange(3, 3 * len(index))

    while not converged and iterations < options.max_iters and len(free):
        H, b = _normal_equations(graph, x, index)
        H = H[free][:, free].tocsc()
        diagonal = np.maximum(H.diagonal(), 1e-12)
        g = b[free]
        accepted = False
        while not accepted:
            damped = (H + sp.diags(lam * diagonal, format="csc")).tocsc()
            try:
                step = -cholesky(damped).solve_A(g)
            except CholmodError:
                step = None
            if step is not None:
                candidate = x.copy()
                candidate.reshape(-1)[free] += step
                candidate[:, 2] = wrap_angle(candidate[:, 2])
                new_chi2 = _chi2_at(graph, candidate, index)
                if new_chi2 <= chi2:
                    accepted = True
                    break
            lam *= 10.0
            if lam > options.lambda_max:
                if step is None:
                    raise OptimisationError(f"normal equations stayed singular up to damping {options.lambda_max:g}")
                # no damped step lowers chi², so the current state is a minimum to working precision
                converged = True
                break
        if not accepted:
            break
        iterations += 1
        change = (chi2 - new_chi2) / max(chi2, CHI2_FLOOR)
        x, chi2 = candidate, new_chi2
        history.append(chi2)
        lam = max(lam / 10.0, 1e-12)
        logger.debug(f"pose graph iteration {iterations}: chi2 {chi2:.6g}, lambda {lam:.1e}")
        if change < options.tol or chi2 <= CHI2_FLOOR:
            converged = True

    result = graph.copy()
    if iterations:
        for node, k in index.items():
            result.nodes[node] = Se2.from_vector(x[k])
    report = OptimisationReport(iterations, initial, chi2, converged, tuple(history))
    logger.info(f"optimised {len(index)} nodes, {len(graph.edges)} edges: chi2 {initial:.6g} -> {chi2:.6g} in {iterations} iterations")
    return result, report


class PoseGraphStore:
    """The live graph shared by the SLAM roles.

    Writers append under the lock; the optimiser works on a snapshot and commits its
    poses back, re-anchoring nodes that arrived meanwhile on their optimised predecessor.
    """

    def __init__(self, graph=None):
        self._graph = graph or PoseGraph()
        self._lock = threading.Lock()
        self.commits = 0

    def add_node(self, node_id, pose):
        with self._lock:
            self._graph.add_node(node_id, pose)

    def add_odometry_edge(self, *args, **kwargs):
        with self._lock:
            return self._graph.add_odometry_edge(*args, **kwargs)

    def add_loop_edge(self, *args, **kwargs):
        with self._lock:
            return self._graph.add_loop_edge(*args, **kwargs)

    def pose(self, node_id):
        with self._lock:
            return self._graph.nodes[node_id]

    def snapshot(self):
        with self._lock:
            return self._graph.copy()

    def commit(self, optimised):
        """Adopt optimised poses for every node the snapshot had."""
        with self._lock:
            nodes = self._graph.nodes
            anchor_old = anchor_new = None
            for node in nodes:
                if node in optimised.nodes:
                    anchor_old, anchor_new = nodes[node], optimised.nodes[node]
                    nodes[node] = anchor_new
                elif anchor_old is not None:
                    nodes[node] = anchor_new @ (anchor_old.inverse() @ nodes[node])
            self.commits += 1

    def graph(self):
        return self.snapshot()
