"""Pose graph text file.

One record per line:

    VERTEX id x y theta
    EDGE id1 id2 dx dy dtheta i11 i12 i13 i22 i23 i33

The information matrix is stored upper-triangular. An edge between a node and the one
added right after it is read back as odometry, any other edge as a loop closure.
"""

from pathlib import Path

import numpy as np

from core.exceptions import DataError, parse_error
from core.geometry import Se2

from .services import PoseGraph

UPPER = np.triu_indices(3)


def write_graph(path, graph):
    lines = []
    for node, pose in graph.nodes.items():
        x, y, theta = pose.to_vector()
        lines.append(f"VERTEX {node} {float(x)!r} {float(y)!r} {float(theta)!r}")
    for edge in graph.edges:
        dx, dy, dtheta = edge.measurement.to_vector()
        info = " ".join(repr(float(v)) for v in edge.information[UPPER])
        lines.append(f"EDGE {edge.source} {edge.target} {float(dx)!r} {float(dy)!r} {float(dtheta)!r} {info}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_graph(path):
    graph = PoseGraph()
    order = {}
    edges = []
    for number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        fields = line.split()
        if not fields or fields[0].startswith("#"):
            continue
        try:
            if fields[0] == "VERTEX" and len(fields) == 5:
                node = int(fields[1])
                graph.add_node(node, Se2.from_xytheta(*map(float, fields[2:])))
                order[node] = len(order)
            elif fields[0] == "EDGE" and len(fields) == 12:
                values = [float(v) for v in fields[3:]]
                info = np.zeros((3, 3))
                info[UPPER] = values[3:]
                info = info + np.triu(info, 1).T
                edges.append((number, int(fields[1]), int(fields[2]), Se2.from_xytheta(*values[:3]), info))
            else:
                raise parse_error(path, f"unrecognised record {fields[0]!r} with {len(fields)} fields", line=number)
        except ValueError as exc:
            if isinstance(exc, DataError) and str(path) in str(exc):
                raise
            raise parse_error(path, str(exc), line=number) from exc
    for number, source, target, measurement, info in edges:
        try:
            successor = source in order and target in order and order[target] == order[source] + 1
            if successor and not graph.has_edge(f"odometry:{source}:{target}"):
                graph.add_odometry_edge(source, target, measurement, info)
            else:
                graph.add_loop_edge(source, target, measurement, info)
        except DataError as exc:
            raise parse_error(path, str(exc), line=number) from exc
    return graph
