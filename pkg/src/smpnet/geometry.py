"""Radius graphs and the spherical-coordinate description of two-hop paths.

For every directed edge k (sender s_k, receiver r_k) and every edge j that
points into s_k from a node other than r_k, this module produces the tuple
(d, theta, phi): the neighbor distance, the angle at s_k between the
directions to r_k and to the neighbor, and the torsion angle. Torsions are
azimuthal gaps between consecutive neighbors projected onto the plane
perpendicular to the edge, taken in ascending azimuth about the s_k -> r_k
axis; the gaps around one edge sum to 2*pi whenever there are at least two
neighbors.

All functions are pure and operate on immutable inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import Graph3D

# Below this projected norm (angstrom) a neighbor counts as collinear with
# the edge axis; its torsion is geometrically undefined and set to zero.
COLLINEAR_PROJECTION_EPS = 1e-8

ORTHOGONALITY_TOL = 1e-12


class GeometryError(ValueError):
    """Raised for invalid geometric inputs (e.g. an improper rotation)."""


@dataclass(frozen=True)
class DirectedEdgeList:
    """Directed radius-graph edges, sorted by (receiver, sender).

    ``receiver_offsets`` is a CSR-style index: edges with receiver i occupy
    positions [receiver_offsets[i], receiver_offsets[i+1]).
    """

    senders: np.ndarray
    receivers: np.ndarray
    distances: np.ndarray
    receiver_offsets: np.ndarray
    n_nodes: int

    @property
    def n_edges(self) -> int:
        return self.senders.size

    def incoming(self, node: int) -> np.ndarray:
        """Indices of edges whose receiver is ``node``."""
        return np.arange(self.receiver_offsets[node], self.receiver_offsets[node + 1])


@dataclass(frozen=True)
class TwoHopGeometry:
    """Per-pair spherical coordinates for all two-hop message paths.

    Pair p couples edge ``pair_edge[p]`` (the edge being updated) with edge
    ``pair_neighbor[p]`` (an edge into its sender). ``neighbor_counts[k]`` is
    the number of pairs contributed by edge k; ``collinear_pairs`` lists pair
    indices whose neighbor was collinear with the edge axis.
    """

    pair_edge: np.ndarray
    pair_neighbor: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    neighbor_counts: np.ndarray
    collinear_pairs: tuple[int, ...] = ()

    @property
    def n_pairs(self) -> int:
        return self.pair_edge.size


def build_radius_graph(graph: Graph3D, cutoff: float) -> DirectedEdgeList:
    """All directed edges (i -> j) with 0 < |r_i - r_j| <= cutoff.

    Both directions of every pair are present. Edges are ordered by
    (receiver, sender), which makes the ordering deterministic and incoming
    edges of each node contiguous.
    """
    if not cutoff > 0:
        raise GeometryError(f"cutoff must be positive, got {cutoff}")
    pos = graph.positions
    n = graph.n_atoms
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    mask = (dist <= cutoff)
    np.fill_diagonal(mask, False)
    # Row-major scan of mask[receiver, sender] yields (receiver, sender) order.
    receivers, senders = np.nonzero(mask)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(receivers, minlength=n), out=offsets[1:])
    return DirectedEdgeList(
        senders=_frozen(senders.astype(np.int64)),
        receivers=_frozen(receivers.astype(np.int64)),
        distances=_frozen(dist[receivers, senders]),
        receiver_offsets=_frozen(offsets),
        n_nodes=n,
    )


def build_two_hop_index(edges: DirectedEdgeList) -> tuple[np.ndarray, np.ndarray]:
    """Pairs (k, j) with j pointing into the sender of k and s_j != r_k.

    The reverse edge of k is excluded: it would yield a degenerate angle and
    an undefined torsion. Pairs are ordered by (k, j).
    """
    pair_k: list[int] = []
    pair_j: list[int] = []
    offsets = edges.receiver_offsets
    for k in range(edges.n_edges):
        sender = edges.senders[k]
        receiver = edges.receivers[k]
        for j in range(offsets[sender], offsets[sender + 1]):
            if edges.senders[j] != receiver:
                pair_k.append(k)
                pair_j.append(j)
    return (
        _frozen(np.asarray(pair_k, dtype=np.int64)),
        _frozen(np.asarray(pair_j, dtype=np.int64)),
    )


def compute_angles(graph: Graph3D, edges: DirectedEdgeList,
                   pair_k: np.ndarray, pair_j: np.ndarray) -> np.ndarray:
    """Angle at s_k between the direction to r_k and the direction to s_j.

    The cosine is clamped to [-1, 1] before arccos, so no angle is NaN even
    when rounding pushes the exact dot product past +-1.
    """
    pos = graph.positions
    origin = pos[edges.senders[pair_k]]
    to_receiver = pos[edges.receivers[pair_k]] - origin
    to_neighbor = pos[edges.senders[pair_j]] - origin
    dot = np.sum(to_receiver * to_neighbor, axis=-1)
    norms = np.linalg.norm(to_receiver, axis=-1) * np.linalg.norm(to_neighbor, axis=-1)
    cos = np.clip(dot / norms, -1.0, 1.0)
    return _frozen(np.arccos(cos))


def compute_torsions(
    graph: Graph3D,
    edges: DirectedEdgeList,
    pair_k: np.ndarray,
    pair_j: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, tuple[int, ...]]:
    """Torsion angles as azimuthal gaps between consecutive neighbors.

    For each edge k, the neighbors contributing pairs are projected onto the
    plane through s_k perpendicular to the s_k -> r_k axis. Azimuths are taken
    in the right-handed frame about that axis (the in-plane zero is arbitrary;
    only azimuth differences survive). Neighbors are sorted by ascending
    azimuth with ties broken by (distance, node index), and each neighbor's
    torsion is the gap to its predecessor in this cyclic order, so the gaps of
    one edge sum to 2*pi when it has two or more neighbors. A single neighbor
    gets torsion 0. Neighbors collinear with the axis (projection norm below
    ``COLLINEAR_PROJECTION_EPS``) get azimuth 0 and are reported in the
    returned diagnostics tuple.

    Returns (phi per pair, neighbor count per edge, collinear pair indices).
    """
    pos = graph.positions
    phi = np.zeros(pair_k.size, dtype=np.float64)
    counts = np.bincount(pair_k, minlength=edges.n_edges).astype(np.int64)
    collinear: list[int] = []

    # Pairs are ordered by (k, j), so each edge's pairs are contiguous.
    boundaries = np.flatnonzero(np.diff(pair_k)) + 1
    group_starts = np.concatenate(([0], boundaries)) if pair_k.size else np.empty(0, np.int64)
    group_ends = np.concatenate((boundaries, [pair_k.size])) if pair_k.size else group_starts

    for start, end in zip(group_starts, group_ends):
        k = pair_k[start]
        t = end - start
        if t == 1:
            phi[start] = 0.0
            continue
        origin = pos[edges.senders[k]]
        axis = pos[edges.receivers[k]] - origin
        axis = axis / np.linalg.norm(axis)
        b1, b2 = _plane_basis(axis)
        azimuths = np.empty(t, dtype=np.float64)
        for offset in range(t):
            j = pair_j[start + offset]
            rel = pos[edges.senders[j]] - origin
            proj = rel - np.dot(rel, axis) * axis
            norm = np.linalg.norm(proj)
            if norm < COLLINEAR_PROJECTION_EPS:
                azimuths[offset] = 0.0
                collinear.append(start + offset)
                continue
            az = np.arctan2(np.dot(proj, b2), np.dot(proj, b1))
            azimuths[offset] = az if az >= 0.0 else az + 2.0 * np.pi
        neighbor_dist = edges.distances[pair_j[start:end]]
        neighbor_node = edges.senders[pair_j[start:end]]
        order = np.lexsort((neighbor_node, neighbor_dist, azimuths))
        gaps = np.mod(azimuths[order] - azimuths[order[np.arange(t) - 1]], 2.0 * np.pi)
        # The first neighbor's predecessor is the last; its gap carries the
        # wrap-around so the gaps always sum to a full turn.
        gaps[0] = 2.0 * np.pi - np.sum(gaps[1:])
        phi[start + order] = gaps
    return _frozen(phi), _frozen(counts), tuple(collinear)


def two_hop_geometry(graph: Graph3D, edges: DirectedEdgeList) -> TwoHopGeometry:
    """Build the full (pair index, theta, phi) description for a graph."""
    pair_k, pair_j = build_two_hop_index(edges)
    theta = compute_angles(graph, edges, pair_k, pair_j)
    phi, counts, collinear = compute_torsions(graph, edges, pair_k, pair_j)
    return TwoHopGeometry(
        pair_edge=pair_k,
        pair_neighbor=pair_j,
        theta=theta,
        phi=phi,
        neighbor_counts=counts,
        collinear_pairs=collinear,
    )


def rigid_transform(graph: Graph3D, rotation: np.ndarray,
                    translation: np.ndarray) -> Graph3D:
    """Apply a proper rigid motion r -> R r + t to all positions.

    ``rotation`` must be orthogonal within 1e-12 with determinant +1;
    reflections are rejected.
    """
    rotation = np.asarray(rotation, dtype=np.float64)
    translation = np.asarray(translation, dtype=np.float64)
    if rotation.shape != (3, 3) or translation.shape != (3,):
        raise GeometryError("expected a 3x3 rotation and a 3-vector translation")
    residual = rotation.T @ rotation - np.eye(3)
    if np.max(np.abs(residual)) > ORTHOGONALITY_TOL:
        raise GeometryError("rotation matrix is not orthogonal within 1e-12")
    if np.linalg.det(rotation) < 0:
        raise GeometryError("improper rotation (reflection) rejected")
    new_positions = graph.positions @ rotation.T + translation
    return Graph3D(
        atomic_numbers=graph.atomic_numbers,
        positions=new_positions,
        graph_target=graph.graph_target,
        node_targets=graph.node_targets,
        id=graph.id,
    )


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Draw a uniform proper rotation (QR of a Gaussian matrix, det fixed to +1)."""
    gaussian = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(gaussian)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _plane_basis(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal in-plane basis (b1, b2) with b1 x b2 = axis."""
    pick = np.argmin(np.abs(axis))
    seed = np.zeros(3)
    seed[pick] = 1.0
    b1 = seed - np.dot(seed, axis) * axis
    b1 = b1 / np.linalg.norm(b1)
    b2 = np.cross(axis, b1)
    return b1, b2


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array
