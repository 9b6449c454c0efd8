from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from models.domain import NeighborhoodGraph
from models.errors import (
    DisconnectedGraph,
    DuplicateEdge,
    IndexOutOfRange,
    LengthMismatch,
    MalformedRow,
    SelfLoop,
)


def build_graph(n_sites: int, edges: Iterable[Tuple[int, int]], labels: Optional[Sequence[str]] = None) -> NeighborhoodGraph:
    """
    Validate an edge list and build the neighbourhood graph.

    Args:
        n_sites: Number of sites
        edges: Unordered zero-based site pairs
        labels: Optional site labels

    Returns:
        Graph with degrees computed

    Raises:
        SelfLoop, IndexOutOfRange, DuplicateEdge, DisconnectedGraph
    """
    if n_sites < 1:
        raise IndexOutOfRange(f"Graph needs at least one site, got n_sites={n_sites}")

    seen = set()
    pairs: List[Tuple[int, int]] = []
    for a, b in edges:
        a, b = int(a), int(b)
        for site in (a, b):
            if site < 0 or site >= n_sites:
                raise IndexOutOfRange(f"Edge ({a}, {b}) references site {site} outside [0, {n_sites})")
        if a == b:
            raise SelfLoop(f"Edge ({a}, {b}) is a self-loop on site {a}")
        key = (min(a, b), max(a, b))
        if key in seen:
            raise DuplicateEdge(f"Edge ({key[0]}, {key[1]}) appears more than once")
        seen.add(key)
        pairs.append(key)

    edge_array = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    degrees = np.bincount(edge_array.ravel(), minlength=n_sites)

    if n_sites > 1:
        adjacency = coo_matrix(
            (np.ones(len(pairs)), (edge_array[:, 0], edge_array[:, 1])), shape=(n_sites, n_sites)
        )
        n_components, component = connected_components(adjacency, directed=False)
        if n_components > 1:
            stray = np.flatnonzero(component != component[0])
            raise DisconnectedGraph(
                f"Graph has {n_components} components; site {int(stray[0])} is not connected to site 0"
            )

    if labels is not None and len(labels) != n_sites:
        raise LengthMismatch(f"Got {len(labels)} labels for {n_sites} sites")

    logger.debug(f"Built neighbourhood graph: {n_sites} sites, {len(pairs)} edges")
    return NeighborhoodGraph(
        n_sites=n_sites,
        edges=edge_array,
        degrees=degrees,
        labels=tuple(labels) if labels is not None else None,
    )


def quadratic_form(graph: NeighborhoodGraph, phi) -> float:
    """phi' (D - W) phi computed as the sum of squared differences over edges."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (graph.n_sites,):
        raise LengthMismatch(f"phi has shape {phi.shape}, expected ({graph.n_sites},)")
    if graph.n_edges == 0:
        return 0.0
    diff = phi[graph.edges[:, 0]] - phi[graph.edges[:, 1]]
    return float(np.dot(diff, diff))


def laplacian_dense(graph: NeighborhoodGraph) -> np.ndarray:
    """D - W as a dense matrix (small graphs only)."""
    laplacian = np.diag(graph.degrees.astype(np.float64))
    i, j = graph.edges[:, 0], graph.edges[:, 1]
    laplacian[i, j] -= 1.0
    laplacian[j, i] -= 1.0
    return laplacian


def path_graph(n_sites: int) -> NeighborhoodGraph:
    return build_graph(n_sites, [(i, i + 1) for i in range(n_sites - 1)])


def grid_graph(n_rows: int, n_cols: int) -> NeighborhoodGraph:
    """Rook-adjacency grid; site index = row * n_cols + col."""
    edges = []
    for row in range(n_rows):
        for col in range(n_cols):
            site = row * n_cols + col
            if col + 1 < n_cols:
                edges.append((site, site + 1))
            if row + 1 < n_rows:
                edges.append((site, site + n_cols))
    return build_graph(n_rows * n_cols, edges)


def relabel(graph: NeighborhoodGraph, permutation: Sequence[int]) -> NeighborhoodGraph:
    """Graph with old site ``k`` renamed ``permutation[k]``."""
    permutation = np.asarray(permutation, dtype=np.int64)
    if sorted(permutation.tolist()) != list(range(graph.n_sites)):
        raise LengthMismatch("Relabelling must be a permutation of the site indices")
    edges = [(int(permutation[a]), int(permutation[b])) for a, b in graph.edges]
    return build_graph(graph.n_sites, edges)


def load_edges(path: str, n_sites: int, index_base: int = 1, labels: Optional[Sequence[str]] = None) -> NeighborhoodGraph:
    """
    Read an edge-list CSV with header ``site_a,site_b``.

    Args:
        path: CSV file
        n_sites: Number of sites
        index_base: 0 or 1, the indexing used in the file
        labels: Optional site labels

    Returns:
        Validated graph
    """
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if list(frame.columns) != ["site_a", "site_b"]:
        raise MalformedRow(f"{path}: expected header 'site_a,site_b', got '{','.join(frame.columns)}'")
    edges = []
    for row_number, (a, b) in enumerate(frame.itertuples(index=False), start=2):
        try:
            edges.append((int(a) - index_base, int(b) - index_base))
        except ValueError:
            raise MalformedRow(f"{path}:{row_number}: cannot parse edge '{a},{b}'")
    graph = build_graph(n_sites, edges, labels=labels)
    logger.info(f"Loaded {graph.n_edges} edges over {n_sites} sites from {path}")
    return graph


def load_site_labels(path: str, n_sites: int, index_base: int = 1) -> List[str]:
    """Read the optional ``site_id,label`` mapping."""
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if list(frame.columns) != ["site_id", "label"]:
        raise MalformedRow(f"{path}: expected header 'site_id,label'")
    labels = [str(i + index_base) for i in range(n_sites)]
    for row_number, (site_id, label) in enumerate(frame.itertuples(index=False), start=2):
        try:
            index = int(site_id) - index_base
        except ValueError:
            raise MalformedRow(f"{path}:{row_number}: cannot parse site id '{site_id}'")
        if index < 0 or index >= n_sites:
            raise IndexOutOfRange(f"{path}:{row_number}: site {site_id} outside the panel")
        labels[index] = label
    return labels


class GraphService:
    def load(self, edges_path: str, n_sites: int, index_base: int = 1,
             labels_path: Optional[str] = None, labels_base: int = 1) -> NeighborhoodGraph:
        """Edge list plus the optional site-label file, validated together."""
        labels = load_site_labels(labels_path, n_sites, labels_base) if labels_path else None
        return load_edges(edges_path, n_sites, index_base, labels)


# Global graph service instance
graph_service = GraphService()
