"""Short-range processor: message passing plus Laplacian feature smoothing.

Each layer runs one conventional message-passing stage (edge update, then
vertex update over separate mesh/world aggregations), then `s` parameter-free
smoothing steps that average neighbor features plus incident edge features over
the garment mesh, then a per-vertex MLP with a residual around the smoothing
stage. A layer therefore widens the receptive field by exactly 1 + s hops.

Body vertices take part in message passing (world edges carry the contact
signal) but pass through smoothing unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .tensor import ModelParams, Tensor

VERTEX_FEATURES = 8  # one-hot kind (2) + velocity (3) + normal (3)
MESH_EDGE_FEATURES = 8  # relative position + norm, relative rest position + norm
WORLD_EDGE_FEATURES = 4  # relative position + norm


@dataclass
class LatentGraph:
    vertex_feats: Tensor  # (n_total, h); garment rows first
    mesh_edge_feats: Tensor  # (M, h); garment edge rows first
    world_edge_feats: Tensor  # (W, h)
    mesh_edges: np.ndarray  # (M, 2) combined vertex indices
    world_edges: np.ndarray  # (W, 2) combined indices (garment, offset body)
    n_garment: int
    n_garment_edges: int

    def __post_init__(self):
        h = self.vertex_feats.data.shape[1]
        if self.mesh_edge_feats.data.shape[1] != h or \
                self.world_edge_feats.data.shape[1] != h:
            raise ValueError("latent graph feature widths differ")
        n = self.vertex_feats.data.shape[0]
        for name, idx in (("mesh", self.mesh_edges), ("world", self.world_edges)):
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise ValueError(f"{name} edge index out of range")

    @property
    def n_total(self) -> int:
        return self.vertex_feats.data.shape[0]


# -- encoders ----------------------------------------------------------------

def init_encoder_params(params: ModelParams, hidden_dim: int,
                        rng: np.random.Generator) -> None:
    T.mlp_init(params, "encoder.vertex", VERTEX_FEATURES, hidden_dim, hidden_dim,
               rng, norm=True)
    T.mlp_init(params, "encoder.mesh_edge", MESH_EDGE_FEATURES, hidden_dim,
               hidden_dim, rng, norm=True)
    T.mlp_init(params, "encoder.world_edge", WORLD_EDGE_FEATURES, hidden_dim,
               hidden_dim, rng, norm=True)


def assemble_input_features(positions: np.ndarray, velocities: np.ndarray,
                            rest_positions: np.ndarray, normals: np.ndarray,
                            n_garment: int, mesh_edges: np.ndarray,
                            world_edges: np.ndarray
                            ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raw (pre-encoder) features; everything relative, so translation-invariant
    except the vertex velocity/normal channels."""
    n = len(positions)
    kind = np.zeros((n, 2))
    kind[:n_garment, 0] = 1.0
    kind[n_garment:, 1] = 1.0
    vertex = np.concatenate([kind, velocities, normals], axis=1)

    def edge_feats(edges, with_rest):
        rel = positions[edges[:, 0]] - positions[edges[:, 1]]
        norm = np.linalg.norm(rel, axis=1, keepdims=True)
        parts = [rel, norm]
        if with_rest:
            rel0 = rest_positions[edges[:, 0]] - rest_positions[edges[:, 1]]
            parts += [rel0, np.linalg.norm(rel0, axis=1, keepdims=True)]
        return np.concatenate(parts, axis=1) if len(edges) else \
            np.zeros((0, 8 if with_rest else 4))

    return vertex, edge_feats(mesh_edges, True), edge_feats(world_edges, False)


def encode(params: ModelParams, positions: np.ndarray, velocities: np.ndarray,
           rest_positions: np.ndarray, normals: np.ndarray, n_garment: int,
           mesh_edges: np.ndarray, n_garment_edges: int,
           world_edges: np.ndarray) -> LatentGraph:
    """Build the latent graph for one step from plain state arrays."""
    vertex, mesh_e, world_e = assemble_input_features(
        positions, velocities, rest_positions, normals, n_garment,
        mesh_edges, world_edges)
    return LatentGraph(
        vertex_feats=T.mlp_apply(params, "encoder.vertex", Tensor(vertex)),
        mesh_edge_feats=T.mlp_apply(params, "encoder.mesh_edge", Tensor(mesh_e)),
        world_edge_feats=T.mlp_apply(params, "encoder.world_edge", Tensor(world_e)),
        mesh_edges=mesh_edges,
        world_edges=world_edges,
        n_garment=n_garment,
        n_garment_edges=n_garment_edges,
    )


# -- one LSDMP layer ----------------------------------------------------------

def init_layer_params(params: ModelParams, name: str, hidden_dim: int,
                      rng: np.random.Generator, zero_output: bool = False) -> None:
    """zero_output starts the layer as the identity (residuals carry through),
    which keeps early training at free drift instead of injecting init noise."""
    h = hidden_dim
    T.mlp_init(params, f"{name}.f_e_mesh", 3 * h, h, h, rng, norm=True,
               zero_output=zero_output)
    T.mlp_init(params, f"{name}.f_e_world", 3 * h, h, h, rng, norm=True,
               zero_output=zero_output)
    T.mlp_init(params, f"{name}.f_v", 3 * h, h, h, rng, norm=True,
               zero_output=zero_output)
    T.mlp_init(params, f"{name}.f_v_prime", h, h, h, rng, norm=True,
               zero_output=zero_output)


def init_lsdmp_params(params: ModelParams, n_layers: int, hidden_dim: int,
                      rng: np.random.Generator, zero_output: bool = False) -> None:
    for i in range(n_layers):
        init_layer_params(params, f"lsdmp.layer{i}", hidden_dim, rng,
                          zero_output=zero_output)


def mp_edge_update(lg: LatentGraph, params: ModelParams,
                   name: str) -> tuple[Tensor, Tensor]:
    """Edge features from (edge, both endpoints), with a residual; mesh and
    world edges use separate MLPs."""
    v = lg.vertex_feats

    def update(edges, feats, mlp_name):
        inp = T.concat([feats,
                        T.gather_rows(v, edges[:, 0]),
                        T.gather_rows(v, edges[:, 1])], axis=-1)
        return T.add(T.mlp_apply(params, mlp_name, inp), feats)

    return (update(lg.mesh_edges, lg.mesh_edge_feats, f"{name}.f_e_mesh"),
            update(lg.world_edges, lg.world_edge_feats, f"{name}.f_e_world"))


def mp_vertex_update(lg: LatentGraph, mesh_e: Tensor, world_e: Tensor,
                     params: ModelParams, name: str) -> Tensor:
    """Vertex features from (vertex, mesh-edge sum, world-edge sum), with a
    residual; vertices with no incident edges of a kind get a zero sum."""
    n = lg.n_total

    def incident_sum(edges, feats):
        dst = np.concatenate([edges[:, 0], edges[:, 1]])
        both = T.concat([feats, feats], axis=0)
        return T.segment_sum(both, dst, n)

    inp = T.concat([lg.vertex_feats,
                    incident_sum(lg.mesh_edges, mesh_e),
                    incident_sum(lg.world_edges, world_e)], axis=-1)
    return T.add(T.mlp_apply(params, f"{name}.f_v", inp), lg.vertex_feats)


def laplacian_smooth_step(v: Tensor, mesh_e: Tensor, lg: LatentGraph) -> Tensor:
    """Average of (neighbor vertex + connecting edge) features over garment mesh
    edges; parameter-free. Body vertices and neighborless vertices pass through."""
    ge = lg.mesh_edges[:lg.n_garment_edges]
    n = lg.n_total
    if len(ge) == 0:
        return v
    src = np.concatenate([ge[:, 1], ge[:, 0]])
    dst = np.concatenate([ge[:, 0], ge[:, 1]])
    eidx = np.tile(np.arange(len(ge)), 2)
    msg = T.add(T.gather_rows(v, src), T.gather_rows(mesh_e, eidx))
    mean = T.segment_mean(msg, dst, n)
    counts = np.bincount(dst, minlength=n)
    active = (counts > 0) & (np.arange(n) < lg.n_garment)
    mask = Tensor(active.astype(np.float64)[:, None])
    return T.add(T.mul(mean, mask), T.mul(v, T.Tensor(1.0 - mask.data)))


def lsdmp_layer(lg: LatentGraph, params: ModelParams, name: str,
                smoothing_steps: int) -> LatentGraph:
    """Message passing, `smoothing_steps` smoothing applications, output MLP
    with a residual around the smoothing stage; edge features carry forward."""
    if smoothing_steps < 0:
        raise ValueError("smoothing_steps must be >= 0")
    mesh_e, world_e = mp_edge_update(lg, params, name)
    v_a = mp_vertex_update(lg, mesh_e, world_e, params, name)
    v_p = v_a
    for _ in range(smoothing_steps):
        v_p = laplacian_smooth_step(v_p, mesh_e, lg)
    v_out = T.add(T.mlp_apply(params, f"{name}.f_v_prime", v_p), v_a)
    return replace(lg, vertex_feats=v_out, mesh_edge_feats=mesh_e,
                   world_edge_feats=world_e)


def lsdmp_forward(lg: LatentGraph, params: ModelParams, n_layers: int,
                  smoothing_steps: int) -> LatentGraph:
    for i in range(n_layers):
        lg = lsdmp_layer(lg, params, f"lsdmp.layer{i}", smoothing_steps)
    return lg
