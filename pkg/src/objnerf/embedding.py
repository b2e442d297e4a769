"""Hybrid space embedding: Fourier features of coordinates and of voxel features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse

from .errors import InputError, NumericError


@dataclass(frozen=True)
class EncodingConfig:
    freq_count_xyz: int = 6
    freq_count_dir: int = 4
    freq_count_feature: int = 2
    include_identity: bool = True

    def __post_init__(self):
        for name in ("freq_count_xyz", "freq_count_dir", "freq_count_feature"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be >= 0")

    def width(self, freq_count):
        return int(self.include_identity) + 2 * freq_count

    def out_dim(self, input_dim, freq_count):
        return input_dim * self.width(freq_count)


def positional_encode(v, freq_count, include_identity=True):
    """Fourier-encode the last axis of ``v``.

    Layout is grouped per input dimension: for each component ``v_d`` the block
    ``[v_d, sin(pi v_d), cos(pi v_d), sin(2 pi v_d), cos(2 pi v_d), ...]`` is
    emitted (identity entry omitted when ``include_identity`` is false), and
    blocks are concatenated in component order.
    """
    v = np.asarray(v)
    if not np.all(np.isfinite(v)):
        raise NumericError("positional_encode received non-finite input")
    if v.ndim == 0:
        v = v[None]
    freqs = (2.0 ** np.arange(freq_count)) * np.pi
    arg = v[..., None] * freqs.astype(v.dtype)  # (..., D, L)
    sc = np.stack([np.sin(arg), np.cos(arg)], axis=-1).reshape(*arg.shape[:-1], 2 * freq_count)
    if include_identity:
        sc = np.concatenate([v[..., None], sc], axis=-1)
    return sc.reshape(*v.shape[:-1], -1)


def positional_encode_backward(v, grad, freq_count, include_identity=True, encoded=None):
    """Vector-Jacobian product of :func:`positional_encode` w.r.t. ``v``.

    Passing the forward output as ``encoded`` avoids re-evaluating sin/cos:
    d sin(f v) = f cos(f v) and d cos(f v) = -f sin(f v).
    """
    v = np.asarray(v)
    width = int(include_identity) + 2 * freq_count
    g = grad.reshape(*v.shape, width)
    out = g[..., 0].copy() if include_identity else np.zeros_like(v)
    if freq_count:
        freqs = ((2.0 ** np.arange(freq_count)) * np.pi).astype(v.dtype)
        if encoded is None:
            encoded = positional_encode(v, freq_count, include_identity)
        sc = encoded.reshape(*v.shape, width)[..., int(include_identity):].reshape(*v.shape, freq_count, 2)
        gsc = g[..., int(include_identity):].reshape(*v.shape, freq_count, 2)
        out = out + np.einsum("...l,l->...", gsc[..., 0] * sc[..., 1] - gsc[..., 1] * sc[..., 0], freqs)
    return out


_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])


@dataclass
class VoxelGrid:
    """Axis-aligned grid with learnable features stored on the vertices.

    ``scene_features`` and ``object_features`` have one row per vertex, flat
    index ``(i * (ny + 1) + j) * (nz + 1) + k``.
    """

    origin: np.ndarray
    cell_size: float
    dims: tuple
    scene_features: np.ndarray
    object_features: np.ndarray
    occupancy: np.ndarray

    @classmethod
    def create(cls, bounds, resolution=32, d_scene=16, d_object=16, rng=None,
               init_scale=1e-2, dtype=np.float32):
        lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
        cell = float(np.max(hi - lo) / resolution)
        dims = tuple(int(n) for n in np.maximum(np.ceil((hi - lo) / cell - 1e-9), 1))
        n_vert = int(np.prod(np.asarray(dims) + 1))
        rng = np.random.default_rng(0) if rng is None else rng
        scn = rng.uniform(-init_scale, init_scale, size=(n_vert, d_scene)).astype(dtype)
        obj = rng.uniform(-init_scale, init_scale, size=(n_vert, d_object)).astype(dtype)
        return cls(lo, cell, dims, scn, obj, np.ones(dims, dtype=bool))

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.dims = tuple(int(n) for n in self.dims)
        n_vert = int(np.prod(np.asarray(self.dims) + 1))
        if not self.cell_size > 0:
            raise InputError("cell_size must be positive")
        for name in ("scene_features", "object_features"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape[0] != n_vert:
                raise InputError(f"{name} must have {n_vert} rows, got {arr.shape}")

    @property
    def extent(self):
        return np.asarray(self.dims) * self.cell_size

    def features(self, which):
        if which == "scene":
            return self.scene_features
        if which == "object":
            return self.object_features
        raise InputError(f"unknown feature group {which!r}")

    def normalize(self, x):
        """Map grid box to [-1, 1]^3."""
        return (2.0 * (x - self.origin) / self.extent - 1.0).astype(x.dtype, copy=False)

    def locate(self, x):
        """Vertex indices (n, 8), trilinear weights (n, 8) and in-grid flags (n,)."""
        x = np.asarray(x).reshape(-1, 3)
        u = (x - self.origin) / self.cell_size
        dims = np.asarray(self.dims)
        inside = np.all((u >= 0) & (u <= dims), axis=-1)
        base = np.clip(np.floor(u), 0, dims - 1).astype(np.int64)
        frac = np.clip(u - base, 0.0, 1.0)
        corner = base[:, None, :] + _CORNERS[None]
        ny1, nz1 = dims[1] + 1, dims[2] + 1
        idx = (corner[..., 0] * ny1 + corner[..., 1]) * nz1 + corner[..., 2]
        wx = np.where(_CORNERS[None, :, 0] == 1, frac[:, None, 0], 1.0 - frac[:, None, 0])
        wy = np.where(_CORNERS[None, :, 1] == 1, frac[:, None, 1], 1.0 - frac[:, None, 1])
        wz = np.where(_CORNERS[None, :, 2] == 1, frac[:, None, 2], 1.0 - frac[:, None, 2])
        weights = (wx * wy * wz) * inside[:, None]
        return idx, weights, inside


def trilinear_interpolate(grid: VoxelGrid, x, which="scene"):
    """Blend the 8 enclosing vertex features at ``x`` (..., 3).

    Points outside the grid get a zero vector; the returned flag array marks
    which points were inside.
    """
    x = np.asarray(x)
    feats = grid.features(which)
    idx, w, inside = grid.locate(x)
    out = np.einsum("nc,ncd->nd", w.astype(feats.dtype), feats[idx])
    return out.reshape(*x.shape[:-1], feats.shape[1]), inside.reshape(x.shape[:-1])


def scatter_matrix(idx, weights, n_vertices):
    """Sparse (n_vertices, n_points) matrix; ``M @ grad`` scatters point grads to vertices."""
    n = idx.shape[0]
    cols = np.repeat(np.arange(n), idx.shape[1])
    return scipy.sparse.csr_matrix(
        (weights.ravel(), (idx.ravel(), cols)), shape=(n_vertices, n)
    )


def trilinear_backward(grid: VoxelGrid, x, grad_features):
    """Gradient of the interpolated features w.r.t. every vertex feature."""
    idx, w, _ = grid.locate(x)
    n_vert = grid.scene_features.shape[0]
    g = np.asarray(grad_features).reshape(idx.shape[0], -1)
    return np.asarray(scatter_matrix(idx, w.astype(g.dtype), n_vert) @ g)


@dataclass
class EmbeddingTape:
    idx: np.ndarray
    weights: np.ndarray
    f_scene: np.ndarray
    f_object: np.ndarray
    enc_scene: np.ndarray
    enc_object: np.ndarray
    n_xyz: int
    cfg: EncodingConfig


def hybrid_embed(x, d, grid: VoxelGrid, cfg: EncodingConfig, with_object=True):
    """Embed sample positions ``x`` and directions ``d`` (both (n, 3)).

    Returns ``(space_embedding, dir_embedding, object_feature_embedding, tape)``
    where the space embedding is ``[gamma(x_normalized), gamma(f_scene(x))]``.
    ``object_feature_embedding`` is None when ``with_object`` is false.
    """
    x = np.asarray(x)
    d = np.asarray(d)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(d))):
        raise NumericError("hybrid_embed received non-finite input")
    dtype = grid.scene_features.dtype
    idx, w, _ = grid.locate(x)
    w = w.astype(dtype)
    f_scn = np.einsum("nc,ncd->nd", w, grid.scene_features[idx])
    xn = grid.normalize(x.astype(dtype, copy=False))
    gx = positional_encode(xn, cfg.freq_count_xyz, cfg.include_identity)
    gf = positional_encode(f_scn, cfg.freq_count_feature, cfg.include_identity)
    space = np.concatenate([gx, gf], axis=-1)
    dir_emb = positional_encode(d.astype(dtype, copy=False), cfg.freq_count_dir, cfg.include_identity)
    f_obj = obj_emb = None
    if with_object:
        f_obj = np.einsum("nc,ncd->nd", w, grid.object_features[idx])
        obj_emb = positional_encode(f_obj, cfg.freq_count_feature, cfg.include_identity)
    tape = EmbeddingTape(idx, w, f_scn, f_obj, gf, obj_emb, gx.shape[-1], cfg)
    return space, dir_emb, obj_emb, tape


def hybrid_embed_backward(tape: EmbeddingTape, n_vertices, d_space, d_object=None):
    """Vertex-feature gradients ``(g_scene, g_object)`` from embedding gradients."""
    cfg = tape.cfg
    scatter = scatter_matrix(tape.idx, tape.weights, n_vertices)
    d_fs = positional_encode_backward(
        tape.f_scene, d_space[:, tape.n_xyz:], cfg.freq_count_feature, cfg.include_identity,
        tape.enc_scene,
    )
    g_scene = np.asarray(scatter @ d_fs)
    g_object = None
    if d_object is not None:
        d_fo = positional_encode_backward(
            tape.f_object, d_object, cfg.freq_count_feature, cfg.include_identity,
            tape.enc_object,
        )
        g_object = np.asarray(scatter @ d_fo)
    return g_scene, g_object
