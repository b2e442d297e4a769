"""Two-branch radiance field: scene MLP, code-conditioned object MLP, voxel grid.

Both branches share one topology:

    trunk:   hidden_layers x (Linear -> ReLU)
    density: Linear(width, 1) -> softplus
    color:   Linear(width + dir_dim, color_width) -> ReLU -> Linear(., 3) -> sigmoid

The object branch consumes ``[space_embedding, gamma(f_obj), code]``.  The two
branches share no weights.  Gradients are computed by explicit reverse-mode
passes over recorded activations (no autodiff framework).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .embedding import EncodingConfig, VoxelGrid, hybrid_embed, hybrid_embed_backward
from .errors import ConfigurationError, InputError, LoadError, UsageError


@dataclass(frozen=True)
class NetworkConfig:
    hidden_layers: int = 2
    width: int = 64
    color_width: int = 32
    code_dim: int = 32
    code_init_scale: float = 1e-2
    density_bias_init: float = -2.0


@dataclass(frozen=True)
class ModelConfig:
    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    grid_resolution: int = 32
    d_scene: int = 16
    d_object: int = 16
    grid_init_scale: float = 1e-2

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(
            encoding=EncodingConfig(**d.get("encoding", {})),
            network=NetworkConfig(**d.get("network", {})),
            **{k: v for k, v in d.items() if k not in ("encoding", "network")},
        )

    def space_dim(self):
        enc = self.encoding
        return enc.out_dim(3, enc.freq_count_xyz) + enc.out_dim(self.d_scene, enc.freq_count_feature)

    def dir_dim(self):
        return self.encoding.out_dim(3, self.encoding.freq_count_dir)

    def object_feature_dim(self):
        return self.encoding.out_dim(self.d_object, self.encoding.freq_count_feature)


@dataclass
class FieldOutput:
    sigma: np.ndarray
    color: np.ndarray


@dataclass
class ObjectCodeLibrary:
    codes: np.ndarray

    def __post_init__(self):
        if self.codes.ndim != 2 or self.codes.shape[0] < 1:
            raise InputError("code library needs at least one code")

    @property
    def K(self):
        return self.codes.shape[0]


def code_lookup(library: ObjectCodeLibrary, k):
    """Live view of the activation code of object ``k`` (1-based)."""
    if not 1 <= int(k) <= library.K:
        raise InputError(f"object id {k} outside 1..{library.K}")
    return library.codes[int(k) - 1]


def softplus(x):
    return np.logaddexp(0.0, x).astype(x.dtype, copy=False)


def init_branch(prefix, in_dim, dir_dim, cfg: NetworkConfig, rng, dtype=np.float32):
    """He-initialized weights for one branch, keyed ``prefix.layer.W`` / ``.b``."""

    def linear(name, n_in, n_out, gain=2.0):
        std = np.sqrt(gain / n_in)
        params[f"{prefix}.{name}.W"] = rng.normal(0.0, std, size=(n_in, n_out)).astype(dtype)
        params[f"{prefix}.{name}.b"] = np.zeros(n_out, dtype=dtype)

    params = {}
    n_in = in_dim
    for i in range(cfg.hidden_layers):
        linear(f"l{i}", n_in, cfg.width)
        n_in = cfg.width
    linear("sigma", n_in, 1, gain=1.0)
    params[f"{prefix}.sigma.b"][:] = cfg.density_bias_init
    linear("color0", n_in + dir_dim, cfg.color_width)
    linear("color1", cfg.color_width, 3, gain=1.0)
    return params


def _n_hidden(params, prefix):
    n = 0
    while f"{prefix}.l{n}.W" in params:
        n += 1
    return n


def branch_forward(params, prefix, inputs, dir_emb):
    """Run one branch. Returns ``(FieldOutput, cache)``."""
    W0 = params[f"{prefix}.l0.W"] if f"{prefix}.l0.W" in params else params[f"{prefix}.sigma.W"]
    if inputs.shape[-1] != W0.shape[0]:
        raise ConfigurationError(
            f"{prefix}: input dim {inputs.shape[-1]} != expected {W0.shape[0]}"
        )
    n_dir = params[f"{prefix}.color0.W"].shape[0] - params[f"{prefix}.sigma.W"].shape[0]
    if dir_emb.shape[-1] != n_dir:
        raise ConfigurationError(f"{prefix}: direction dim {dir_emb.shape[-1]} != expected {n_dir}")
    h = inputs
    hidden = [inputs]
    for i in range(_n_hidden(params, prefix)):
        h = np.maximum(h @ params[f"{prefix}.l{i}.W"] + params[f"{prefix}.l{i}.b"], 0.0)
        hidden.append(h)
    raw_sigma = (h @ params[f"{prefix}.sigma.W"] + params[f"{prefix}.sigma.b"])[..., 0]
    hd = np.concatenate([h, dir_emb], axis=-1)
    c0 = np.maximum(hd @ params[f"{prefix}.color0.W"] + params[f"{prefix}.color0.b"], 0.0)
    color = expit(c0 @ params[f"{prefix}.color1.W"] + params[f"{prefix}.color1.b"])
    cache = {"hidden": hidden, "raw_sigma": raw_sigma, "hd": hd, "c0": c0, "color": color}
    return FieldOutput(softplus(raw_sigma), color), cache


def branch_backward(params, prefix, cache, d_sigma, d_color, grads):
    """Accumulate parameter grads into ``grads``; return (d_inputs, d_dir)."""

    def acc(name, g):
        key = f"{prefix}.{name}"
        if key in grads:
            grads[key] += g
        else:
            grads[key] = g

    hidden = cache["hidden"]
    h = hidden[-1]
    n_h = h.shape[-1]
    color = cache["color"]
    dz1 = d_color * color * (1.0 - color)
    acc("color1.W", cache["c0"].T @ dz1)
    acc("color1.b", dz1.sum(axis=0))
    dc0 = (dz1 @ params[f"{prefix}.color1.W"].T) * (cache["c0"] > 0)
    acc("color0.W", cache["hd"].T @ dc0)
    acc("color0.b", dc0.sum(axis=0))
    dhd = dc0 @ params[f"{prefix}.color0.W"].T
    dh = dhd[:, :n_h]
    d_dir = dhd[:, n_h:]

    draw = (d_sigma * expit(cache["raw_sigma"]))[:, None]
    acc("sigma.W", h.T @ draw)
    acc("sigma.b", draw.sum(axis=0))
    dh = dh + draw @ params[f"{prefix}.sigma.W"].T

    for i in reversed(range(len(hidden) - 1)):
        dz = dh * (hidden[i + 1] > 0)
        acc(f"l{i}.W", hidden[i].T @ dz)
        acc(f"l{i}.b", dz.sum(axis=0))
        dh = dz @ params[f"{prefix}.l{i}.W"].T
    return dh, d_dir


def scene_forward(space_embedding, dir_embedding, params):
    """Scene branch: density from the space embedding, color also sees direction."""
    return branch_forward(params, "scene", space_embedding, dir_embedding)


def object_forward(space_embedding, dir_embedding, object_feature_embedding, code, params):
    """Object branch conditioned on ``code`` (one row per sample, or a single vector)."""
    code = np.broadcast_to(code, (space_embedding.shape[0], np.shape(code)[-1]))
    inputs = np.concatenate([space_embedding, object_feature_embedding, code], axis=-1)
    return branch_forward(params, "object", inputs, dir_embedding)


@dataclass
class FieldTape:
    kind: str
    version: int
    emb: object
    cache: dict
    code_index: np.ndarray = None


class FieldModel:
    """Voxel grid + scene branch + object branch + object code library.

    ``params`` maps names to arrays.  Grid features and codes appear there as
    ``grid.scene``, ``grid.object`` and ``codes`` and are the same array
    objects held by ``grid`` and ``library``; updates must be in place.
    """

    def __init__(self, config: ModelConfig, grid: VoxelGrid, library: ObjectCodeLibrary,
                 branch_params: dict, bounds):
        self.config = config
        self.grid = grid
        self.library = library
        self.bounds = tuple(np.asarray(b, dtype=np.float64) for b in bounds)
        self.params = dict(branch_params)
        self.params["grid.scene"] = grid.scene_features
        self.params["grid.object"] = grid.object_features
        self.params["codes"] = library.codes
        self.version = 0

    @classmethod
    def create(cls, bounds, n_objects, config: ModelConfig = None, seed=0, dtype=np.float32):
        config = ModelConfig() if config is None else config
        rng = np.random.default_rng(seed)
        grid = VoxelGrid.create(bounds, config.grid_resolution, config.d_scene, config.d_object,
                                rng=rng, init_scale=config.grid_init_scale, dtype=dtype)
        net = config.network
        codes = rng.normal(0.0, net.code_init_scale, size=(n_objects, net.code_dim)).astype(dtype)
        params = init_branch("scene", config.space_dim(), config.dir_dim(), net, rng, dtype)
        obj_in = config.space_dim() + config.object_feature_dim() + net.code_dim
        params.update(init_branch("object", obj_in, config.dir_dim(), net, rng, dtype))
        return cls(config, grid, ObjectCodeLibrary(codes), params, bounds)

    @property
    def dtype(self):
        return self.grid.scene_features.dtype

    @property
    def n_objects(self):
        return self.library.K

    def mark_updated(self):
        """Invalidate outstanding tapes after a parameter update."""
        self.version += 1

    def query_scene(self, x, d):
        x = np.asarray(x).reshape(-1, 3)
        d = np.broadcast_to(d, x.shape)
        space, dir_emb, _, emb = hybrid_embed(x, d, self.grid, self.config.encoding, with_object=False)
        out, cache = scene_forward(space, dir_emb, self.params)
        return out, FieldTape("scene", self.version, emb, cache)

    def query_object(self, x, d, k):
        """Object branch at ``x`` for object id ``k`` (int or one id per point)."""
        x = np.asarray(x).reshape(-1, 3)
        d = np.broadcast_to(d, x.shape)
        k = np.broadcast_to(np.asarray(k, dtype=np.int64), x.shape[:1])
        if np.any(k < 1) or np.any(k > self.n_objects):
            raise InputError(f"object id outside 1..{self.n_objects}")
        space, dir_emb, obj_emb, emb = hybrid_embed(x, d, self.grid, self.config.encoding)
        code = self.library.codes[k - 1]
        out, cache = object_forward(space, dir_emb, obj_emb, code, self.params)
        return out, FieldTape("object", self.version, emb, cache, k - 1)

    def backward(self, tape: FieldTape, d_sigma, d_color, grads=None):
        """Reverse pass for one forward tape; accumulates into ``grads``."""
        if tape.version != self.version:
            raise UsageError("activation tape is stale: parameters changed since forward")
        grads = {} if grads is None else grads
        d_sigma = np.asarray(d_sigma, dtype=self.dtype).reshape(-1)
        d_color = np.asarray(d_color, dtype=self.dtype).reshape(-1, 3)
        d_in, _ = branch_backward(self.params, tape.kind, tape.cache, d_sigma, d_color, grads)
        n_vert = self.grid.scene_features.shape[0]
        if tape.kind == "scene":
            g_scn, _ = hybrid_embed_backward(tape.emb, n_vert, d_in)
        else:
            space_dim = self.config.space_dim()
            obj_dim = self.config.object_feature_dim()
            d_space = d_in[:, :space_dim]
            d_obj = d_in[:, space_dim:space_dim + obj_dim]
            d_code = d_in[:, space_dim + obj_dim:]
            g_scn, g_obj = hybrid_embed_backward(tape.emb, n_vert, d_space, d_obj)
            onehot = (tape.code_index[None, :] == np.arange(self.n_objects)[:, None]).astype(d_code.dtype)
            g_codes = onehot @ d_code
            _accumulate(grads, "grid.object", g_obj)
            _accumulate(grads, "codes", g_codes)
        _accumulate(grads, "grid.scene", g_scn)
        return grads

    def copy(self):
        state = self.state_dict()
        state["grid.occupancy"] = self.grid.occupancy.copy()
        return self.from_state(self.config, self.bounds, self.grid_meta(), state, dtype=self.dtype)

    def state_dict(self):
        return {k: v.copy() for k, v in self.params.items()}

    def grid_meta(self):
        return {
            "dims": list(self.grid.dims),
            "origin": [float(v) for v in self.grid.origin],
            "cell_size": float(self.grid.cell_size),
            "D_scn": int(self.grid.scene_features.shape[1]),
            "D_obj": int(self.grid.object_features.shape[1]),
        }

    @classmethod
    def from_state(cls, config, bounds, grid_meta, tensors, dtype=np.float32):
        dims = tuple(grid_meta["dims"])
        occupancy = tensors.get("grid.occupancy")
        occupancy = (np.ones(dims, dtype=bool) if occupancy is None
                     else np.asarray(occupancy).astype(bool).reshape(dims))
        grid = VoxelGrid(
            np.asarray(grid_meta["origin"], dtype=np.float64),
            float(grid_meta["cell_size"]),
            dims,
            np.array(tensors["grid.scene"], dtype=dtype),
            np.array(tensors["grid.object"], dtype=dtype),
            occupancy,
        )
        library = ObjectCodeLibrary(np.array(tensors["codes"], dtype=dtype))
        branch = {k: np.array(v, dtype=dtype) for k, v in tensors.items()
                  if k.startswith(("scene.", "object."))}
        return cls(config, grid, library, branch, bounds)


def _accumulate(grads, key, g):
    if key in grads:
        grads[key] += g
    else:
        grads[key] = g


CHECKPOINT_MAGIC = b"OCNF"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: FieldModel, extra=None):
    """Write ``model`` as: magic, u32 version, u32 header length, JSON header,
    then every tensor as little-endian float32 in header order."""
    names = sorted(model.params)
    tensors = {n: np.ascontiguousarray(model.params[n], dtype="<f4") for n in names}
    tensors["grid.occupancy"] = model.grid.occupancy.astype("<f4")
    names.append("grid.occupancy")
    table, offset = [], 0
    for n in names:
        nbytes = tensors[n].nbytes
        table.append({"name": n, "shape": list(tensors[n].shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "config": model.config.to_dict(),
        "bounds": [list(map(float, b)) for b in model.bounds],
        "grid": model.grid_meta(),
        "n_objects": model.n_objects,
        "tensors": table,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for n in names:
            f.write(tensors[n].tobytes())


def load_checkpoint(path, dtype=np.float32):
    """Inverse of :func:`save_checkpoint`. Returns ``(model, extra)``."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise LoadError(path, f"cannot read checkpoint ({exc.strerror})") from exc
    if data[:4] != CHECKPOINT_MAGIC:
        raise LoadError(path, "not a checkpoint file")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise LoadError(path, f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise LoadError(path, "corrupt checkpoint header") from exc
    body = data[12 + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(body):
            raise LoadError(path, f"truncated tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(body[start:start + n], dtype="<f4").reshape(entry["shape"])
    config = ModelConfig.from_dict(header["config"])
    model = FieldModel.from_state(config, header["bounds"], header["grid"], tensors, dtype=dtype)
    return model, header.get("extra", {})
