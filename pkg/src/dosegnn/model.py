"""Predictors: CT patch encoders, the bipartite GNN, and the two grid-matching baselines.

All three predictor kinds share one shape of computation per plan::

    unique CT patches --encoder--> embeddings --aggregate--> per-dose-node vectors --readout--> dose

and differ only in how the aggregation matrix is built (graph mean, k-nearest
mean, or nearest-voxel gather) and whether dose-node positional encodings
take part. Identical patches are encoded once and their weights merged into
the aggregation matrix, which is exact because the encoder acts row-wise.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from dosegnn import autodiff as ad
from dosegnn.autodiff import Tensor
from dosegnn.features import (
    dose_node_features,
    normalize_hu,
    positional_encode,
    raw_patches,
    unique_rows,
)
from dosegnn.graph import BipartiteGraph, GraphConfig, build_graph
from dosegnn.rng import SplitMix64
from dosegnn.volume import PlanBundle, VoxelGrid, knn_on_grid

MODEL_KINDS = ("dosegnn", "heuristic1", "heuristic2")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "mlp"
    patch_size: int = 5
    embed_dim: int = 64
    mlp_hidden: tuple[int, ...] = (128, 64)
    cnn_channels: int = 8
    cnn_kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "mlp_hidden", tuple(self.mlp_hidden))
        if self.kind not in ("mlp", "cnn3d"):
            raise ModelError(f"unknown encoder kind {self.kind!r}")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ModelError(f"patch_size must be odd, got {self.patch_size}")
        if self.embed_dim < 4 or self.embed_dim % 2:
            raise ModelError(f"embed_dim must be even and >= 4, got {self.embed_dim}")
        if self.kind == "cnn3d" and self.cnn_kernel > self.patch_size:
            raise ModelError("cnn kernel larger than patch")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "dosegnn"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    threshold: float = 5.0
    pe_base: float = 10000.0
    n_rounds: int = 2
    msg_hidden: tuple[int, ...] = ()
    upd_hidden: tuple[int, ...] = (64,)
    readout_hidden: tuple[int, ...] = (64,)
    k: int = 8

    def __post_init__(self):
        for name in ("msg_hidden", "upd_hidden", "readout_hidden"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if isinstance(self.encoder, dict):
            object.__setattr__(self, "encoder", EncoderConfig(**self.encoder))
        if self.kind not in MODEL_KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}")
        if self.kind == "heuristic2" and self.k < 1:
            raise ModelError("k must be >= 1")
        if self.kind == "dosegnn" and self.encoder.embed_dim % 4:
            raise ModelError("dosegnn needs embed_dim divisible by 4 for the positional encoding")

    @property
    def d(self) -> int:
        return self.encoder.embed_dim

    @property
    def graph(self) -> GraphConfig:
        return GraphConfig(threshold=self.threshold)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, doc: dict) -> ModelConfig:
        return cls(**doc)


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]

    @property
    def kind(self) -> str:
        return self.config.kind

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def to_json(self) -> str:
        doc = {
            "kind": self.kind,
            "config": self.config.to_dict(),
            "params": {
                name: {"shape": list(t.shape), "data": t.data.ravel().tolist()}
                for name, t in self.params.items()
            },
        }
        # float repr is shortest round-trip, so reading back is exact
        return json.dumps(doc, indent=1) + "\n"

    def checksum(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> Model:
        doc = json.loads(text)
        config = ModelConfig.from_dict(doc["config"])
        if doc.get("kind", config.kind) != config.kind:
            raise ModelError("model kind does not match its config")
        params = {
            name: Tensor(np.array(p["data"], dtype=np.float64).reshape(p["shape"]), requires_grad=True)
            for name, p in doc["params"].items()
        }
        expected = _param_shapes(config)
        if {k: tuple(v.shape) for k, v in params.items()} != expected:
            raise ModelError("parameter names or shapes do not match the model config")
        return cls(config, params)

    @classmethod
    def load(cls, path: str | Path) -> Model:
        return cls.from_json(Path(path).read_text())


def _mlp_shapes(prefix: str, sizes: list[int]) -> dict[str, tuple]:
    shapes = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        shapes[f"{prefix}.{i}.w"] = (a, b)
        shapes[f"{prefix}.{i}.b"] = (b,)
    return shapes


def _param_shapes(config: ModelConfig) -> dict[str, tuple]:
    enc = config.encoder
    d = enc.embed_dim
    p3 = enc.patch_size**3
    if enc.kind == "mlp":
        shapes = _mlp_shapes("encoder", [p3, *enc.mlp_hidden, d])
    else:
        k = enc.cnn_kernel
        o = enc.patch_size - k + 1
        shapes = {
            "encoder.conv.w": (enc.cnn_channels, k, k, k),
            "encoder.conv.b": (enc.cnn_channels,),
            **_mlp_shapes("encoder.out", [enc.cnn_channels * o**3, d]),
        }
    if config.kind == "dosegnn":
        for t in range(config.n_rounds):
            shapes.update(_mlp_shapes(f"msg{t}", [d, *config.msg_hidden, d]))
            shapes.update(_mlp_shapes(f"upd{t}", [2 * d, *config.upd_hidden, d]))
    shapes.update(_mlp_shapes("readout", [d, *config.readout_hidden, 1]))
    return shapes


def init_model(config: ModelConfig, seed: int) -> Model:
    """Glorot-uniform weights and zero biases, drawn in parameter-name order."""
    rng = SplitMix64(seed)
    params = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            if len(shape) == 2:
                fan_in, fan_out = shape
            else:  # conv kernels (c, k, k, k)
                receptive = int(np.prod(shape[1:]))
                fan_in, fan_out = receptive, shape[0] * receptive
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform_array(int(np.prod(shape)), -bound, bound).reshape(shape)
        params[name] = Tensor(data, requires_grad=True)
    return Model(config, params)


def mlp(params: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    """Linear layers with relu between them; the last layer stays linear."""
    n = 0
    while f"{prefix}.{n}.w" in params:
        n += 1
    for i in range(n):
        x = ad.linear(x, params[f"{prefix}.{i}.w"], params[f"{prefix}.{i}.b"])
        if i < n - 1:
            x = ad.relu(x)
    return x


def encode_patches(model: Model, patches) -> Tensor:
    """Embed normalized patches ``(n, p**3)`` into ``(n, d)``."""
    enc = model.config.encoder
    x = ad.as_tensor(patches)
    if enc.kind == "mlp":
        return mlp(model.params, "encoder", x)
    p = enc.patch_size
    cubes = ad.reshape(x, (x.shape[0], p, p, p))
    feat = ad.relu(ad.conv3d_valid(cubes, model.params["encoder.conv.w"], model.params["encoder.conv.b"]))
    flat = ad.reshape(feat, (x.shape[0], int(np.prod(feat.shape[1:]))))
    return mlp(model.params, "encoder.out", flat)


def encode_ct_nodes(model: Model, ct: VoxelGrid, ct_flat: np.ndarray) -> Tensor:
    """One embedding row per CT node, from the patch centered on it."""
    patches = raw_patches(ct, ct.unflatten_index(ct_flat), model.config.encoder.patch_size)
    return encode_patches(model, normalize_hu(patches))


def mean_aggregation_matrix(graph: BipartiteGraph) -> sp.csr_matrix:
    """Row-stochastic ``(n_dose, n_ct)`` matrix averaging each dose node's neighbors."""
    deg = graph.degrees
    rows = np.repeat(np.arange(graph.n_dose), deg)
    return sp.csr_matrix(
        (1.0 / deg[rows], (rows, graph.indices)), shape=(graph.n_dose, graph.n_ct)
    )


def gnn_head(model: Model, ct_embeddings: Tensor, aggregation: sp.spmatrix,
             dose_encodings, aggregation_t: sp.spmatrix | None = None) -> Tensor:
    """Message passing from CT rows to dose nodes plus readout, normalized units."""
    h = ad.as_tensor(dose_encodings)
    # an affine message function commutes with the row-stochastic mean, so
    # the CT embeddings are averaged once and transformed per round
    affine = not model.config.msg_hidden
    if aggregation_t is None:
        aggregation_t = aggregation.T.tocsr()
    pooled = ad.spmm(aggregation, ct_embeddings, aggregation_t) if affine else None
    for t in range(model.config.n_rounds):
        if affine:
            m = mlp(model.params, f"msg{t}", pooled)
        else:
            m = ad.spmm(aggregation, mlp(model.params, f"msg{t}", ct_embeddings), aggregation_t)
        h = mlp(model.params, f"upd{t}", ad.concat([h, m], axis=1))
    return mlp(model.params, "readout", h)


def dosegnn_forward(model: Model, graph: BipartiteGraph, ct_embeddings: Tensor,
                    dose_encodings, prescription_dose: float = 1.0) -> Tensor:
    """Predicted dose per dose node, shape ``(n_dose, 1)``.

    Each round, a dose node averages ``msg(h_u)`` over its CT neighbors and
    updates ``h_v <- upd([h_v, mean])``; CT embeddings stay fixed. The readout
    is linear and is scaled by ``prescription_dose``.
    """
    if model.kind != "dosegnn":
        raise ModelError(f"dosegnn_forward needs a dosegnn model, got {model.kind}")
    if ct_embeddings.shape[0] != graph.n_ct:
        raise ModelError(f"{ct_embeddings.shape[0]} CT embeddings for {graph.n_ct} CT nodes")
    if np.shape(dose_encodings)[0] != graph.n_dose:
        raise ModelError(f"{np.shape(dose_encodings)[0]} dose encodings for {graph.n_dose} dose nodes")
    out = gnn_head(model, ct_embeddings, mean_aggregation_matrix(graph), dose_encodings)
    return ad.scale(out, prescription_dose) if prescription_dose != 1.0 else out


def resample_greedy(ct: VoxelGrid, target: VoxelGrid) -> VoxelGrid:
    """CT values pulled onto ``target`` geometry by nearest-voxel lookup (clamped)."""
    if ct.same_geometry(target):
        return ct.with_values(ct.values)
    idx = ct.world_to_nearest_index(target.voxel_centers())
    return VoxelGrid(target.origin, target.spacing, target.dims, ct.values[ct.flatten_index(idx)], ct.unit)


@dataclass
class PlanInputs:
    """Constant, per-plan inputs of a forward pass."""

    patches: np.ndarray          # unique normalized patches (n_u, p**3)
    aggregation: sp.csr_matrix   # (n_dose, n_u)
    dose_encodings: np.ndarray | None
    prescription_dose: float
    target: np.ndarray | None    # normalized ground truth (n_dose, 1)
    graph: BipartiteGraph | None = None
    aggregation_t: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        self.aggregation_t = self.aggregation.T.tocsr()


def _merge_columns(rows, cols, weights, inverse, n_rows, n_unique) -> sp.csr_matrix:
    m = sp.coo_matrix((weights, (rows, inverse[cols])), shape=(n_rows, n_unique)).tocsr()
    m.sum_duplicates()
    m.sort_indices()
    return m


def prepare_inputs(config: ModelConfig, plan: PlanBundle, graph: BipartiteGraph | None = None,
                   threads: int = 1) -> PlanInputs:
    p = config.encoder.patch_size
    n_dose = plan.dose.size
    if config.kind == "dosegnn":
        if graph is None:
            graph = build_graph(plan.ct, plan.dose, config.graph, threads=threads)
        raw = raw_patches(plan.ct, plan.ct.unflatten_index(graph.ct_flat), p)
        unique, inverse = unique_rows(raw)
        deg = graph.degrees
        rows = np.repeat(np.arange(n_dose), deg)
        agg = _merge_columns(rows, graph.indices, 1.0 / deg[rows], inverse, n_dose, len(unique))
        feats = dose_node_features(plan.dose, plan.ptv_center)
        enc = positional_encode(feats, config.d, config.pe_base)
    elif config.kind == "heuristic1":
        distorted = resample_greedy(plan.ct, plan.dose)
        raw = raw_patches(distorted, distorted.unflatten_index(np.arange(n_dose)), p)
        unique, inverse = unique_rows(raw)
        agg = _merge_columns(np.arange(n_dose), np.arange(n_dose), np.ones(n_dose), inverse, n_dose, len(unique))
        enc = None
    else:
        knn, _ = knn_on_grid(plan.ct, plan.dose.voxel_centers(), config.k)
        needed, local = np.unique(knn.ravel(), return_inverse=True)
        raw = raw_patches(plan.ct, plan.ct.unflatten_index(needed), p)
        unique, inverse = unique_rows(raw)
        rows = np.repeat(np.arange(n_dose), config.k)
        agg = _merge_columns(rows, local.ravel(), np.full(rows.size, 1.0 / config.k), inverse,
                             n_dose, len(unique))
        enc = None
    target = None
    if plan.has_dose:
        target = (plan.dose.values.astype(np.float64) / plan.prescription_dose)[:, None]
    return PlanInputs(normalize_hu(unique), agg, enc, plan.prescription_dose, target, graph)


def forward(model: Model, inputs: PlanInputs) -> Tensor:
    """Normalized predictions ``(n_dose, 1)``; multiply by Rx for Gy."""
    h = encode_patches(model, inputs.patches)
    if model.kind == "dosegnn":
        if inputs.dose_encodings is None:
            raise ModelError("dosegnn inputs lack dose encodings")
        return gnn_head(model, h, inputs.aggregation, inputs.dose_encodings, inputs.aggregation_t)
    return mlp(model.params, "readout", ad.spmm(inputs.aggregation, h, inputs.aggregation_t))


def predict(model: Model, plan: PlanBundle, inputs: PlanInputs | None = None,
            threads: int = 1) -> np.ndarray:
    """Predicted dose in Gy on the plan's dose grid, flat order."""
    inputs = inputs or prepare_inputs(model.config, plan, threads=threads)
    return forward(model, inputs).data[:, 0] * inputs.prescription_dose


def heuristic1_predict(model: Model, plan: PlanBundle) -> np.ndarray:
    if model.kind != "heuristic1":
        raise ModelError(f"expected a heuristic1 model, got {model.kind}")
    return predict(model, plan)


def heuristic2_predict(model: Model, plan: PlanBundle) -> np.ndarray:
    if model.kind != "heuristic2":
        raise ModelError(f"expected a heuristic2 model, got {model.kind}")
    return predict(model, plan)
