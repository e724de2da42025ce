"""Multi-task crystal graph convolutional network.

Pipeline: linear embedding of raw atom features, ``n_conv`` graph
convolutions (plain or edge-gated), average pooling over atoms, then one
independent fully-connected head per task.  Everything up to and including
the pooled crystal vector is shared between tasks; the heads share nothing.

Graphs are processed in batches: a :class:`GraphBatch` is the disjoint
union of several crystal graphs, with ``graph_index`` mapping each atom to
its crystal.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .graph import CrystalGraph

INIT_STREAM = 1


@dataclass(frozen=True)
class ModelConfig:
    conv_variant: str = "gated"  # "gated" or "simple"
    n_conv: int = 3
    atom_len: int = 64
    hidden_len: int = 128
    n_hidden_per_task: int = 1
    n_tasks: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.conv_variant not in ("gated", "simple"):
            raise ValueError(f"conv_variant must be 'gated' or 'simple', got {self.conv_variant!r}")
        for name in ("n_conv", "atom_len", "hidden_len", "n_hidden_per_task", "n_tasks"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))


@dataclass
class GraphBatch:
    atom_features: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    bond_features: np.ndarray
    graph_index: np.ndarray
    n_graphs: int

    @property
    def n_atoms(self) -> int:
        return self.atom_features.shape[0]


def collate(graphs: Sequence[CrystalGraph]) -> GraphBatch:
    if not graphs:
        raise ValueError("cannot collate an empty list of graphs")
    offsets = np.cumsum([0] + [g.n_atoms for g in graphs[:-1]])
    return GraphBatch(
        np.concatenate([g.atom_features for g in graphs]),
        np.concatenate([g.edge_src + o for g, o in zip(graphs, offsets)]),
        np.concatenate([g.edge_dst + o for g, o in zip(graphs, offsets)]),
        np.concatenate([g.bond_features for g in graphs]),
        np.concatenate([np.full(g.n_atoms, b) for b, g in enumerate(graphs)]),
        len(graphs),
    )


def _as_batch(graph) -> GraphBatch:
    return graph if isinstance(graph, GraphBatch) else collate([graph])


class ModelParams:
    """Named parameter arrays in a fixed order."""

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self):
        return len(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    @staticmethod
    def is_weight(name: str) -> bool:
        return name.rsplit(".", 1)[-1].startswith("W")

    def head_names(self, task: int) -> list[str]:
        return [k for k in self.arrays if k.startswith(f"head{task}.")]

    def bind(self, tape: nx.Tape | None = None) -> dict[str, nx.Tensor]:
        if tape is None:
            return {k: nx.Tensor(v, name=k) for k, v in self.arrays.items()}
        return {k: tape.leaf(v, name=k) for k, v in self.arrays.items()}


def init_params(cfg: ModelConfig, in_len: int, bond_len: int) -> ModelParams:
    """Glorot-uniform weights and zero biases.

    Draw order: embedding, conv layers in depth order (W_c then W_s), then
    each head in task order (hidden layers, then output).  Shared parts
    therefore draw identically for any task count.
    """
    rng = np.random.default_rng([cfg.seed, INIT_STREAM])
    A, H = cfg.atom_len, cfg.hidden_len
    arrays: dict[str, np.ndarray] = {}

    def weight(name, fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        arrays[name] = rng.uniform(-limit, limit, size=(fan_in, fan_out))

    weight("embed.W", in_len, A)
    arrays["embed.b"] = np.zeros(A)
    for t in range(cfg.n_conv):
        if cfg.conv_variant == "gated":
            weight(f"conv{t}.W_c", 2 * A + bond_len, A)
            weight(f"conv{t}.W_s", 2 * A + bond_len, A)
        else:
            weight(f"conv{t}.W_c", A + bond_len, A)
            weight(f"conv{t}.W_s", A, A)
        arrays[f"conv{t}.b_c"] = np.zeros(A)
        arrays[f"conv{t}.b_s"] = np.zeros(A)
    for p in range(cfg.n_tasks):
        width = A
        for layer in range(cfg.n_hidden_per_task):
            weight(f"head{p}.fc{layer}.W", width, H)
            arrays[f"head{p}.fc{layer}.b"] = np.zeros(H)
            width = H
        weight(f"head{p}.out.W", width, 1)
        arrays[f"head{p}.out.b"] = np.zeros(1)
    return ModelParams(arrays)


def zero_params(cfg: ModelConfig, in_len: int, bond_len: int) -> ModelParams:
    return ModelParams({k: np.zeros_like(v) for k, v in init_params(cfg, in_len, bond_len).items()})


# ---------------------------------------------------------------------------
# layers; ``layer`` maps short names (W_c, W_s, b_c, b_s) to tensors


def conv_simple(state, graph, layer: Mapping[str, nx.Tensor]) -> nx.Tensor:
    """``g[(sum_jk v_j ++ u_ijk) W_c + v_i W_s + b_c + b_s]`` with g = softplus."""
    b = _as_batch(graph)
    msg = nx.concat([nx.gather_rows(state, b.edge_dst), nx.Tensor(b.bond_features)])
    agg = nx.segment_sum(msg, b.edge_src, b.n_atoms)
    pre = nx.add(nx.linear(agg, layer["W_c"], layer["b_c"]), nx.linear(state, layer["W_s"], layer["b_s"]))
    return nx.softplus(pre)


def conv_gated(state, graph, layer: Mapping[str, nx.Tensor]) -> nx.Tensor:
    """``v_i + sum_jk sigmoid(z W_c + b_c) * softplus(z W_s + b_s)`` with ``z = v_i ++ v_j ++ u_ijk``."""
    b = _as_batch(graph)
    z = nx.concat([nx.gather_rows(state, b.edge_src), nx.gather_rows(state, b.edge_dst), nx.Tensor(b.bond_features)])
    gate = nx.sigmoid(nx.linear(z, layer["W_c"], layer["b_c"]))
    core = nx.softplus(nx.linear(z, layer["W_s"], layer["b_s"]))
    return nx.add(state, nx.segment_sum(nx.mul(gate, core), b.edge_src, b.n_atoms))


def pool(state, graph_index=None, n_graphs: int = 1) -> nx.Tensor:
    """Average atom vectors per crystal; a single graph yields a vector."""
    if graph_index is None:
        return nx.mean_rows(state)
    return nx.segment_mean(state, graph_index, n_graphs)


def predict_tasks(v_g, heads: Mapping[str, nx.Tensor], n_tasks: int, n_hidden: int) -> nx.Tensor:
    """Run each task head on the pooled vector(s); returns ``(n_tasks,)`` or ``(B, n_tasks)``."""
    outs = []
    for p in range(n_tasks):
        h = v_g
        for layer in range(n_hidden):
            h = nx.softplus(nx.linear(h, heads[f"head{p}.fc{layer}.W"], heads[f"head{p}.fc{layer}.b"]))
        outs.append(nx.linear(h, heads[f"head{p}.out.W"], heads[f"head{p}.out.b"]))
    return nx.concat(outs, axis=-1)


@dataclass
class Prediction:
    values: nx.Tensor  # (B, n_tasks), normalized units
    pooled: nx.Tensor  # (B, atom_len)

    @property
    def array(self) -> np.ndarray:
        return self.values.data


def forward(graph, params: Mapping[str, nx.Tensor], cfg: ModelConfig) -> Prediction:
    """Full network on a graph or batch; ``params`` come from :meth:`ModelParams.bind`."""
    b = _as_batch(graph)
    x = nx.Tensor(b.atom_features)
    if params["embed.W"].shape[0] != b.atom_features.shape[1]:
        raise nx.ShapeError(
            f"atom feature length {b.atom_features.shape[1]} does not match embedding input {params['embed.W'].shape[0]}"
        )
    state = nx.linear(x, params["embed.W"], params["embed.b"])
    conv = conv_gated if cfg.conv_variant == "gated" else conv_simple
    for t in range(cfg.n_conv):
        layer = {k: params[f"conv{t}.{k}"] for k in ("W_c", "W_s", "b_c", "b_s")}
        state = conv(state, b, layer)
    v_g = pool(state, b.graph_index, b.n_graphs)
    return Prediction(predict_tasks(v_g, params, cfg.n_tasks, cfg.n_hidden_per_task), v_g)


def predict(graphs: Sequence[CrystalGraph], params: ModelParams, cfg: ModelConfig, batch_size: int = 256) -> np.ndarray:
    """Normalized-unit predictions, shape ``(len(graphs), n_tasks)``, no tape."""
    bound = params.bind()
    chunks = [
        forward(collate(graphs[s : s + batch_size]), bound, cfg).array
        for s in range(0, len(graphs), batch_size)
    ]
    return np.concatenate(chunks) if chunks else np.zeros((0, cfg.n_tasks))
