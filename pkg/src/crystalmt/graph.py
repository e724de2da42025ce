"""Crystal structures and the multigraphs built from them.

A structure is a lattice (Cartesian row vectors, in Angstrom), fractional
coordinates and atomic numbers.  Its graph has one node per atom and one
directed edge ``(i, j, k)`` for the ``k``-th bond from atom ``i`` to a
periodic image of atom ``j``; ``i == j`` is allowed.  Node features are
one-hot element vectors (or rows from an external table) and bond features
are Gaussian expansions of the bond length.
"""
from __future__ import annotations

import hashlib
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

from . import _kernels

GRAPH_CACHE_VERSION = 1


class StructureError(ValueError):
    """Base class for structure document problems."""


class MissingFieldError(StructureError):
    def __init__(self, field_name: str):
        super().__init__(f"structure document is missing field {field_name!r}")
        self.field = field_name


class LatticeShapeError(StructureError):
    pass


class ZeroVolumeError(StructureError):
    pass


class AtomicNumberError(StructureError):
    pass


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class GraphConfig:
    max_neighbors: int = 12
    cutoff: float = 8.0
    gauss_step: float = 0.2
    gauss_width: float | None = None  # defaults to gauss_step
    z_max: int = 100

    def __post_init__(self):
        if self.cutoff <= 0:
            raise ValueError("cutoff must be positive")
        if self.gauss_step <= 0:
            raise ValueError("gauss_step must be positive")
        if self.max_neighbors < 1:
            raise ValueError("max_neighbors must be >= 1")
        if self.gauss_width is not None and self.gauss_width <= 0:
            raise ValueError("gauss_width must be positive")
        if self.z_max < 1:
            raise ValueError("z_max must be >= 1")

    @property
    def width(self) -> float:
        return self.gauss_step if self.gauss_width is None else self.gauss_width

    @property
    def centers(self) -> np.ndarray:
        n = int(math.floor(self.cutoff / self.gauss_step + 1e-9)) + 1
        return np.arange(n, dtype=np.float64) * self.gauss_step

    @property
    def bond_len(self) -> int:
        return len(self.centers)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "GraphConfig":
        return cls(**dict(d))

    def digest(self) -> str:
        return _digest(json.dumps(self.to_dict(), sort_keys=True))


@dataclass
class CrystalStructure:
    id: str
    lattice: np.ndarray
    frac_coords: np.ndarray
    atomic_numbers: np.ndarray

    @property
    def n_atoms(self) -> int:
        return len(self.atomic_numbers)

    @property
    def cart_coords(self) -> np.ndarray:
        return self.frac_coords @ self.lattice

    @property
    def volume(self) -> float:
        return abs(float(np.linalg.det(self.lattice)))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "lattice": self.lattice.tolist(),
            "frac_coords": self.frac_coords.tolist(),
            "atomic_numbers": [int(z) for z in self.atomic_numbers],
        }

    def digest(self) -> str:
        return _digest(json.dumps(self.to_dict(), sort_keys=True))


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def wrap_fractional(frac: np.ndarray) -> np.ndarray:
    out = frac - np.floor(frac)
    # x - floor(x) rounds up to exactly 1.0 for tiny negative x
    out[out >= 1.0] = 0.0
    return out


def parse_structure(document, z_max: int = 100) -> CrystalStructure:
    """Validate a structure JSON document (text, bytes or already-decoded dict)."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise StructureError(f"structure document is not valid JSON: {exc}") from None
    if not isinstance(document, Mapping):
        raise StructureError("structure document must be a JSON object")
    for key in ("id", "lattice", "frac_coords", "atomic_numbers"):
        if key not in document:
            raise MissingFieldError(key)

    try:
        lattice = np.asarray(document["lattice"], dtype=np.float64)
    except (TypeError, ValueError):
        raise LatticeShapeError("lattice must be a 3x3 array of numbers") from None
    if lattice.shape != (3, 3) or not np.all(np.isfinite(lattice)):
        raise LatticeShapeError(f"lattice must be a finite 3x3 array, got shape {lattice.shape}")
    if abs(np.linalg.det(lattice)) <= 1e-6:
        raise ZeroVolumeError("lattice vectors span (near) zero volume")

    try:
        frac = np.asarray(document["frac_coords"], dtype=np.float64)
    except (TypeError, ValueError):
        raise StructureError("frac_coords must be an N x 3 array of numbers") from None
    if frac.ndim != 2 or frac.shape[1] != 3 or frac.shape[0] < 1 or not np.all(np.isfinite(frac)):
        raise StructureError(f"frac_coords must be a finite N x 3 array with N >= 1, got shape {frac.shape}")

    raw_z = document["atomic_numbers"]
    if not isinstance(raw_z, list) or not all(isinstance(z, int) and not isinstance(z, bool) for z in raw_z):
        raise AtomicNumberError("atomic_numbers must be a list of integers")
    z = np.asarray(raw_z, dtype=np.int64)
    if len(z) != len(frac):
        raise StructureError(f"{len(z)} atomic numbers for {len(frac)} coordinates")
    bad = z[(z < 1) | (z > z_max)]
    if bad.size:
        raise AtomicNumberError(f"atomic number {int(bad[0])} outside [1, {z_max}]")

    return CrystalStructure(str(document["id"]), lattice, wrap_fractional(frac), z)


def load_structure(path, z_max: int = 100) -> CrystalStructure:
    return parse_structure(Path(path).read_text(), z_max=z_max)


# ---------------------------------------------------------------------------
# neighbors


class Neighbors(NamedTuple):
    index: np.ndarray  # neighbor atom indices
    distance: np.ndarray  # Angstrom, ascending
    offset: np.ndarray  # (n, 3) integer image offsets


def plane_spacings(lattice: np.ndarray) -> np.ndarray:
    """Distance between adjacent lattice planes for each lattice direction."""
    recip = np.linalg.inv(lattice)  # columns are reciprocal vectors
    return 1.0 / np.linalg.norm(recip, axis=0)


def image_offsets(lattice: np.ndarray, cutoff: float) -> np.ndarray:
    # fractional differences lie in (-1, 1), hence the extra image per side
    reach = np.ceil(cutoff / plane_spacings(lattice)).astype(int) + 1
    ranges = [range(-r, r + 1) for r in reach]
    return np.array(list(itertools.product(*ranges)), dtype=np.int64)


def periodic_neighbors(s: CrystalStructure, cfg: GraphConfig) -> list[Neighbors]:
    """Up to ``max_neighbors`` nearest periodic images within the cutoff, per atom.

    Ordering is by distance, then neighbor index, then image offset
    (lexicographic).  Images of the atom itself count as neighbors; the atom
    at zero offset does not.
    """
    offsets = image_offsets(s.lattice, cfg.cutoff)
    out = []
    for i in range(s.n_atoms):
        atoms, offs, dists = _kernels.image_distances(s.frac_coords, s.lattice, i, offsets, cfg.cutoff)
        off = offsets[offs]
        keep = ~((atoms == i) & np.all(off == 0, axis=1))
        atoms, off, dists = atoms[keep], off[keep], dists[keep]
        order = np.lexsort((off[:, 2], off[:, 1], off[:, 0], atoms, dists))[: cfg.max_neighbors]
        out.append(Neighbors(atoms[order], dists[order], off[order]))
    return out


# ---------------------------------------------------------------------------
# features


def gaussian_expand(d, cfg: GraphConfig) -> np.ndarray:
    """Gaussian basis expansion of a distance (or an array of distances).

    The last axis of the result indexes basis centers ``0, step, 2*step, ...``.
    """
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0) or np.any(d > cfg.cutoff):
        raise ValueError(f"distance outside [0, {cfg.cutoff}]")
    return np.exp(-((d[..., None] - cfg.centers) ** 2) / cfg.width**2)


def load_element_table(path) -> dict[int, np.ndarray]:
    """Read ``{"Z": [floats...]}`` element feature tables."""
    raw = json.loads(Path(path).read_text())
    table = {int(k): np.asarray(v, dtype=np.float64) for k, v in raw.items()}
    lengths = {len(v) for v in table.values()}
    if len(lengths) > 1:
        raise FeatureError(f"element table has vectors of differing lengths {sorted(lengths)}")
    return table


def atom_init_features(Z: int, cfg: GraphConfig, table: Mapping[int, np.ndarray] | None = None) -> np.ndarray:
    if not 1 <= Z <= cfg.z_max:
        raise FeatureError(f"atomic number {Z} outside [1, {cfg.z_max}]")
    if table is not None:
        if Z not in table:
            raise FeatureError(f"element table has no entry for Z={Z}")
        return np.asarray(table[Z], dtype=np.float64).copy()
    v = np.zeros(cfg.z_max)
    v[Z - 1] = 1.0
    return v


def table_digest(table: Mapping[int, np.ndarray] | None) -> str:
    if table is None:
        return "onehot"
    return _digest(json.dumps({str(k): np.asarray(v).tolist() for k, v in sorted(table.items())}))


@dataclass
class CrystalGraph:
    id: str
    atom_features: np.ndarray  # (N, d_a)
    edge_src: np.ndarray  # center atom i
    edge_dst: np.ndarray  # neighbor atom j
    edge_k: np.ndarray  # multiplicity index among parallel (i, j) edges
    bond_features: np.ndarray  # (E, d_b)
    n_short: int = 0  # atoms with fewer than max_neighbors neighbors
    atomic_numbers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_atoms(self) -> int:
        return self.atom_features.shape[0]

    @property
    def n_edges(self) -> int:
        return len(self.edge_src)

    @property
    def edges(self):
        for e in range(self.n_edges):
            yield int(self.edge_src[e]), int(self.edge_dst[e]), int(self.edge_k[e]), self.bond_features[e]

    def permuted(self, perm) -> "CrystalGraph":
        """Relabel atoms so that new atom ``a`` is old atom ``perm[a]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return CrystalGraph(
            self.id,
            self.atom_features[perm],
            inv[self.edge_src],
            inv[self.edge_dst],
            self.edge_k.copy(),
            self.bond_features.copy(),
            self.n_short,
            self.atomic_numbers[perm] if len(self.atomic_numbers) else self.atomic_numbers,
        )


def build_graph(s: CrystalStructure, cfg: GraphConfig, table: Mapping[int, np.ndarray] | None = None) -> CrystalGraph:
    atom_fea = np.stack([atom_init_features(int(z), cfg, table) for z in s.atomic_numbers])
    neighbors = periodic_neighbors(s, cfg)
    src, dst, dist = [], [], []
    n_short = 0
    for i, nb in enumerate(neighbors):
        if len(nb.index) < cfg.max_neighbors:
            n_short += 1
        src.extend([i] * len(nb.index))
        dst.extend(nb.index.tolist())
        dist.extend(nb.distance.tolist())
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    k = np.zeros(len(src), dtype=np.int64)
    seen: dict[tuple[int, int], int] = {}
    for e, pair in enumerate(zip(src.tolist(), dst.tolist())):
        k[e] = seen.get(pair, 0)
        seen[pair] = k[e] + 1
    bond = gaussian_expand(np.asarray(dist, dtype=np.float64), cfg).reshape(len(src), cfg.bond_len)
    return CrystalGraph(s.id, atom_fea, src, dst, k, bond, n_short, s.atomic_numbers.copy())


# ---------------------------------------------------------------------------
# graph cache (one .npz per graph, keyed by structure/config/table digests)


def cache_key(s: CrystalStructure, cfg: GraphConfig, table=None) -> str:
    return _digest(f"v{GRAPH_CACHE_VERSION}:{s.digest()}:{cfg.digest()}:{table_digest(table)}")


def save_graph(g: CrystalGraph, path) -> None:
    meta = json.dumps({"format_version": GRAPH_CACHE_VERSION, "id": g.id, "n_short": g.n_short})
    buf = io.BytesIO()
    np.savez(
        buf,
        meta=np.array(meta),
        atom_features=g.atom_features,
        edge_src=g.edge_src,
        edge_dst=g.edge_dst,
        edge_k=g.edge_k,
        bond_features=g.bond_features,
        atomic_numbers=g.atomic_numbers,
    )
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_graph(path) -> CrystalGraph:
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format_version") != GRAPH_CACHE_VERSION:
            raise ValueError(f"unsupported graph cache version {meta.get('format_version')}")
        return CrystalGraph(
            meta["id"],
            z["atom_features"],
            z["edge_src"],
            z["edge_dst"],
            z["edge_k"],
            z["bond_features"],
            int(meta["n_short"]),
            z["atomic_numbers"],
        )
