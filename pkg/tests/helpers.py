"""Structure and graph builders shared by the tests."""
import numpy as np

from crystalmt.graph import CrystalStructure, GraphConfig, build_graph
from crystalmt.experiments import _lattice_from_parameters

# small feature sizes keep finite-difference checks cheap
SMALL_GRAPH = GraphConfig(max_neighbors=4, cutoff=4.0, gauss_step=1.0, z_max=5)


def random_structure(rng, n_atoms=None, lengths=(2.5, 5.0), z_max=5, ident="r"):
    while True:
        a, b, c = rng.uniform(*lengths, size=3)
        al, be, ga = rng.uniform(70, 110, size=3)
        lat = _lattice_from_parameters(a, b, c, al, be, ga)
        if lat is not None and abs(np.linalg.det(lat)) > 1.0:
            break
    n = int(rng.integers(1, 4)) if n_atoms is None else n_atoms
    frac = rng.uniform(0, 1, size=(n, 3))
    z = rng.integers(1, z_max + 1, size=n).astype(np.int64)
    return CrystalStructure(ident, lat, frac, z)


def random_graph(rng, cfg=SMALL_GRAPH, **kw):
    return build_graph(random_structure(rng, z_max=cfg.z_max, **kw), cfg)


def cubic(a, frac=((0.0, 0.0, 0.0),), z=None, ident="cubic"):
    frac = np.asarray(frac, dtype=float)
    z = np.full(len(frac), 11, dtype=np.int64) if z is None else np.asarray(z, dtype=np.int64)
    return CrystalStructure(ident, np.eye(3) * a, frac, z)


def toy_dataset(n=12, n_tasks=2, seed=0, cfg=SMALL_GRAPH):
    from crystalmt.training import Dataset

    rng = np.random.default_rng(seed)
    structures = [random_structure(rng, z_max=cfg.z_max, ident=f"t{k:03d}") for k in range(n)]
    graphs = [build_graph(s, cfg) for s in structures]
    targets = rng.normal(size=(n, n_tasks)) * np.arange(1, n_tasks + 1) + 3.0
    names = [f"p{k}" for k in range(n_tasks)]
    return Dataset([s.id for s in structures], graphs, targets, names, ["eV"] * n_tasks)
