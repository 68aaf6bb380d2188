"""Synthetic molecule sets used by the smoke/acceptance runs and the README demo."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .layers import stream
from .molgraph import DatasetRecord, generate_description, parse_smiles

_FRAGMENTS_NO_O = ["C", "C", "C", "CC", "N", "C(Cl)", "C(F)", "S", "C(C)", "c1ccccc1", "C1CCCC1",
                   "C(C#N)", "C(Br)"]
_FRAGMENTS_O = ["O", "C(=O)", "CO", "C(O)", "C(=O)OC"]


def random_smiles(rng: np.random.Generator, with_oxygen: bool, min_frags: int = 2, max_frags: int = 6) -> str:
    k = int(rng.integers(min_frags, max_frags + 1))
    frags = [str(rng.choice(_FRAGMENTS_NO_O)) for _ in range(k)]
    if with_oxygen:
        frags[int(rng.integers(0, k))] = str(rng.choice(_FRAGMENTS_O))
    smiles = "C" + "".join(frags)
    return smiles


def _records(smiles_targets) -> list[DatasetRecord]:
    out = []
    for smi, y in smiles_targets:
        g = parse_smiles(smi)
        out.append(DatasetRecord(smi, y, generate_description(g), g))
    return out


def oxygen_dataset(n: int = 60, seed: int = 0) -> list[DatasetRecord]:
    """Balanced binary task: label 1 iff the molecule contains oxygen."""
    rng = stream(seed, "toy.oxygen")
    seen, rows = set(), []
    while len(rows) < n:
        label = len(rows) % 2
        smi = random_smiles(rng, bool(label))
        if smi in seen:
            continue
        seen.add(smi)
        rows.append((smi, label))
    return _records(rows)


def heavy_atom_dataset(n: int = 80, seed: int = 0) -> list[DatasetRecord]:
    """Regression task: standardized heavy-atom count."""
    rng = stream(seed, "toy.heavy")
    seen, smiles = set(), []
    while len(smiles) < n:
        smi = random_smiles(rng, bool(rng.integers(0, 2)), 1, 7)
        if smi not in seen:
            seen.add(smi)
            smiles.append(smi)
    counts = np.array([parse_smiles(s).num_atoms for s in smiles], dtype=float)
    z = (counts - counts.mean()) / counts.std()
    return _records(zip(smiles, z.tolist()))


def write_csv(records, path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["smiles", "target"])
        for r in records:
            w.writerow([r.smiles, r.target])
