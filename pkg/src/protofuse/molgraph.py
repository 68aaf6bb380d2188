"""SMILES subset parser, atom featurization, template descriptions, CSV ingest."""
from __future__ import annotations

import csv
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ELEMENTS = ("B", "C", "N", "O", "F", "P", "S", "Cl", "Br", "I")
ELEMENT_INDEX = {e: i for i, e in enumerate(ELEMENTS)}
ELEMENT_NAMES = {
    "B": "boron", "C": "carbon", "N": "nitrogen", "O": "oxygen", "F": "fluorine",
    "P": "phosphorus", "S": "sulfur", "Cl": "chlorine", "Br": "bromine", "I": "iodine",
}
AROMATIC_SYMBOLS = {"b": "B", "c": "C", "n": "N", "o": "O", "p": "P", "s": "S"}
ORGANIC = {"B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"}
HALOGENS = {"F", "Cl", "Br", "I"}
# lowest standard valence; used only for implicit-H estimates in group detection
DEFAULT_VALENCE = {"B": 3, "C": 4, "N": 3, "O": 2, "F": 1, "P": 3, "S": 2, "Cl": 1, "Br": 1, "I": 1}

AROMATIC = 1.5
BOND_SYMBOLS = {"-": 1, "=": 2, "#": 3, ":": AROMATIC}
FEATURE_WIDTH = len(ELEMENTS) + 4


class SmilesError(ValueError):
    pass


class EmptyInput(SmilesError):
    pass


class UnknownAtomSymbol(SmilesError):
    pass


class UnbalancedParenthesis(SmilesError):
    pass


class UnclosedRingBond(SmilesError):
    pass


class SmilesSyntaxError(SmilesError):
    """Malformed input not covered by the more specific errors."""


@dataclass(frozen=True)
class Atom:
    element: str
    aromatic: bool = False
    formal_charge: int = 0
    explicit_h: int = 0
    bracket: bool = False


@dataclass
class MolecularGraph:
    atoms: list[Atom]
    bonds: list[tuple[int, int, float]]
    adjacency: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.adjacency:
            self.adjacency = [[] for _ in self.atoms]
            for a, b, _ in self.bonds:
                self.adjacency[a].append(b)
                self.adjacency[b].append(a)

    @property
    def num_atoms(self) -> int:
        return len(self.atoms)

    def degree(self, i: int) -> int:
        return len(self.adjacency[i])

    def bond_order(self, a: int, b: int) -> float | None:
        for x, y, order in self.bonds:
            if (x, y) == (a, b) or (x, y) == (b, a):
                return order
        return None

    def num_components(self) -> int:
        seen = [False] * self.num_atoms
        count = 0
        for start in range(self.num_atoms):
            if seen[start]:
                continue
            count += 1
            stack = [start]
            seen[start] = True
            while stack:
                v = stack.pop()
                for u in self.adjacency[v]:
                    if not seen[u]:
                        seen[u] = True
                        stack.append(u)
        return count

    def ring_count(self) -> int:
        """Cycle rank |E| - |V| + components."""
        return len(self.bonds) - self.num_atoms + self.num_components()

    def edge_index(self) -> np.ndarray:
        """Directed edge list (2, 2|E|), both directions."""
        if not self.bonds:
            return np.zeros((2, 0), dtype=np.int64)
        a = np.array([(x, y) for x, y, _ in self.bonds], dtype=np.int64)
        return np.concatenate([a.T, a.T[::-1]], axis=1)

    def permuted(self, perm) -> MolecularGraph:
        """Relabel atoms: new atom i is old atom perm[i]."""
        inv = {old: new for new, old in enumerate(perm)}
        atoms = [self.atoms[old] for old in perm]
        bonds = []
        for a, b, o in self.bonds:
            x, y = inv[a], inv[b]
            bonds.append((min(x, y), max(x, y), o))
        return MolecularGraph(atoms, sorted(bonds))


# ---------------------------------------------------------------------- parser


def _parse_bracket(body: str) -> Atom:
    # body is the text between '[' and ']'
    if not body:
        raise UnknownAtomSymbol("empty bracket atom")
    if body[0].isdigit():
        raise UnknownAtomSymbol(f"isotopes are not supported: [{body}]")
    if "@" in body:
        raise UnknownAtomSymbol(f"stereo centres are not supported: [{body}]")
    if ":" in body:
        raise UnknownAtomSymbol(f"atom classes are not supported: [{body}]")
    i = 0
    if body[:2] in ("Cl", "Br"):
        symbol, i = body[:2], 2
    else:
        symbol, i = body[0], 1
    aromatic = False
    if symbol in AROMATIC_SYMBOLS:
        aromatic, element = True, AROMATIC_SYMBOLS[symbol]
    elif symbol in ELEMENT_INDEX:
        element = symbol
    else:
        raise UnknownAtomSymbol(f"unsupported element in [{body}]")
    h = 0
    if i < len(body) and body[i] == "H":
        i += 1
        h = 1
        if i < len(body) and body[i].isdigit():
            h = int(body[i])
            i += 1
    charge = 0
    if i < len(body) and body[i] in "+-":
        sign = 1 if body[i] == "+" else -1
        j = i + 1
        if j < len(body) and body[j].isdigit():
            charge = sign * int(body[j])
            j += 1
        else:
            charge = sign
            while j < len(body) and body[j] == body[i]:
                charge += sign
                j += 1
        i = j
    if i != len(body):
        raise UnknownAtomSymbol(f"unsupported bracket atom [{body}]")
    if not -2 <= charge <= 2:
        raise UnknownAtomSymbol(f"formal charge {charge} outside [-2, 2] in [{body}]")
    return Atom(element, aromatic, charge, h, bracket=True)


def parse_smiles(text: str) -> MolecularGraph:
    """Parse the supported SMILES subset into a :class:`MolecularGraph`.

    Supports organic-subset and bracket atoms (charge and H count), bond
    symbols ``- = # :``, branches, ring closures ``1-9`` and ``%nn`` and
    ``.`` disconnections.  Stereo marks, isotopes and wildcards are rejected
    with :class:`UnknownAtomSymbol`.
    """
    if not text or not text.strip():
        raise EmptyInput("empty SMILES")
    if not text.isascii():
        raise UnknownAtomSymbol("non-ASCII input")
    s = text.strip()
    atoms: list[Atom] = []
    bonds: dict[tuple[int, int], float] = {}
    branch_stack: list[int] = []
    open_rings: dict[int, tuple[int, float | None]] = {}
    prev: int | None = None
    pending_bond: float | None = None
    i = 0

    def connect(a: int, b: int, order: float | None):
        if a == b:
            raise SmilesSyntaxError("atom bonded to itself")
        key = (min(a, b), max(a, b))
        if key in bonds:
            raise SmilesSyntaxError(f"duplicate bond between atoms {a} and {b}")
        if order is None:
            order = AROMATIC if atoms[a].aromatic and atoms[b].aromatic else 1
        bonds[key] = order

    def add_atom(atom: Atom):
        nonlocal prev, pending_bond
        atoms.append(atom)
        idx = len(atoms) - 1
        if prev is not None:
            connect(prev, idx, pending_bond)
        elif pending_bond is not None:
            raise SmilesSyntaxError("bond symbol without a preceding atom")
        prev = idx
        pending_bond = None

    while i < len(s):
        ch = s[i]
        if ch == "[":
            j = s.find("]", i)
            if j < 0:
                raise SmilesSyntaxError("unterminated bracket atom")
            add_atom(_parse_bracket(s[i + 1:j]))
            i = j + 1
        elif s[i:i + 2] in ("Cl", "Br"):
            add_atom(Atom(s[i:i + 2]))
            i += 2
        elif ch in ORGANIC:
            add_atom(Atom(ch))
            i += 1
        elif ch in AROMATIC_SYMBOLS:
            add_atom(Atom(AROMATIC_SYMBOLS[ch], aromatic=True))
            i += 1
        elif ch in BOND_SYMBOLS:
            if pending_bond is not None:
                raise SmilesSyntaxError("two consecutive bond symbols")
            pending_bond = BOND_SYMBOLS[ch]
            i += 1
        elif ch == "(":
            if prev is None:
                raise SmilesSyntaxError("branch without a preceding atom")
            branch_stack.append(prev)
            i += 1
        elif ch == ")":
            if not branch_stack:
                raise UnbalancedParenthesis(f"unmatched ')' at position {i}")
            if pending_bond is not None:
                raise SmilesSyntaxError("bond symbol before ')'")
            prev = branch_stack.pop()
            i += 1
        elif ch.isdigit() or ch == "%":
            if ch == "%":
                digits = s[i + 1:i + 3]
                if len(digits) != 2 or not digits.isdigit():
                    raise SmilesSyntaxError("'%' must be followed by two digits")
                num, i = int(digits), i + 3
            else:
                num, i = int(ch), i + 1
            if prev is None:
                raise SmilesSyntaxError("ring closure without a preceding atom")
            if num in open_rings:
                other, order = open_rings.pop(num)
                if order is not None and pending_bond is not None and order != pending_bond:
                    raise SmilesSyntaxError(f"conflicting bond orders on ring {num}")
                connect(other, prev, pending_bond if pending_bond is not None else order)
            else:
                open_rings[num] = (prev, pending_bond)
            pending_bond = None
        elif ch == ".":
            if pending_bond is not None:
                raise SmilesSyntaxError("bond symbol before '.'")
            prev = None
            i += 1
        elif ch in "/\\*$@":
            raise UnknownAtomSymbol(f"unsupported symbol {ch!r} at position {i}")
        else:
            raise UnknownAtomSymbol(f"unknown symbol {ch!r} at position {i}")

    if branch_stack:
        raise UnbalancedParenthesis("unclosed '('")
    if open_rings:
        raise UnclosedRingBond(f"ring bond(s) {sorted(open_rings)} never closed")
    if pending_bond is not None:
        raise SmilesSyntaxError("trailing bond symbol")
    if not atoms:
        raise EmptyInput("no atoms")
    return MolecularGraph(atoms, [(a, b, o) for (a, b), o in sorted(bonds.items())])


# --------------------------------------------------------------- featurization


def featurize(graph: MolecularGraph) -> np.ndarray:
    """Per-atom features: element one-hot, aromatic, degree/4, charge, H/4."""
    x = np.zeros((graph.num_atoms, FEATURE_WIDTH))
    k = len(ELEMENTS)
    for i, atom in enumerate(graph.atoms):
        x[i, ELEMENT_INDEX[atom.element]] = 1.0
        x[i, k] = 1.0 if atom.aromatic else 0.0
        x[i, k + 1] = graph.degree(i) / 4.0
        x[i, k + 2] = float(atom.formal_charge)
        x[i, k + 3] = atom.explicit_h / 4.0
    return x


# ---------------------------------------------------------------- descriptions


def hydrogen_count(graph: MolecularGraph, i: int) -> int:
    atom = graph.atoms[i]
    if atom.bracket:
        return atom.explicit_h
    used = 0.0
    for j in graph.adjacency[i]:
        used += graph.bond_order(i, j)
    # aromatic bond sums come out as x.5; an aromatic atom contributes one pi bond
    if atom.aromatic:
        used = np.floor(used)
    return max(0, int(DEFAULT_VALENCE[atom.element] - used))


def functional_groups(graph: MolecularGraph) -> list[str]:
    """Hits from a fixed pattern table, in table order."""
    hydroxyl = carbonyl = carboxyl = amine = halogen = False
    for i, atom in enumerate(graph.atoms):
        el = atom.element
        nbrs = graph.adjacency[i]
        if el in HALOGENS:
            halogen = True
        if el == "O" and not atom.aromatic and atom.formal_charge == 0:
            if len(nbrs) == 1 and graph.bond_order(i, nbrs[0]) == 1 and hydrogen_count(graph, i) >= 1:
                hydroxyl = True
        if el == "C" and not atom.aromatic:
            dbl_o = [j for j in nbrs if graph.atoms[j].element == "O" and graph.bond_order(i, j) == 2]
            if dbl_o:
                carbonyl = True
                single_oh = [
                    j for j in nbrs
                    if graph.atoms[j].element == "O" and graph.bond_order(i, j) == 1
                    and graph.degree(j) == 1
                ]
                if single_oh:
                    carboxyl = True
        if el == "N" and not atom.aromatic:
            if all(graph.bond_order(i, j) == 1 for j in nbrs):
                amine = True
    hits = []
    for name, hit in (("hydroxyl", hydroxyl), ("carbonyl", carbonyl), ("carboxyl", carboxyl),
                      ("amine", amine), ("halogen", halogen)):
        if hit:
            hits.append(name)
    return hits


def generate_description(graph: MolecularGraph) -> str:
    """Deterministic text summary of a molecular graph.

    >>> generate_description(parse_smiles("C"))
    'molecule with 1 carbon atoms , 0 rings'
    """
    counts = {e: 0 for e in ELEMENTS}
    for atom in graph.atoms:
        counts[atom.element] += 1
    parts = [f"{n} {ELEMENT_NAMES[e]} atoms" for e, n in counts.items() if n]
    parts.append(f"{graph.ring_count()} rings")
    if any(a.aromatic for a in graph.atoms):
        parts.append("aromatic")
    parts.extend(functional_groups(graph))
    return "molecule with " + " , ".join(parts)


# ------------------------------------------------------------------- datasets


class DatasetError(ValueError):
    pass


class MissingColumn(DatasetError):
    pass


class UnreadableFile(DatasetError):
    pass


class NonNumericTarget(DatasetError):
    pass


class NonIntegerTarget(DatasetError):
    pass


@dataclass
class DatasetRecord:
    smiles: str
    target: float | int
    description: str
    graph: MolecularGraph


def load_dataset(path, task_kind: str, report: bool = True) -> tuple[list[DatasetRecord], int]:
    """Read a ``smiles,target[,description]`` CSV.

    Rows whose SMILES fail to parse are skipped; the skip count is returned
    alongside the records and written to stderr as ``skipped=<n>``.
    """
    if task_kind not in ("classification", "regression"):
        raise ValueError(f"unknown task kind {task_kind!r}")
    try:
        with open(Path(path), newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
            header = rows[0].keys() if rows else None
    except (OSError, UnicodeDecodeError, csv.Error) as exc:
        raise UnreadableFile(f"{path}: {exc}") from None
    if header is None:
        with open(Path(path), newline="", encoding="utf-8") as fh:
            first = fh.readline().strip().split(",")
        header = first
    for col in ("smiles", "target"):
        if col not in header:
            raise MissingColumn(f"{path}: missing column {col!r}")
    records: list[DatasetRecord] = []
    skipped = 0
    for lineno, row in enumerate(rows, start=2):
        raw = (row.get("target") or "").strip()
        try:
            value = float(raw)
        except ValueError:
            if task_kind == "classification":
                raise NonIntegerTarget(f"{path}:{lineno}: class label {raw!r} is not an integer") from None
            raise NonNumericTarget(f"{path}:{lineno}: target {raw!r} is not numeric") from None
        if task_kind == "classification":
            if not value.is_integer() or value < 0:
                raise NonIntegerTarget(f"{path}:{lineno}: class label {raw!r} is not a non-negative integer")
            target: float | int = int(value)
        else:
            target = value
        try:
            graph = parse_smiles(row["smiles"] or "")
        except SmilesError:
            skipped += 1
            continue
        desc = (row.get("description") or "").strip() or generate_description(graph)
        records.append(DatasetRecord(row["smiles"].strip(), target, desc, graph))
    if report:
        print(f"skipped={skipped}", file=sys.stderr)
    return records, skipped
