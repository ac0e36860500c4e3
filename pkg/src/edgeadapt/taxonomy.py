"""Semantic model taxonomy.

Domains are identified by attribute paths over a fixed, ordered list of
dimensions (most impactful first).  The taxonomy is the prefix tree over
those paths; every node may carry an expert model.  Hop distance on the
tree is the proxy for cross-domain reuse quality.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

Path = tuple[str, ...]

ROOT: Path = ()


class SchemaError(ValueError):
    """A path does not fit the schema."""


class TableDecodeError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class SemanticSchema:
    dimensions: tuple[str, ...]
    vocab: dict[str, set[str]] = field(default_factory=dict)
    closed: bool = False

    def __post_init__(self):
        self.dimensions = tuple(self.dimensions)
        if not self.dimensions:
            raise SchemaError("schema needs at least one dimension")
        if len(set(self.dimensions)) != len(self.dimensions):
            raise SchemaError("dimension names must be unique")
        self.vocab = {d: set(self.vocab.get(d, ())) for d in self.dimensions}

    @property
    def depth(self) -> int:
        return len(self.dimensions)

    def validate(self, path: Sequence[str]) -> Path:
        path = tuple(path)
        if len(path) > self.depth:
            raise SchemaError(f"path {path} longer than {self.depth} dimensions")
        for dim, value in zip(self.dimensions, path):
            if not isinstance(value, str) or not value:
                raise SchemaError(f"bad value {value!r} for {dim}")
            if value not in self.vocab[dim]:
                if self.closed:
                    raise SchemaError(f"{value!r} not allowed for {dim}")
                self.vocab[dim].add(value)
        return path

    def leaves(self) -> list[Path]:
        """All full-depth paths over the current vocabularies, sorted."""
        paths: list[Path] = [ROOT]
        for dim in self.dimensions:
            paths = [p + (v,) for p in paths for v in sorted(self.vocab[dim])]
        return paths


@dataclass
class Node:
    path: Path
    children: set[Path] = field(default_factory=set)
    has_model: bool = False
    version: int = 0

    @property
    def layer(self) -> int:
        return len(self.path)


def common_prefix(a: Path, b: Path) -> Path:
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return a[:n]


def is_ancestor(a: Path, b: Path) -> bool:
    """True when `b` lies in the subtree rooted at `a` (inclusive)."""
    return len(a) <= len(b) and b[: len(a)] == a


def path_distance(a: Path, b: Path) -> int:
    if is_ancestor(a, b) or is_ancestor(b, a):
        return abs(len(a) - len(b))
    c = common_prefix(a, b)
    return path_distance(a, c) + path_distance(b, c)


class TaxonomyTree:
    def __init__(self, schema: SemanticSchema):
        self.schema = schema
        self.nodes: dict[Path, Node] = {ROOT: Node(ROOT)}
        self.revision = 0

    def __contains__(self, path) -> bool:
        return tuple(path) in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TaxonomyTree):
            return NotImplemented
        return self.revision == other.revision and self.nodes == other.nodes

    def node(self, path: Sequence[str]) -> Node:
        try:
            return self.nodes[tuple(path)]
        except KeyError:
            raise KeyError(f"domain {tuple(path)} not in taxonomy") from None

    def is_leaf(self, path: Sequence[str]) -> bool:
        return len(path) == self.schema.depth

    def insert(self, path: Sequence[str]) -> Node:
        path = self.schema.validate(path)
        changed = False
        for i in range(1, len(path) + 1):
            prefix = path[:i]
            if prefix not in self.nodes:
                self.nodes[prefix] = Node(prefix)
                self.nodes[prefix[:-1]].children.add(prefix)
                changed = True
        if changed:
            self.revision += 1
        return self.nodes[path]

    def set_model(self, path: Sequence[str], version: int, present: bool = True) -> Node:
        node = self.insert(path)
        if node.has_model != present or node.version != version:
            node.has_model = present
            node.version = version
            self.revision += 1
        return node

    def model_paths(self) -> list[Path]:
        return sorted(p for p, n in self.nodes.items() if n.has_model)

    def leaves(self) -> list[Path]:
        return sorted(p for p in self.nodes if self.is_leaf(p))

    def lca(self, a: Sequence[str], b: Sequence[str]) -> Path:
        a, b = self.node(a).path, self.node(b).path
        return common_prefix(a, b)

    def distance(self, a: Sequence[str], b: Sequence[str]) -> int:
        a, b = self.node(a).path, self.node(b).path
        return path_distance(a, b)

    def copy(self) -> "TaxonomyTree":
        tree = TaxonomyTree(SemanticSchema(self.schema.dimensions,
                                           self.schema.vocab, self.schema.closed))
        tree.nodes = {p: Node(p, set(n.children), n.has_model, n.version)
                      for p, n in self.nodes.items()}
        tree.revision = self.revision
        return tree


def insert_domain(tree: TaxonomyTree, path: Sequence[str]) -> Node:
    return tree.insert(path)


def rank_key(target: Path, path: Path, version: int) -> tuple:
    # nearest first, then deeper shared prefix, then fresher version, then lexicographic
    return (path_distance(target, path), -len(common_prefix(target, path)), -version, path)


def rank_versions(target: Sequence[str], candidates: Iterable[tuple[Path, int]]) -> list[tuple[Path, int]]:
    """Rank ``(path, version)`` pairs for `target`; returns ``(path, distance)``."""
    target = tuple(target)
    keyed = sorted(rank_key(target, tuple(p), v) for p, v in dict(candidates).items())
    return [(k[3], k[0]) for k in keyed]


def rank_candidates(tree: TaxonomyTree, target: Sequence[str],
                    available: Iterable[Sequence[str]]) -> list[tuple[Path, int]]:
    """Order candidate models by expected reuse fitness for `target`.

    Candidates without a model in `tree` are dropped.  `target` itself need
    not be in the tree (an unseen domain still has a well-defined distance).
    Returns ``(path, distance)`` pairs.
    """
    target = tree.schema.validate(target)
    present = []
    for path in {tuple(p) for p in available}:
        node = tree.nodes.get(path)
        if node is not None and node.has_model:
            present.append((path, node.version))
    return rank_versions(target, present)


_U32 = struct.Struct(">I")
_U16 = struct.Struct(">H")
_ENTRY_TAIL = struct.Struct(">IB")


def encode_path(path: Path) -> bytes:
    out = [bytes([len(path)])]
    for value in path:
        raw = value.encode("utf-8")
        out.append(_U16.pack(len(raw)) + raw)
    return b"".join(out)


def decode_path(buf: bytes, offset: int) -> tuple[Path, int]:
    if offset >= len(buf):
        raise TableDecodeError("truncated path length", offset)
    n = buf[offset]
    offset += 1
    values = []
    for _ in range(n):
        if offset + 2 > len(buf):
            raise TableDecodeError("truncated value length", offset)
        (size,) = _U16.unpack_from(buf, offset)
        offset += 2
        if offset + size > len(buf):
            raise TableDecodeError("truncated value", offset)
        try:
            values.append(buf[offset:offset + size].decode("utf-8"))
        except UnicodeDecodeError:
            raise TableDecodeError("invalid utf-8 value", offset) from None
        offset += size
    return tuple(values), offset


def encode_table(tree: TaxonomyTree) -> bytes:
    paths = sorted(tree.nodes)
    out = [_U32.pack(tree.revision), _U16.pack(len(paths))]
    for path in paths:
        node = tree.nodes[path]
        out.append(encode_path(path))
        out.append(_ENTRY_TAIL.pack(node.version, 1 if node.has_model else 0))
    return b"".join(out)


def decode_table(buf: bytes, schema: SemanticSchema | None = None) -> TaxonomyTree:
    """Rebuild a tree from its table encoding.

    Without a schema, dimensions are named ``d0..d{n-1}`` with ``n`` the
    longest path in the table, which suffices for distance queries.
    """
    buf = bytes(buf)
    if len(buf) < 6:
        raise TableDecodeError("truncated header", len(buf))
    (revision,) = _U32.unpack_from(buf, 0)
    (count,) = _U16.unpack_from(buf, 4)
    offset = 6
    entries = []
    for _ in range(count):
        path, offset = decode_path(buf, offset)
        if offset + _ENTRY_TAIL.size > len(buf):
            raise TableDecodeError("truncated entry", offset)
        version, flags = _ENTRY_TAIL.unpack_from(buf, offset)
        offset += _ENTRY_TAIL.size
        entries.append((path, version, bool(flags & 1)))
    if offset != len(buf):
        raise TableDecodeError("trailing bytes", offset)
    if schema is None:
        depth = max((len(p) for p, _, _ in entries), default=0)
        schema = SemanticSchema(tuple(f"d{i}" for i in range(max(depth, 1))))
    tree = TaxonomyTree(schema)
    for path, version, present in entries:
        node = tree.insert(path)
        node.version = version
        node.has_model = present
    tree.revision = revision
    return tree


def schema_from_mapping(spec: Mapping[str, Sequence[str]], closed: bool = False) -> SemanticSchema:
    return SemanticSchema(tuple(spec), {k: set(v) for k, v in spec.items()}, closed)
