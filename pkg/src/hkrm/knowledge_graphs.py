"""Class-to-class prior graphs built from annotation statistics.

Attribute graphs weight a class pair by the Jensen-Shannon divergence (base 2)
between the classes' attribute frequency distributions. Relationship graphs
count relation triples between class pairs, symmetrize and row-normalize.
"""

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from hkrm import tensorio

GRAPH_SCHEMA_VERSION = 1
GRAPH_KINDS = ("attribute", "relationship")


class AnnotationError(ValueError):
    """Malformed annotation input; message carries the 1-based line number."""


class EmptyTableError(ValueError):
    """No usable annotation records."""


class GraphDomainError(ValueError):
    """Divergence or graph requested on empty distributions."""


@dataclass
class FrequencyTable:
    counts: np.ndarray  # (C, K) int64
    class_names: list
    attribute_names: list
    skipped: dict = field(default_factory=dict)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2:
            raise ValueError("counts must be a C x K matrix")
        if (self.counts < 0).any():
            raise ValueError("counts must be nonnegative")
        if len(self.class_names) != self.counts.shape[0] or len(self.attribute_names) != self.counts.shape[1]:
            raise ValueError("name lists do not match the table shape")

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def num_attributes(self):
        return self.counts.shape[1]


@dataclass
class ClassDistribution:
    probs: np.ndarray
    empty: bool = False


@dataclass
class RelationshipTriples:
    """Relation counts keyed by (subject_class, predicate_id, object_class)."""

    counts: dict
    class_names: list
    predicate_names: list

    @property
    def num_classes(self):
        return len(self.class_names)

    def as_list(self):
        return [(s, p, o, n) for (s, p, o), n in sorted(self.counts.items())]

    def __len__(self):
        return len(self.counts)


@dataclass
class PriorGraph:
    edges: np.ndarray  # (C, C) float64
    kind: str
    class_names: list
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        if self.kind not in GRAPH_KINDS:
            raise ValueError(f"graph kind must be one of {GRAPH_KINDS}")
        if self.edges.ndim != 2 or self.edges.shape[0] != self.edges.shape[1]:
            raise ValueError("edges must be a square matrix")

    @property
    def num_classes(self):
        return self.edges.shape[0]


# --------------------------------------------------------------------------
# ingestion


def parse_annotations(lines):
    """Parse newline-delimited JSON records, validating the record schema.

    Blank lines are ignored. Returns a list of dicts.
    """
    records = []
    for lineno, line in enumerate(lines, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise AnnotationError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
        records.append(_validate_record(rec, lineno))
    return records


def _validate_record(rec, lineno):
    if not isinstance(rec, dict):
        raise AnnotationError(f"line {lineno}: record must be a JSON object")
    for key in ("image", "class"):
        if not isinstance(rec.get(key), str):
            raise AnnotationError(f"line {lineno}: field {key!r} must be a string")
    attrs = rec.get("attributes", [])
    if not isinstance(attrs, list) or not all(isinstance(a, str) for a in attrs):
        raise AnnotationError(f"line {lineno}: 'attributes' must be a list of strings")
    rels = rec.get("relations", [])
    if not isinstance(rels, list):
        raise AnnotationError(f"line {lineno}: 'relations' must be a list")
    for r in rels:
        if not (isinstance(r, dict) and isinstance(r.get("predicate"), str) and isinstance(r.get("object_class"), str)):
            raise AnnotationError(f"line {lineno}: each relation needs string 'predicate' and 'object_class'")
    return {"image": rec["image"], "class": rec["class"], "attributes": attrs, "relations": rels}


def read_vocabulary(path):
    """Plain-text vocabulary: one name per line, blank lines and '#' comments ignored."""
    with open(path, encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]


def _top_k(counter, k):
    ranked = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))
    if k is not None:
        ranked = ranked[:k]
    return [name for name, _ in ranked]


def ingest_annotations(records, classes=None, attributes=None, predicates=None, top_attrs=None, top_predicates=None):
    """Tally class-attribute and relation-triple counts.

    ``records`` are dicts (see parse_annotations) or raw NDJSON lines.
    Vocabularies default to what appears in the data: classes sorted by name,
    attributes and predicates ranked by frequency (ties by name) and cut to
    ``top_attrs`` / ``top_predicates``. Names outside the vocabulary are
    skipped and tallied in ``table.skipped``.
    """
    records = list(records)
    if records and not isinstance(records[0], dict):
        records = parse_annotations(records)
    else:
        records = [_validate_record(r, i) for i, r in enumerate(records, start=1)]
    if not records:
        raise EmptyTableError("no annotation records")

    if classes is None:
        seen = {r["class"] for r in records}
        seen.update(rel["object_class"] for r in records for rel in r["relations"])
        classes = sorted(seen)
    if attributes is None:
        attributes = _top_k(Counter(a for r in records for a in r["attributes"]), top_attrs)
    if predicates is None:
        predicates = _top_k(Counter(rel["predicate"] for r in records for rel in r["relations"]), top_predicates)

    cidx = {name: i for i, name in enumerate(classes)}
    aidx = {name: i for i, name in enumerate(attributes)}
    pidx = {name: i for i, name in enumerate(predicates)}
    counts = np.zeros((len(classes), len(attributes)), dtype=np.int64)
    triples = Counter()
    skipped = Counter()
    for r in records:
        c = cidx.get(r["class"])
        if c is None:
            skipped["records"] += 1
            continue
        for a in r["attributes"]:
            k = aidx.get(a)
            if k is None:
                skipped["attributes"] += 1
            else:
                counts[c, k] += 1
        for rel in r["relations"]:
            p = pidx.get(rel["predicate"])
            o = cidx.get(rel["object_class"])
            if p is None or o is None:
                skipped["relations"] += 1
            else:
                triples[(c, p, o)] += 1
    skipped = {key: skipped.get(key, 0) for key in ("records", "attributes", "relations")}
    table = FrequencyTable(counts, list(classes), list(attributes), skipped)
    return table, RelationshipTriples(dict(triples), list(classes), list(predicates))


# --------------------------------------------------------------------------
# divergence


def class_distribution(table, class_id):
    if not 0 <= class_id < table.num_classes:
        raise IndexError(f"class id {class_id} out of range for {table.num_classes} classes")
    row = table.counts[class_id].astype(np.float64)
    total = row.sum()
    if total == 0:
        return ClassDistribution(np.zeros_like(row), empty=True)
    return ClassDistribution(row / total)


def _kl2(p, m):
    nz = p > 0
    return float(np.sum(p[nz] * np.log2(p[nz] / m[nz])))


def js_divergence(p, q):
    """Jensen-Shannon divergence in bits; lies in [0, 1]."""
    if isinstance(p, ClassDistribution):
        if p.empty:
            raise GraphDomainError("JS divergence of an empty distribution")
        p = p.probs
    if isinstance(q, ClassDistribution):
        if q.empty:
            raise GraphDomainError("JS divergence of an empty distribution")
        q = q.probs
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"distributions have different support sizes {p.shape} and {q.shape}")
    if p.sum() <= 0 or q.sum() <= 0:
        raise GraphDomainError("JS divergence of an empty distribution")
    m = 0.5 * (p + q)
    js = 0.5 * _kl2(p, m) + 0.5 * _kl2(q, m)
    return min(max(js, 0.0), 1.0)


def _js_matrix(probs):
    """All-pairs JS divergence for rows of ``probs`` (rows sum to 1)."""
    p = probs[:, None, :]
    q = probs[None, :, :]
    m = 0.5 * (p + q)
    with np.errstate(divide="ignore", invalid="ignore"):
        tp = np.where(p > 0, p * np.log2(p / m), 0.0)
        tq = np.where(q > 0, q * np.log2(q / m), 0.0)
    js = 0.5 * tp.sum(axis=2) + 0.5 * tq.sum(axis=2)
    js = np.clip(js, 0.0, 1.0)
    # exact symmetry regardless of summation order
    return np.triu(js) + np.triu(js, 1).T


def build_attribute_graph(table, similarity=False):
    """Edge (i, j) = JS(P_i, P_j), or 1 - JS with ``similarity``.

    Pairs touching a class with no attribute annotations get weight 0 and the
    class is listed in ``report["empty_classes"]``.
    """
    if table.num_classes < 2:
        raise GraphDomainError("attribute graph needs at least two classes")
    totals = table.counts.sum(axis=1)
    empty = totals == 0
    if empty.all():
        raise GraphDomainError("every class has zero attribute annotations")
    probs = np.zeros(table.counts.shape)
    probs[~empty] = table.counts[~empty] / totals[~empty, None]
    js = _js_matrix(probs)
    edges = 1.0 - js if similarity else js
    edges[empty, :] = 0.0
    edges[:, empty] = 0.0
    report = {
        "empty_classes": [table.class_names[i] for i in np.flatnonzero(empty)],
        "mode": "similarity" if similarity else "divergence",
    }
    return PriorGraph(edges, "attribute", list(table.class_names), report)


def build_relationship_graph(triples, per_predicate=False):
    """Symmetrized, row-normalized co-occurrence of class pairs in triples.

    raw[s, o] counts triples (s, *, o); raw + raw.T with the diagonal counted
    once; rows divided by their sums. ``per_predicate`` normalizes each
    predicate's matrix separately and averages them with equal weight.
    """
    if len(triples) == 0:
        raise GraphDomainError("relationship graph needs at least one triple")
    c = triples.num_classes
    if per_predicate:
        mats = {}
        for (s, p, o), n in triples.counts.items():
            mats.setdefault(p, np.zeros((c, c)))[s, o] += n
        acc = np.zeros((c, c))
        for p in sorted(mats):
            acc += _row_normalize(_symmetrize(mats[p]))[0]
        edges, isolated = _row_normalize(acc / len(mats))
    else:
        raw = np.zeros((c, c))
        for (s, _, o), n in triples.counts.items():
            raw[s, o] += n
        edges, isolated = _row_normalize(_symmetrize(raw))
    report = {
        "isolated_classes": [triples.class_names[i] for i in np.flatnonzero(isolated)],
        "mode": "per_predicate" if per_predicate else "collapsed",
    }
    return PriorGraph(edges, "relationship", list(triples.class_names), report)


def _symmetrize(raw):
    sym = raw + raw.T
    np.fill_diagonal(sym, np.diag(raw))
    return sym


def _row_normalize(mat):
    sums = mat.sum(axis=1)
    isolated = sums == 0
    out = np.zeros_like(mat)
    out[~isolated] = mat[~isolated] / sums[~isolated, None]
    return out, isolated


# --------------------------------------------------------------------------
# serialization


def graph_to_bytes(graph):
    meta = {
        "schema": "hkrm-prior-graph",
        "schema_version": GRAPH_SCHEMA_VERSION,
        "kind": graph.kind,
        "class_names": list(graph.class_names),
        "report": graph.report,
    }
    return tensorio.encode({"edges": graph.edges}, meta)


def graph_from_bytes(data):
    tensors, meta = tensorio.decode(data)
    if meta.get("schema") != "hkrm-prior-graph":
        raise tensorio.ContainerError("container does not hold a prior graph")
    if meta.get("schema_version") != GRAPH_SCHEMA_VERSION:
        raise tensorio.ContainerError(
            f"unsupported graph schema version {meta.get('schema_version')!r}, expected {GRAPH_SCHEMA_VERSION}"
        )
    if "edges" not in tensors:
        raise tensorio.ContainerError("prior graph container has no 'edges' tensor")
    return PriorGraph(tensors["edges"], meta["kind"], meta["class_names"], meta.get("report", {}))


def save_graph(graph, path):
    tensorio.atomic_write_bytes(path, graph_to_bytes(graph))


def load_graph(path):
    with open(path, "rb") as fh:
        return graph_from_bytes(fh.read())


def graph_to_csv(graph):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class"] + list(graph.class_names))
    for name, row in zip(graph.class_names, graph.edges):
        writer.writerow([name] + [repr(float(v)) for v in row])
    return buf.getvalue()

