"""Query language front end: parsing, plan validation, property indexes.

The grammar is a strict dot-pipeline over the traversal/mutation step set
(documented in docs/grammar.md): double-quoted strings, bare numbers,
`key:value` property maps, anonymous sub-pipelines inside union().  Parsing
validates step names and arities; planning kind-checks every step boundary
and rewrites leading indexed has() filters into index-lookup sources.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

from .common import Kind, ParseError, PlanError
from .txn import _pred_value

# Element kinds flowing between steps.
K_VERTEX = "vertex"
K_EDGE = "edge"
K_VALUE = "value"
K_ROW = "row"
K_MIXED = "mixed"
K_NONE = "none"

MUTATION_STEPS = {"setProperty", "removeProperty", "addEdge", "removeVertex", "removeEdge"}


@dataclass
class Step:
    name: str
    args: tuple = ()
    subplans: tuple = ()   # union branches

    def __repr__(self):
        inner = ", ".join(map(repr, self.args)) if self.args else ""
        return f"{self.name}({inner})"


@dataclass
class Pipeline:
    source: tuple                 # ("V", gid|None) | ("E", gid|None) | ("addVertex", props)
    steps: list[Step] = field(default_factory=list)
    read_write: bool = False


# -- tokenizer ---------------------------------------------------------------

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<string>"(?:[^"\\]|\\.)*")
  | (?P<number>-?\d+\.\d+|-?\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[().,:;])
""", re.VERBOSE)


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        if m.lastgroup != "ws":
            tokens.append((m.lastgroup, m.group(), pos))
        pos = m.end()
    tokens.append(("eof", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, kind: str, value: Optional[str] = None):
        tok = self.next()
        if tok[0] != kind or (value is not None and tok[1] != value):
            raise ParseError(f"expected {value or kind}, found {tok[1]!r}", tok[2])
        return tok

    def at_punct(self, p: str) -> bool:
        tok = self.peek()
        return tok[0] == "punct" and tok[1] == p

    # -- grammar -------------------------------------------------------------

    def parse_query(self) -> list[Pipeline]:
        pipelines = [self.parse_statement()]
        while self.at_punct(";"):
            self.next()
            if self.peek()[0] == "eof":
                break
            pipelines.append(self.parse_statement())
        self.expect("eof")
        return pipelines

    def parse_statement(self) -> Pipeline:
        tok = self.expect("ident")
        name = tok[1]
        if name == "g":
            self.expect("punct", ".")
            return self.parse_g_source()
        if name in ("v", "e"):
            args = self.parse_args()
            if len(args) != 1 or not isinstance(args[0], int):
                raise ParseError(f"{name}(id) takes one integer id", tok[2])
            source = ("V", args[0]) if name == "v" else ("E", args[0])
            return self.finish_pipeline(source)
        raise ParseError(f"statement must start with g, v(id) or e(id), found {name!r}", tok[2])

    def parse_g_source(self) -> Pipeline:
        tok = self.expect("ident")
        name = tok[1]
        if name in ("V", "E"):
            args = self.parse_args() if self.at_punct("(") else ()
            if len(args) > 1:
                raise ParseError(f"{name}() takes at most one id", tok[2])
            gid = args[0] if args else None
            if gid is not None and not isinstance(gid, int):
                raise ParseError(f"{name}(id) takes an integer id", tok[2])
            return self.finish_pipeline((name, gid))
        if name == "addVertex":
            args = self.parse_args()
            props = _props_of(args, tok[2])
            return self.finish_pipeline(("addVertex", props), read_write=True)
        if name == "addEdge":
            args = self.parse_args()
            if len(args) < 3 or not isinstance(args[0], int) or not isinstance(args[1], int) \
                    or not isinstance(args[2], str):
                raise ParseError("addEdge(v1, v2, label[, props]) expected", tok[2])
            props = _props_of(args[3:], tok[2])
            pipe = self.finish_pipeline(("V", args[0]), read_write=True)
            pipe.steps.insert(0, Step("addEdge", (args[1], args[2], props)))
            return pipe
        if name == "removeVertex":
            args = self.parse_args()
            if len(args) != 1 or not isinstance(args[0], int):
                raise ParseError("removeVertex(id) expected", tok[2])
            pipe = self.finish_pipeline(("V", args[0]), read_write=True)
            pipe.steps.insert(0, Step("removeVertex"))
            return pipe
        if name == "removeEdge":
            args = self.parse_args()
            if len(args) != 1 or not isinstance(args[0], int):
                raise ParseError("removeEdge(id) expected", tok[2])
            pipe = self.finish_pipeline(("E", args[0]), read_write=True)
            pipe.steps.insert(0, Step("removeEdge"))
            return pipe
        raise ParseError(f"unknown source {name!r}", tok[2])

    def finish_pipeline(self, source: tuple, read_write: bool = False) -> Pipeline:
        steps = []
        while self.at_punct("."):
            self.next()
            steps.append(self.parse_step())
        pipe = Pipeline(source, steps)
        pipe.read_write = read_write or any(s.name in MUTATION_STEPS for s in _walk(steps))
        return pipe

    def parse_step(self) -> Step:
        tok = self.expect("ident")
        name = tok[1]
        if name == "union":
            subs = self.parse_union_args()
            return Step("union", (), tuple(subs))
        args = self.parse_args() if self.at_punct("(") else ()
        return _make_step(name, args, tok[2])

    def parse_union_args(self) -> list[list[Step]]:
        self.expect("punct", "(")
        subs = []
        while True:
            subs.append(self.parse_subpipeline())
            if self.at_punct(","):
                self.next()
                continue
            self.expect("punct", ")")
            return subs

    def parse_subpipeline(self) -> list[Step]:
        steps = [self.parse_step()]
        while self.at_punct("."):
            self.next()
            steps.append(self.parse_step())
        return steps

    def parse_args(self) -> tuple:
        self.expect("punct", "(")
        args = []
        if self.at_punct(")"):
            self.next()
            return tuple(args)
        while True:
            args.append(self.parse_arg())
            if self.at_punct(","):
                self.next()
                continue
            self.expect("punct", ")")
            return tuple(args)

    def parse_arg(self):
        tok = self.peek()
        if tok[0] == "string":
            self.next()
            key_or_val = _unquote(tok[1])
            if self.at_punct(":"):
                self.next()
                return (":", key_or_val, self.parse_scalar())
            return key_or_val
        if tok[0] == "number":
            self.next()
            return _number(tok[1])
        if tok[0] == "ident":
            name = tok[1]
            self.next()
            if name == "neq":
                inner = self.parse_args()
                if len(inner) != 1 or not isinstance(inner[0], str):
                    raise ParseError("neq(tag) takes one tag", tok[2])
                return ("neq", inner[0])
            if self.at_punct(":"):
                self.next()
                return (":", name, self.parse_scalar())
            if name in ("asc", "incr"):
                return ("dir", "asc")
            if name in ("desc", "decr"):
                return ("dir", "desc")
            if name in ("true", "false"):
                return name == "true"
            raise ParseError(f"unexpected identifier {name!r} in arguments", tok[2])
        raise ParseError(f"unexpected token {tok[1]!r} in arguments", tok[2])

    def parse_scalar(self):
        tok = self.next()
        if tok[0] == "string":
            return _unquote(tok[1])
        if tok[0] == "number":
            return _number(tok[1])
        if tok[0] == "ident" and tok[1] in ("true", "false"):
            return tok[1] == "true"
        raise ParseError(f"expected scalar value, found {tok[1]!r}", tok[2])


def _walk(steps):
    for s in steps:
        yield s
        for sub in s.subplans:
            yield from _walk(sub)


def _unquote(raw: str) -> str:
    body = raw[1:-1]
    return body.replace('\\"', '"').replace("\\\\", "\\")


def _number(raw: str):
    return float(raw) if "." in raw else int(raw)


def _props_of(args, offset) -> tuple:
    props = []
    for a in args:
        if not (isinstance(a, tuple) and len(a) == 3 and a[0] == ":"):
            raise ParseError("expected key:value property pairs", offset)
        props.append((a[1], a[2]))
    return tuple(props)


# Step registry: name -> (argument validator, (input kinds), output kind).
def _ident_arity(name, args, offset, minimum, maximum, types):
    if not minimum <= len(args) <= maximum:
        raise ParseError(f"{name}() takes {minimum}..{maximum} arguments", offset)
    for a, t in zip(args, types):
        if t == "str" and not isinstance(a, str):
            raise ParseError(f"{name}() argument must be a string", offset)
        if t == "int" and not isinstance(a, int):
            raise ParseError(f"{name}() argument must be an integer", offset)


def _make_step(name: str, args: tuple, offset: int) -> Step:
    if name == "has":
        if len(args) != 2 or not isinstance(args[0], str):
            raise ParseError("has(key, value) expected", offset)
        if args[0] == "label":
            if not isinstance(args[1], str):
                raise ParseError("has(\"label\", name) expects a string", offset)
            return Step("hasLabel", (args[1],))
        if isinstance(args[1], tuple):
            raise ParseError("has() predicates beyond equality are unsupported", offset)
        return Step("has", args)
    if name == "hasLabel":
        _ident_arity(name, args, offset, 1, 1, ["str"])
        return Step(name, args)
    if name in ("in", "out", "both", "inE", "outE", "bothE"):
        _ident_arity(name, args, offset, 0, 1, ["str"])
        return Step(name, args)
    if name in ("inV", "outV", "bothV", "label", "count", "removeVertex", "removeEdge"):
        _ident_arity(name, args, offset, 0, 0, [])
        return Step(name, args)
    if name == "dedup":
        _ident_arity(name, args, offset, 0, 1, ["str"])
        return Step(name, args)
    if name == "properties":
        for a in args:
            if not isinstance(a, str):
                raise ParseError("properties() takes property names", offset)
        return Step(name, args)
    if name == "values":
        _ident_arity(name, args, offset, 1, 1, ["str"])
        return Step(name, args)
    if name == "setProperty":
        if len(args) != 2 or not isinstance(args[0], str) or isinstance(args[1], tuple):
            raise ParseError("setProperty(name, value) expected", offset)
        return Step(name, args)
    if name == "removeProperty":
        _ident_arity(name, args, offset, 1, 1, ["str"])
        return Step(name, args)
    if name == "addEdge":
        if len(args) < 2 or not isinstance(args[0], int) or not isinstance(args[1], str):
            raise ParseError("addEdge(dst_id, label[, props]) expected", offset)
        return Step(name, (args[0], args[1], _props_of(args[2:], offset)))
    if name == "limit":
        _ident_arity(name, args, offset, 1, 1, ["int"])
        return Step(name, args)
    if name == "order":
        if len(args) != 2 or not isinstance(args[0], str) \
                or not (isinstance(args[1], tuple) and args[1][0] == "dir"):
            raise ParseError("order(key, asc|desc) expected", offset)
        return Step(name, (args[0], args[1][1]))
    if name == "where":
        if len(args) != 1 or not (isinstance(args[0], tuple) and args[0][0] == "neq"):
            raise ParseError("where(neq(tag)) expected", offset)
        return Step(name, (args[0][1],))
    if name == "as":
        _ident_arity(name, args, offset, 1, 1, ["str"])
        return Step(name, args)
    if name == "select":
        if not args or not all(isinstance(a, str) for a in args):
            raise ParseError("select(tag, ...) expected", offset)
        return Step(name, args)
    if name == "groupCount":
        _ident_arity(name, args, offset, 0, 1, ["str"])
        return Step(name, args)
    raise ParseError(f"unknown step {name!r}", offset)


def parse(text: str) -> list[Pipeline]:
    """Parse one or more ';'-separated statements into pipelines."""
    return _Parser(text).parse_query()


def parse_admin(text: str) -> Optional[dict]:
    """Recognize admin statements: index creation and stats."""
    parts = text.strip().split()
    if parts[:2] == ["index", "create"] and len(parts) == 4 and parts[2] in ("vertex", "edge"):
        return {"op": "index_create", "kind": parts[2], "prop": parts[3]}
    if parts == ["stats"]:
        return {"op": "stats"}
    return None


# -- planning -----------------------------------------------------------------

_ELEMENT = (K_VERTEX, K_EDGE)

_STEP_KINDS = {
    # name: (allowed input kinds, output fn(input))
    "has": (_ELEMENT, lambda k: k),
    "hasLabel": (_ELEMENT, lambda k: k),
    "in": ((K_VERTEX,), lambda k: K_VERTEX),
    "out": ((K_VERTEX,), lambda k: K_VERTEX),
    "both": ((K_VERTEX,), lambda k: K_VERTEX),
    "inE": ((K_VERTEX,), lambda k: K_EDGE),
    "outE": ((K_VERTEX,), lambda k: K_EDGE),
    "bothE": ((K_VERTEX,), lambda k: K_EDGE),
    "inV": ((K_EDGE,), lambda k: K_VERTEX),
    "outV": ((K_EDGE,), lambda k: K_VERTEX),
    "bothV": ((K_EDGE,), lambda k: K_VERTEX),
    "label": (_ELEMENT, lambda k: K_VALUE),
    "dedup": ((K_VERTEX, K_EDGE, K_VALUE, K_MIXED), lambda k: k),
    "properties": (_ELEMENT, lambda k: K_ROW),
    "values": (_ELEMENT, lambda k: K_VALUE),
    "setProperty": (_ELEMENT, lambda k: k),
    "removeProperty": (_ELEMENT, lambda k: k),
    "addEdge": ((K_VERTEX,), lambda k: K_EDGE),
    "removeVertex": ((K_VERTEX,), lambda k: K_NONE),
    "removeEdge": ((K_EDGE,), lambda k: K_NONE),
    "limit": ((K_VERTEX, K_EDGE, K_VALUE, K_ROW, K_MIXED), lambda k: k),
    "order": (_ELEMENT, lambda k: k),
    "union": ((K_VERTEX, K_EDGE, K_MIXED), None),
    "where": (_ELEMENT + (K_MIXED,), lambda k: k),
    "as": ((K_VERTEX, K_EDGE, K_VALUE, K_ROW), lambda k: k),
    "select": ((K_VERTEX, K_EDGE, K_VALUE, K_ROW, K_MIXED, K_NONE), lambda k: K_ROW),
    "groupCount": (_ELEMENT + (K_VALUE, K_MIXED), lambda k: K_ROW),
    "count": ((K_VERTEX, K_EDGE, K_VALUE, K_ROW, K_MIXED), lambda k: K_VALUE),
}

_PARALLEL_STEPS = {"has", "hasLabel", "in", "out", "both", "inE", "outE", "bothE",
                   "inV", "outV", "bothV", "properties", "values", "setProperty",
                   "removeProperty", "label"}


@dataclass
class Plan:
    source: tuple                 # possibly rewritten to ("V_index", key, value)
    steps: list[Step]
    read_write: bool
    output_kind: str
    parallel: list[bool] = field(default_factory=list)


def plan(pipeline: Pipeline, indexed_vertex_keys: frozenset = frozenset(),
         indexed_edge_keys: frozenset = frozenset()) -> Plan:
    """Kind-check the pipeline and rewrite indexed leading filters."""
    source = pipeline.source
    steps = list(pipeline.steps)
    if source[0] == "V":
        kind = K_VERTEX
    elif source[0] == "E":
        kind = K_EDGE
    elif source[0] == "addVertex":
        kind = K_VERTEX
    else:
        raise PlanError(f"unknown source {source!r}")

    if source[0] in ("V", "E") and source[1] is None and steps and steps[0].name == "has":
        key = steps[0].args[0]
        indexed = indexed_vertex_keys if source[0] == "V" else indexed_edge_keys
        if key in indexed:
            source = (source[0] + "_index", key, steps[0].args[1])
            steps = steps[1:]

    checked = _check_steps(steps, kind)
    parallel = [s.name in _PARALLEL_STEPS for s in steps]
    return Plan(source, steps, pipeline.read_write, checked, parallel)


def _check_steps(steps: list[Step], kind: str) -> str:
    for step in steps:
        if kind == K_NONE:
            raise PlanError(f"step {step.name} follows a terminal step")
        if step.name == "union":
            outs = set()
            for sub in step.subplans:
                outs.add(_check_steps(list(sub), kind))
            kind = outs.pop() if len(outs) == 1 else K_MIXED
            continue
        spec = _STEP_KINDS.get(step.name)
        if spec is None:
            raise PlanError(f"no kind rule for step {step.name}")
        allowed, out = spec
        if kind not in allowed and kind != K_MIXED:
            raise PlanError(f"step {step.name} cannot consume {kind} input")
        kind = out(kind)
    return kind


# -- property index ------------------------------------------------------------


class PropertyIndex:
    """Per-shard equality index over committed property values.

    Reflects the committed state as of the highest finalized commit time on
    the shard; commit finalization applies the delta synchronously.
    """

    def __init__(self, shard: int):
        self.shard = shard
        self.keys: dict[tuple[int, int], dict] = {}   # (element kind, key id) -> value -> set
        self.last_ct = None

    def create(self, kind: Kind, key_id: int) -> None:
        self.keys.setdefault((int(kind), key_id), {})

    def covers(self, kind: Kind, key_id: int) -> bool:
        return (int(kind), key_id) in self.keys

    def add(self, kind: Kind, key_id: int, value, gid: int) -> None:
        buckets = self.keys.get((int(kind), key_id))
        if buckets is None:
            return
        buckets.setdefault(_pred_value(value), set()).add(gid)

    def remove(self, kind: Kind, key_id: int, value, gid: int) -> None:
        buckets = self.keys.get((int(kind), key_id))
        if buckets is None:
            return
        group = buckets.get(_pred_value(value))
        if group is not None:
            group.discard(gid)
            if not group:
                del buckets[_pred_value(value)]

    def lookup(self, kind: Kind, key_id: int, value) -> set:
        buckets = self.keys.get((int(kind), key_id))
        if buckets is None:
            return set()
        return set(buckets.get(_pred_value(value), ()))
