"""Composition specification: which modules run and how their outputs merge.

Text grammar (UTF-8, '#' comments, whitespace-separated tokens):

    spec        := module_decl+ "execution" node
    module_decl := "module" NAME ["priority=" INT] ["events=" KIND ("," KIND)*]
    node        := NAME
                 | "sequential" "{" node+ "}"
                 | "parallel" "policy=" ("discard"|"ignore"|"priority")
                             ["fields=" FIELD ("," FIELD)*] "{" node+ "}"

KIND is one of packet_in, port_status, flow_removed, stats_reply. FIELD is
a header field name or one of the action kinds output/flood/to_controller/
drop (restricting which action differences count as conflicts).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

from .sbi import EVENT_KINDS, SCOPE_FIELDS

POLICY_KINDS = ("discard", "ignore", "priority")


class SpecError(Exception):
    pass


class SpecSyntaxError(SpecError):
    def __init__(self, line: int, col: int, message: str):
        super().__init__(f"line {line}, col {col}: {message}")
        self.line = line
        self.col = col


class SpecSemanticError(SpecError):
    def __init__(self, cause: str, message: str):
        super().__init__(f"{cause}: {message}")
        self.cause = cause


@dataclass(frozen=True, slots=True)
class ModuleDecl:
    name: str
    priority: int = 0
    event_filter: Optional[frozenset[str]] = None

    def handles(self, kind: str) -> bool:
        return self.event_filter is None or kind in self.event_filter


@dataclass(frozen=True, slots=True)
class Policy:
    kind: str
    conflict_scope: Optional[frozenset[str]] = None

    def __post_init__(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.conflict_scope is not None and not self.conflict_scope:
            raise ValueError("conflict_scope, if present, must be non-empty")


@dataclass(frozen=True, slots=True)
class Leaf:
    name: str


@dataclass(frozen=True, slots=True)
class Sequential:
    children: tuple["Node", ...]


@dataclass(frozen=True, slots=True)
class Parallel:
    children: tuple["Node", ...]
    policy: Policy


Node = Union[Leaf, Sequential, Parallel]


def tree_leaf_names(node: Node) -> tuple[str, ...]:
    if isinstance(node, Leaf):
        return (node.name,)
    names: tuple[str, ...] = ()
    for child in node.children:
        names += tree_leaf_names(child)
    return names


@dataclass(frozen=True, slots=True)
class CompositionSpec:
    modules: tuple[ModuleDecl, ...]
    execution: Node

    def decl(self, name: str) -> ModuleDecl:
        for m in self.modules:
            if m.name == name:
                return m
        raise KeyError(name)

    def decl_index(self, name: str) -> int:
        for i, m in enumerate(self.modules):
            if m.name == name:
                return i
        raise KeyError(name)


@dataclass(frozen=True, slots=True)
class _Token:
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0]
        col = 0
        i = 0
        while i < len(line):
            ch = line[i]
            if ch.isspace():
                i += 1
                continue
            if ch in "{}":
                tokens.append(_Token(ch, lineno, i + 1))
                i += 1
                continue
            start = i
            while i < len(line) and not line[i].isspace() and line[i] not in "{}":
                i += 1
            tokens.append(_Token(line[start:i], lineno, start + 1))
    return tokens


class _Parser:
    def __init__(self, tokens: list[_Token]):
        self._tokens = tokens
        self._pos = 0

    def _peek(self) -> Optional[_Token]:
        return self._tokens[self._pos] if self._pos < len(self._tokens) else None

    def _next(self, what: str) -> _Token:
        tok = self._peek()
        if tok is None:
            last = self._tokens[-1] if self._tokens else _Token("", 1, 1)
            raise SpecSyntaxError(last.line, last.col, f"unexpected end of input, expected {what}")
        self._pos += 1
        return tok

    def _expect(self, text: str) -> _Token:
        tok = self._next(repr(text))
        if tok.text != text:
            raise SpecSyntaxError(tok.line, tok.col, f"expected {text!r}, found {tok.text!r}")
        return tok

    def parse(self) -> CompositionSpec:
        modules: list[ModuleDecl] = []
        while True:
            tok = self._peek()
            if tok is None:
                line = self._tokens[-1].line if self._tokens else 1
                raise SpecSyntaxError(line, 1, "missing 'execution' section")
            if tok.text == "execution":
                break
            self._expect("module")
            modules.append(self._module_decl())
        if not modules:
            tok = self._peek()
            raise SpecSyntaxError(tok.line, tok.col, "at least one module declaration required")
        self._expect("execution")
        node = self._node()
        trailing = self._peek()
        if trailing is not None:
            raise SpecSyntaxError(trailing.line, trailing.col,
                                  f"unexpected token {trailing.text!r} after execution tree")
        return _validate(CompositionSpec(tuple(modules), node))

    def _module_decl(self) -> ModuleDecl:
        name_tok = self._next("module name")
        if "=" in name_tok.text or name_tok.text in ("module", "execution", "{", "}"):
            raise SpecSyntaxError(name_tok.line, name_tok.col,
                                  f"invalid module name {name_tok.text!r}")
        priority = 0
        event_filter: Optional[frozenset[str]] = None
        while True:
            tok = self._peek()
            if tok is None or "=" not in tok.text:
                break
            key, _, value = tok.text.partition("=")
            if key == "priority":
                try:
                    priority = int(value)
                except ValueError:
                    raise SpecSyntaxError(tok.line, tok.col,
                                          f"priority must be an integer, found {value!r}") from None
            elif key == "events":
                kinds = tuple(k for k in value.split(",") if k)
                if not kinds:
                    raise SpecSyntaxError(tok.line, tok.col, "events= list is empty")
                for k in kinds:
                    if k not in EVENT_KINDS:
                        raise SpecSemanticError("unknown-event-kind",
                                                f"module {name_tok.text!r} filters on {k!r}")
                event_filter = frozenset(kinds)
            else:
                raise SpecSyntaxError(tok.line, tok.col, f"unknown module option {key!r}")
            self._pos += 1
        if priority < 0:
            raise SpecSemanticError("negative-priority",
                                    f"module {name_tok.text!r} priority {priority}")
        return ModuleDecl(name_tok.text, priority, event_filter)

    def _node(self) -> Node:
        tok = self._next("execution node")
        if tok.text == "sequential":
            self._expect("{")
            return Sequential(self._children())
        if tok.text == "parallel":
            policy_tok = self._next("policy=")
            key, _, value = policy_tok.text.partition("=")
            if key != "policy":
                raise SpecSyntaxError(policy_tok.line, policy_tok.col,
                                      "parallel node requires policy=")
            if value not in POLICY_KINDS:
                raise SpecSyntaxError(policy_tok.line, policy_tok.col,
                                      f"unknown policy {value!r}")
            scope: Optional[frozenset[str]] = None
            nxt = self._peek()
            if nxt is not None and nxt.text.startswith("fields="):
                fields = tuple(f for f in nxt.text[len("fields="):].split(",") if f)
                if not fields:
                    raise SpecSyntaxError(nxt.line, nxt.col, "fields= list is empty")
                for f in fields:
                    if f not in SCOPE_FIELDS:
                        raise SpecSemanticError("unknown-conflict-field", f"fields={f}")
                scope = frozenset(fields)
                self._pos += 1
            self._expect("{")
            return Parallel(self._children(), Policy(value, scope))
        if tok.text in ("{", "}", "module", "execution") or "=" in tok.text:
            raise SpecSyntaxError(tok.line, tok.col, f"expected node, found {tok.text!r}")
        return Leaf(tok.text)

    def _children(self) -> tuple[Node, ...]:
        children: list[Node] = []
        while True:
            tok = self._peek()
            if tok is None:
                last = self._tokens[-1]
                raise SpecSyntaxError(last.line, last.col, "unterminated node, expected '}'")
            if tok.text == "}":
                self._pos += 1
                if not children:
                    raise SpecSyntaxError(tok.line, tok.col, "node has no children")
                return tuple(children)
            children.append(self._node())


def _validate(spec: CompositionSpec) -> CompositionSpec:
    declared: dict[str, ModuleDecl] = {}
    for m in spec.modules:
        if m.name in declared:
            raise SpecSemanticError("duplicate-module", f"module {m.name!r} declared twice")
        declared[m.name] = m
    seen: set[str] = set()
    for name in tree_leaf_names(spec.execution):
        if name not in declared:
            raise SpecSemanticError("unknown-module", f"execution tree references {name!r}")
        if name in seen:
            raise SpecSemanticError("repeated-module",
                                    f"module {name!r} appears twice in the tree")
        seen.add(name)
    return spec


def parse_spec(text: str) -> CompositionSpec:
    """Parse and validate a composition specification document."""
    return _Parser(_tokenize(text)).parse()
