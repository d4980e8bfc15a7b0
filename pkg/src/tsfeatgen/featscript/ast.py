"""Expression tree for FeatScript programs.

Node equality ignores source positions, so a pretty-printed program reparses
to an equal tree.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

Pos = tuple[int, int]  # (line, column), both 1-based


@dataclass(frozen=True)
class Node:
    def children(self) -> tuple["Node", ...]:
        return ()


@dataclass(frozen=True)
class Num(Node):
    value: float
    pos: Pos = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class Bool(Node):
    value: bool
    pos: Pos = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class NALit(Node):
    pos: Pos = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class VarRef(Node):
    """A schema variable name; only legal as the first argument of a tool call."""

    name: str
    pos: Pos = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class Name(Node):
    """Reference to a ``let``-bound identifier."""

    id: str
    pos: Pos = field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class Let(Node):
    name: str
    value: Node
    body: Node
    pos: Pos = field(default=(0, 0), compare=False, repr=False)

    def children(self):
        return (self.value, self.body)


@dataclass(frozen=True)
class If(Node):
    cond: Node
    then: Node
    orelse: Node
    pos: Pos = field(default=(0, 0), compare=False, repr=False)

    def children(self):
        return (self.cond, self.then, self.orelse)


@dataclass(frozen=True)
class BinOp(Node):
    op: str
    left: Node
    right: Node
    pos: Pos = field(default=(0, 0), compare=False, repr=False)

    def children(self):
        return (self.left, self.right)


@dataclass(frozen=True)
class UnaryOp(Node):
    op: str  # "-" or "not"
    operand: Node
    pos: Pos = field(default=(0, 0), compare=False, repr=False)

    def children(self):
        return (self.operand,)


@dataclass(frozen=True)
class Call(Node):
    func: str
    args: tuple[Node, ...]
    pos: Pos = field(default=(0, 0), compare=False, repr=False)

    def children(self):
        return self.args


def walk(node: Node) -> Iterator[Node]:
    stack = [node]
    while stack:
        n = stack.pop()
        yield n
        stack.extend(reversed(n.children()))


def describe(node: Node) -> str:
    line, col = node.pos
    kind = type(node).__name__
    label = getattr(node, "func", None) or getattr(node, "op", None) or getattr(node, "name", None)
    where = f" at {line}:{col}" if line else ""
    return f"{kind}({label}){where}" if label else f"{kind}{where}"
