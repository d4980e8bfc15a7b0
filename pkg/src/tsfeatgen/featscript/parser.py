"""Lexer, recursive-descent parser and canonical printer for FeatScript."""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass

from ..tools import TOOLS
from .ast import Bool, BinOp, Call, If, Let, NALit, Name, Node, Num, UnaryOp, VarRef, walk

KEYWORDS = frozenset({"let", "in", "if", "then", "else", "and", "or", "not", "true", "false", "NA"})
COMPARISONS = ("<", "<=", ">", ">=", "==", "!=")
MAX_DEPTH = 200

_ALIASES = {"×": "*", "·": "*", "÷": "/", "−": "-", "≤": "<=", "≥": ">=", "≠": "!="}
_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_NUMBER = re.compile(r"(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?")
_OPS = ("<=", ">=", "==", "!=", "+", "-", "*", "/", "<", ">", "(", ")", ",", "=")


class FeatScriptSyntaxError(ValueError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} at line {line}, column {column}")
        self.message = message
        self.line = line
        self.column = column


@dataclass(frozen=True)
class Token:
    kind: str  # NUM, IDENT, STR, KW, OP, EOF
    text: str
    line: int
    col: int


def tokenize(source: str) -> list[Token]:
    tokens: list[Token] = []
    i, line, line_start = 0, 1, 0
    n = len(source)
    while i < n:
        c = source[i]
        col = i - line_start + 1
        if c == "\n":
            i += 1
            line, line_start = line + 1, i
            continue
        if c.isspace():
            i += 1
            continue
        if c == "#":
            while i < n and source[i] != "\n":
                i += 1
            continue
        if c in _ALIASES:
            tokens.append(Token("OP", _ALIASES[c], line, col))
            i += 1
            continue
        m = _NUMBER.match(source, i)
        if m:
            tokens.append(Token("NUM", m.group(), line, col))
            i = m.end()
            if i < n and (source[i].isalpha() or source[i] == "_"):
                raise FeatScriptSyntaxError(f"malformed number {source[m.start():i + 1]!r}", line, col)
            continue
        m = _IDENT.match(source, i)
        if m:
            word = m.group()
            tokens.append(Token("KW" if word in KEYWORDS else "IDENT", word, line, col))
            i = m.end()
            continue
        if c == '"':
            j, buf = i + 1, []
            while j < n and source[j] != '"':
                if source[j] == "\n":
                    break
                if source[j] == "\\" and j + 1 < n:
                    j += 1
                buf.append(source[j])
                j += 1
            if j >= n or source[j] != '"':
                raise FeatScriptSyntaxError("unterminated string", line, col)
            tokens.append(Token("STR", "".join(buf), line, col))
            i = j + 1
            continue
        for op in _OPS:
            if source.startswith(op, i):
                tokens.append(Token("OP", op, line, col))
                i += len(op)
                break
        else:
            raise FeatScriptSyntaxError(f"unexpected character {c!r}", line, col)
    tokens.append(Token("EOF", "", line, i - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, source: str):
        self.tokens = tokenize(source)
        self.i = 0
        self.depth = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def advance(self) -> Token:
        t = self.tokens[self.i]
        if t.kind != "EOF":
            self.i += 1
        return t

    def at(self, text: str) -> bool:
        t = self.tok
        return t.kind in ("OP", "KW") and t.text == text

    def expect(self, text: str) -> Token:
        if not self.at(text):
            self.fail(f"expected {text!r}")
        return self.advance()

    def fail(self, message: str, tok: Token | None = None):
        tok = tok or self.tok
        found = "end of input" if tok.kind == "EOF" else repr(tok.text)
        raise FeatScriptSyntaxError(f"{message}, found {found}", tok.line, tok.col)

    def parse(self) -> Node:
        node = self.expr()
        if self.tok.kind != "EOF":
            self.fail("unexpected trailing input")
        return node

    def expr(self) -> Node:
        self.depth += 1
        if self.depth > MAX_DEPTH:
            self.fail("expression nested too deeply")
        try:
            if self.at("let"):
                return self.let()
            if self.at("if"):
                return self.if_()
            return self.or_()
        finally:
            self.depth -= 1

    def let(self) -> Node:
        start = self.advance()
        name = self.tok
        if name.kind != "IDENT":
            self.fail("expected identifier after 'let'")
        self.advance()
        self.expect("=")
        value = self.expr()
        self.expect("in")
        body = self.expr()
        return Let(name.text, value, body, pos=(start.line, start.col))

    def if_(self) -> Node:
        start = self.advance()
        cond = self.expr()
        self.expect("then")
        then = self.expr()
        self.expect("else")
        orelse = self.expr()
        return If(cond, then, orelse, pos=(start.line, start.col))

    def _left_assoc(self, ops, sub) -> Node:
        left = sub()
        while self.tok.kind in ("OP", "KW") and self.tok.text in ops:
            op = self.advance()
            left = BinOp(op.text, left, sub(), pos=(op.line, op.col))
        return left

    def or_(self) -> Node:
        return self._left_assoc(("or",), self.and_)

    def and_(self) -> Node:
        return self._left_assoc(("and",), self.not_)

    def not_(self) -> Node:
        if self.at("not"):
            op = self.advance()
            return UnaryOp("not", self.nested(self.not_), pos=(op.line, op.col))
        return self.comparison()

    def comparison(self) -> Node:
        left = self.additive()
        if self.tok.kind == "OP" and self.tok.text in COMPARISONS:
            op = self.advance()
            node = BinOp(op.text, left, self.additive(), pos=(op.line, op.col))
            if self.tok.kind == "OP" and self.tok.text in COMPARISONS:
                self.fail("chained comparisons are not allowed; combine with 'and'")
            return node
        return left

    def additive(self) -> Node:
        return self._left_assoc(("+", "-"), self.multiplicative)

    def multiplicative(self) -> Node:
        return self._left_assoc(("*", "/"), self.unary)

    def nested(self, rule) -> Node:
        self.depth += 1
        if self.depth > MAX_DEPTH:
            self.fail("expression nested too deeply")
        try:
            return rule()
        finally:
            self.depth -= 1

    def unary(self) -> Node:
        if self.at("-"):
            op = self.advance()
            return UnaryOp("-", self.nested(self.unary), pos=(op.line, op.col))
        return self.primary()

    def primary(self) -> Node:
        t = self.tok
        pos = (t.line, t.col)
        if t.kind == "NUM":
            self.advance()
            return Num(float(t.text), pos=pos)
        if t.kind == "KW":
            if t.text in ("true", "false"):
                self.advance()
                return Bool(t.text == "true", pos=pos)
            if t.text == "NA":
                self.advance()
                return NALit(pos=pos)
            if t.text in ("let", "if"):
                return self.expr()
        if t.kind == "STR":
            self.fail("string literals are only allowed as variable names in tool calls")
        if self.at("("):
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        if t.kind == "IDENT":
            self.advance()
            if self.at("("):
                return self.call(t)
            return Name(t.text, pos=pos)
        self.fail("expected an expression")

    def call(self, name: Token) -> Node:
        self.expect("(")
        args: list[Node] = []
        if name.text in TOOLS:
            v = self.tok
            if v.kind not in ("IDENT", "STR"):
                self.fail(f"{name.text} expects a variable name as its first argument")
            self.advance()
            if not (self.at(",") or self.at(")")):
                self.fail(f"{name.text} expects a bare variable name as its first argument")
            args.append(VarRef(v.text, pos=(v.line, v.col)))
            if self.at(","):
                self.advance()
                args.append(self.expr())
        elif not self.at(")"):
            args.append(self.expr())
        while self.at(","):
            self.advance()
            args.append(self.expr())
        self.expect(")")
        return Call(name.text, tuple(args), pos=(name.line, name.col))


@dataclass(frozen=True)
class Program:
    source: str
    ast: Node
    declared_variables: frozenset[str]

    @property
    def canonical(self) -> str:
        return pretty_print(self)


def declared_variables(node: Node) -> frozenset[str]:
    return frozenset(n.name for n in walk(node) if isinstance(n, VarRef))


def parse(source: str) -> Program:
    """Parse FeatScript source; raises FeatScriptSyntaxError with line/column."""
    # each nesting level costs ~15 interpreter frames; make room for MAX_DEPTH of them
    limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(limit, MAX_DEPTH * 16 + 1000))
    try:
        tree = _Parser(source).parse()
    finally:
        sys.setrecursionlimit(limit)
    return Program(source, tree, declared_variables(tree))


# ------------------------------------------------------------------ printer

_PREC = {"or": 1, "and": 2, "<": 4, "<=": 4, ">": 4, ">=": 4, "==": 4, "!=": 4, "+": 5, "-": 5, "*": 6, "/": 6}
_NOT_PREC, _NEG_PREC, _ATOM_PREC = 3, 7, 8


def _precedence(node: Node) -> int:
    if isinstance(node, (Let, If)):
        return 0
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, UnaryOp):
        return _NOT_PREC if node.op == "not" else _NEG_PREC
    return _ATOM_PREC


def format_number(value: float) -> str:
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def _format_var(name: str) -> str:
    if _IDENT.fullmatch(name) and name not in KEYWORDS:
        return name
    return '"' + name.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _fmt(node: Node, ctx: int) -> str:
    prec = _precedence(node)
    if isinstance(node, Num):
        text = format_number(node.value)
    elif isinstance(node, Bool):
        text = "true" if node.value else "false"
    elif isinstance(node, NALit):
        text = "NA"
    elif isinstance(node, VarRef):
        text = _format_var(node.name)
    elif isinstance(node, Name):
        text = node.id
    elif isinstance(node, Call):
        text = f"{node.func}({', '.join(_fmt(a, 0) for a in node.args)})"
    elif isinstance(node, Let):
        text = f"let {node.name} = {_fmt(node.value, 0)} in {_fmt(node.body, 0)}"
    elif isinstance(node, If):
        text = f"if {_fmt(node.cond, 0)} then {_fmt(node.then, 0)} else {_fmt(node.orelse, 0)}"
    elif isinstance(node, UnaryOp):
        text = f"-{_fmt(node.operand, _NEG_PREC)}" if node.op == "-" else f"not {_fmt(node.operand, _NOT_PREC)}"
    elif isinstance(node, BinOp):
        left_ctx = prec + 1 if prec == 4 else prec
        text = f"{_fmt(node.left, left_ctx)} {node.op} {_fmt(node.right, prec + 1)}"
    else:
        raise TypeError(f"not a FeatScript node: {node!r}")
    return f"({text})" if prec < ctx else text


def pretty_print(program: Program | Node) -> str:
    """Canonical single-line source: normalized spacing, minimal parentheses."""
    node = program.ast if isinstance(program, Program) else program
    return _fmt(node, 0)
