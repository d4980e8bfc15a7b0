"""Static checks: variable scoping, builtin arity, argument kinds, result kind."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from ..tools import TOOLS
from .ast import Bool, BinOp, Call, If, Let, NALit, Name, Node, Num, UnaryOp, VarRef, describe
from .parser import Program

NUM, BOOL, SERIES, NA_KIND = "number", "boolean", "series", "NA"

AGGREGATIONS = ("mean", "std", "min", "max", "sum", "count", "first", "last", "slope")
PROJECTIONS = ("times", "values")
SCALAR_MATH = ("abs", "log", "exp")

# builtin name -> accepted signatures as (param kinds, result kind)
BUILTINS: dict[str, tuple[tuple[tuple[str, ...], str], ...]] = {
    **{name: (((SERIES,), NUM),) for name in AGGREGATIONS},
    "quantile": (((SERIES, NUM), NUM),),
    **{name: (((SERIES,), SERIES),) for name in PROJECTIONS},
    **{name: (((NUM,), NUM),) for name in SCALAR_MATH},
    "horizon": (((), NUM),),
    "is_na": (((NUM,), BOOL), ((BOOL,), BOOL)),
}
# elementwise two-argument forms
BUILTINS["min"] += (((NUM, NUM), NUM),)
BUILTINS["max"] += (((NUM, NUM), NUM),)

FUNCTIONS = frozenset(BUILTINS) | frozenset(TOOLS) | {"coalesce"}

ARITH = ("+", "-", "*", "/")
ORDER = ("<", "<=", ">", ">=")
EQUALITY = ("==", "!=")
LOGIC = ("and", "or")


@dataclass(frozen=True)
class Issue:
    code: str  # UnknownVariable, UnknownName, UnknownFunction, ArityMismatch, KindMismatch, NonScalarResult, NoVariableReference
    message: str
    node: Node

    def __str__(self):
        return f"{self.code}: {self.message} [{describe(self.node)}]"


class FeatScriptValidationError(ValueError):
    def __init__(self, issues: list[Issue]):
        super().__init__("; ".join(str(i) for i in issues))
        self.issues = issues

    @property
    def codes(self) -> list[str]:
        return [i.code for i in self.issues]


def _scalar(kind) -> bool:
    return kind in (NUM, BOOL, NA_KIND)


def _accepts(expected: str, kind) -> bool:
    if kind is None:  # already reported upstream
        return True
    if kind == NA_KIND:
        return expected in (NUM, BOOL)
    return kind == expected


def _unify(kinds):
    known = [k for k in kinds if k is not None and k != NA_KIND]
    if not known:
        return NA_KIND if any(k == NA_KIND for k in kinds) else None
    first = known[0]
    return first if all(k == first for k in known) else False


class _Checker:
    def __init__(self, allowed: frozenset[str], schema_names: frozenset[str]):
        self.allowed = allowed
        self.schema_names = schema_names
        self.issues: list[Issue] = []

    def report(self, code: str, message: str, node: Node):
        self.issues.append(Issue(code, message, node))

    def expect(self, expected: str, kind, node: Node, what: str):
        if not _accepts(expected, kind):
            self.report("KindMismatch", f"{what} must be a {expected}, got {kind}", node)

    def kind(self, node: Node, env: dict[str, str]):
        if isinstance(node, Num):
            return NUM
        if isinstance(node, Bool):
            return BOOL
        if isinstance(node, NALit):
            return NA_KIND
        if isinstance(node, Name):
            if node.id not in env:
                self.report("UnknownName", f"{node.id!r} is not bound by an enclosing let", node)
                return None
            return env[node.id]
        if isinstance(node, VarRef):
            self.report("KindMismatch", f"variable name {node.name!r} used outside a tool call", node)
            return None
        if isinstance(node, Let):
            value = self.kind(node.value, env)
            return self.kind(node.body, {**env, node.name: value})
        if isinstance(node, If):
            self.expect(BOOL, self.kind(node.cond, env), node.cond, "if condition")
            branches = (self.kind(node.then, env), self.kind(node.orelse, env))
            kind = _unify(branches)
            if kind is False:
                self.report("KindMismatch", f"if branches disagree: {branches[0]} vs {branches[1]}", node)
                return None
            return kind
        if isinstance(node, UnaryOp):
            operand = self.kind(node.operand, env)
            expected = NUM if node.op == "-" else BOOL
            self.expect(expected, operand, node.operand, f"operand of {node.op!r}")
            return expected
        if isinstance(node, BinOp):
            return self.binop(node, env)
        if isinstance(node, Call):
            return self.call(node, env)
        raise TypeError(f"unexpected node {node!r}")

    def binop(self, node: BinOp, env):
        left, right = self.kind(node.left, env), self.kind(node.right, env)
        if node.op in ARITH or node.op in ORDER:
            self.expect(NUM, left, node.left, f"left operand of {node.op!r}")
            self.expect(NUM, right, node.right, f"right operand of {node.op!r}")
            return NUM if node.op in ARITH else BOOL
        if node.op in LOGIC:
            self.expect(BOOL, left, node.left, f"left operand of {node.op!r}")
            self.expect(BOOL, right, node.right, f"right operand of {node.op!r}")
            return BOOL
        # equality: both scalars of the same kind
        if left == SERIES or right == SERIES or _unify((left, right)) is False:
            self.report("KindMismatch", f"cannot compare {left} with {right}", node)
        return BOOL

    def call(self, node: Call, env):
        name, args = node.func, node.args
        if name in TOOLS:
            return self.tool(node, env)
        if name not in FUNCTIONS:
            self.report("UnknownFunction", f"{name!r} is not a FeatScript builtin", node)
            for a in args:
                self.kind(a, env)
            return None
        kinds = [self.kind(a, env) for a in args]
        if name == "coalesce":
            if len(args) < 2:
                self.report("ArityMismatch", f"coalesce takes at least 2 arguments, got {len(args)}", node)
            for a, k in zip(args, kinds):
                if k == SERIES:
                    self.report("KindMismatch", "coalesce arguments must be scalars", a)
            kind = _unify([k for k in kinds if k != SERIES])
            if kind is False:
                self.report("KindMismatch", "coalesce arguments disagree in kind", node)
                return None
            return kind
        sigs = [s for s in BUILTINS[name] if len(s[0]) == len(args)]
        if not sigs:
            arities = sorted({len(s[0]) for s in BUILTINS[name]})
            self.report("ArityMismatch", f"{name} takes {' or '.join(map(str, arities))} argument(s), got {len(args)}", node)
            return BUILTINS[name][0][1]
        for params, result in sigs:
            if all(_accepts(p, k) for p, k in zip(params, kinds)):
                return result
        params, result = sigs[0]
        for p, k, a in zip(params, kinds, args):
            self.expect(p, k, a, f"argument of {name}")
        return result

    def tool(self, node: Call, env):
        spec = TOOLS[node.func]
        if len(node.args) != len(spec.params):
            self.report("ArityMismatch", f"{node.func} takes {len(spec.params)} argument(s), got {len(node.args)}", node)
        for param, arg in zip(spec.params, node.args):
            if param == "variable":
                if not isinstance(arg, VarRef):
                    self.report("KindMismatch", f"{node.func} expects a variable name", arg)
                elif arg.name not in self.schema_names:
                    self.report("UnknownVariable", f"{arg.name!r} is not a schema variable", arg)
                elif arg.name not in self.allowed:
                    self.report("UnknownVariable", f"{arg.name!r} is not in the allowed variable set", arg)
            else:
                self.expect(NUM, self.kind(arg, env), arg, f"argument of {node.func}")
        for arg in node.args[len(spec.params):]:
            if not isinstance(arg, VarRef):
                self.kind(arg, env)
        return NUM if spec.returns == "number" else SERIES


def check(
    program: Program,
    schema,
    allowed_variables: Iterable[str] | None = None,
    require_variable: bool = False,
) -> list[Issue]:
    """Return all static issues (empty list when the program is valid)."""
    names = frozenset(schema.names if hasattr(schema, "names") else schema)
    allowed = names if allowed_variables is None else frozenset(allowed_variables) & names
    checker = _Checker(allowed, names)
    kind = checker.kind(program.ast, {})
    if kind is not None and not _scalar(kind):
        checker.report("NonScalarResult", f"program result must be a number or NA, got {kind}", program.ast)
    elif kind == BOOL:
        checker.report("NonScalarResult", "program result must be a number or NA, got boolean", program.ast)
    if require_variable and not program.declared_variables:
        checker.report("NoVariableReference", "program does not read any variable", program.ast)
    return checker.issues


def validate(program: Program, schema, allowed_variables=None, require_variable: bool = False) -> None:
    issues = check(program, schema, allowed_variables, require_variable)
    if issues:
        raise FeatScriptValidationError(issues)
