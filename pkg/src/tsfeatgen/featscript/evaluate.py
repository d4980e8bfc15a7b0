"""Bounded tree-walking evaluator.

Runtime values are ``float``, ``bool``, ``NA`` or :class:`~tsfeatgen.cohort.Series`.
NA is absorbing for every operator; only ``is_na`` and ``coalesce`` remove it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from ..cohort import PatientRecord, Series
from ..tools import NA, TOOL_FUNCS, WindowError
from . import aggregates
from .ast import Bool, BinOp, Call, If, Let, NALit, Name, Node, Num, UnaryOp, VarRef, describe
from .parser import Program


@dataclass(frozen=True)
class EvalBudget:
    max_steps: int = 100_000
    max_series_ops: int = 10_000

    def __post_init__(self):
        if self.max_steps < 1 or self.max_series_ops < 1:
            raise ValueError("budget limits must be positive")


DEFAULT_BUDGET = EvalBudget()


class FeatScriptRuntimeError(RuntimeError):
    def __init__(self, message: str, node: Node | None = None, patient_id: str | None = None):
        super().__init__(message)
        self.reason = message
        self.node = node
        self.patient_id = patient_id

    def __str__(self):
        where = f" [{describe(self.node)}]" if self.node is not None else ""
        who = f" (patient {self.patient_id})" if self.patient_id else ""
        return f"{self.reason}{where}{who}"


class BudgetExceeded(FeatScriptRuntimeError):
    pass


def _finite(x: float, node: Node) -> float:
    if not math.isfinite(x):
        raise FeatScriptRuntimeError("non-finite result", node)
    return x


def _arith(op: str, a: float, b: float, node: Node) -> float:
    if op == "+":
        return _finite(a + b, node)
    if op == "-":
        return _finite(a - b, node)
    if op == "*":
        return _finite(a * b, node)
    if b == 0.0:
        raise FeatScriptRuntimeError("division by zero", node)
    return _finite(a / b, node)


_COMPARE = {
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
    "==": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
}


class _Evaluator:
    def __init__(self, record: PatientRecord, budget: EvalBudget):
        self.record = record
        self.budget = budget
        self.steps = 0
        self.series_ops = 0

    def series_op(self, node: Node):
        self.series_ops += 1
        if self.series_ops > self.budget.max_series_ops:
            raise BudgetExceeded("series-operation budget exhausted", node)

    def eval(self, node: Node, env: dict):
        self.steps += 1
        if self.steps > self.budget.max_steps:
            raise BudgetExceeded("step budget exhausted", node)
        kind = type(node)
        if kind is Num:
            return node.value
        if kind is Call:
            return self.call(node, env)
        if kind is BinOp:
            return self.binop(node, env)
        if kind is Name:
            return env[node.id]
        if kind is Let:
            return self.eval(node.body, {**env, node.name: self.eval(node.value, env)})
        if kind is If:
            cond = self.eval(node.cond, env)
            if cond is NA:
                return NA
            return self.eval(node.then if cond else node.orelse, env)
        if kind is UnaryOp:
            x = self.eval(node.operand, env)
            if x is NA:
                return NA
            return -x if node.op == "-" else not x
        if kind is Bool:
            return node.value
        if kind is NALit:
            return NA
        raise FeatScriptRuntimeError(f"cannot evaluate {kind.__name__}", node)

    def binop(self, node: BinOp, env: dict):
        a = self.eval(node.left, env)
        b = self.eval(node.right, env)
        if a is NA or b is NA:
            return NA
        op = node.op
        if op in ("+", "-", "*", "/"):
            return _arith(op, a, b, node)
        if op == "and":
            return a and b
        if op == "or":
            return a or b
        return _COMPARE[op](a, b)

    def call(self, node: Call, env: dict):
        name, args = node.func, node.args
        if name in TOOL_FUNCS:
            self.series_op(node)
            var = args[0].name if isinstance(args[0], VarRef) else None
            rest = [self.eval(a, env) for a in args[1:]]
            if any(x is NA for x in rest):
                return NA
            try:
                return TOOL_FUNCS[name](self.record, var, *rest)
            except WindowError as exc:
                raise FeatScriptRuntimeError(str(exc), node) from None
        if name == "coalesce":
            for a in args:
                x = self.eval(a, env)
                if x is not NA:
                    return x
            return NA
        if name == "horizon":
            return float(self.record.horizon)
        values = [self.eval(a, env) for a in args]
        if name == "is_na":
            return values[0] is NA
        if any(x is NA for x in values):
            return NA
        if isinstance(values[0], Series):
            self.series_op(node)
            s = values[0]
            if name in aggregates.SERIES_AGGREGATIONS:
                return aggregates.SERIES_AGGREGATIONS[name](s)
            if name == "quantile":
                try:
                    return aggregates.quantile(s, values[1])
                except aggregates.AggregationError as exc:
                    raise FeatScriptRuntimeError(str(exc), node) from None
            if name == "times":
                return aggregates.times(s)
            if name == "values":
                return aggregates.values(s)
        if name == "min":
            return min(values)
        if name == "max":
            return max(values)
        if name == "abs":
            return abs(values[0])
        if name == "exp":
            try:
                return _finite(math.exp(values[0]), node)
            except OverflowError:
                raise FeatScriptRuntimeError("non-finite result", node) from None
        if name == "log":
            if values[0] <= 0:
                raise FeatScriptRuntimeError("log of a nonpositive number", node)
            return math.log(values[0])
        raise FeatScriptRuntimeError(f"unknown function {name!r}", node)


def evaluate(program: Program | Node, record: PatientRecord, budget: EvalBudget = DEFAULT_BUDGET):
    """Evaluate a validated program on one record; returns a float or ``NA``.

    Raises FeatScriptRuntimeError (carrying the node and patient id) for
    division by zero, invalid windows, log of nonpositive values, non-finite
    results, or budget exhaustion.
    """
    node = program.ast if isinstance(program, Program) else program
    try:
        result = _Evaluator(record, budget).eval(node, {})
    except FeatScriptRuntimeError as exc:
        exc.patient_id = record.patient_id
        raise
    except RecursionError:
        raise BudgetExceeded("evaluation nested too deeply", node, record.patient_id) from None
    if isinstance(result, bool) or isinstance(result, Series):
        raise FeatScriptRuntimeError("program did not produce a number", node, record.patient_id)
    return result
