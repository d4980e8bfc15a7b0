"""FeatScript: the sandboxed expression language for generated feature programs."""

from .evaluate import DEFAULT_BUDGET, BudgetExceeded, EvalBudget, FeatScriptRuntimeError, evaluate
from .parser import FeatScriptSyntaxError, Program, parse, pretty_print
from .validate import FeatScriptValidationError, Issue, check, validate

GRAMMAR = """\
program    = expr ;
expr       = "let" IDENT "=" expr "in" expr
           | "if" expr "then" expr "else" expr
           | or_expr ;
or_expr    = and_expr { "or" and_expr } ;
and_expr   = not_expr { "and" not_expr } ;
not_expr   = "not" not_expr | comparison ;
comparison = additive [ ( "<" | "<=" | ">" | ">=" | "==" | "!=" ) additive ] ;
additive   = term { ( "+" | "-" ) term } ;
term       = unary { ( "*" | "/" ) unary } ;
unary      = "-" unary | primary ;
primary    = NUMBER | "true" | "false" | "NA" | IDENT | call | "(" expr ")" ;
call       = TOOL "(" VARIABLE { "," expr } ")" | FUNC "(" [ expr { "," expr } ] ")" ;
VARIABLE   = IDENT | '"' any text '"' ;
(* comments run from "#" to end of line *)
"""

BUILTIN_DOCS = """\
- mean(s), std(s), min(s), max(s), sum(s), first(s), last(s): summaries of a series's values; NA if the series is empty (std uses the population formula, one point gives 0)
- count(s): number of points in a series (0 if empty)
- quantile(s, q): q-th quantile (0 <= q <= 1), linear interpolation between order statistics; NA if empty
- slope(s): least-squares slope of value on time (per hour); NA with fewer than 2 points or all times equal
- times(s): series of observation times; values(s): the series itself
- min(a, b), max(a, b), abs(x), log(x), exp(x): scalar math (log of x <= 0 is an error)
- horizon(): length of the observation window in hours (times run from 0 to horizon())
- is_na(x): true if x is NA; coalesce(x, y, ...): first argument that is not NA
- NA propagates: any arithmetic, comparison, and/or or if-condition involving NA yields NA
"""

GRAMMAR_VERSION = "1"

__all__ = [
    "BUILTIN_DOCS",
    "BudgetExceeded",
    "DEFAULT_BUDGET",
    "EvalBudget",
    "FeatScriptRuntimeError",
    "FeatScriptSyntaxError",
    "FeatScriptValidationError",
    "GRAMMAR",
    "GRAMMAR_VERSION",
    "Issue",
    "Program",
    "check",
    "evaluate",
    "parse",
    "pretty_print",
    "validate",
]
