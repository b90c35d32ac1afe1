"""Model-formula mini-language.

Grammar (whitespace-insensitive)::

    formula  := IDENT [ "|" trunc ] "~" term ("+" term)*
    trunc    := "trunc" "(" bound ["," bound] ")"
    bound    := ("lb" | "ub") "=" REAL
    term     := IDENT | "1" | "0" | "(" slopes "|" IDENT ")"
    slopes   := "1" | ["1" "+"] IDENT ("+" IDENT)*

A varying term ``(Z|g)`` carries a varying intercept *and* a varying slope on
``Z`` for every level of ``g``; ``(1|g)`` is intercept-only. ``0`` drops the
constant intercept.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

__all__ = [
    "FormulaError",
    "FormulaSyntaxError",
    "ModelSpec",
    "VaryingTerm",
    "parse_formula",
    "render_formula",
]

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_REAL = re.compile(r"[+-]?(?:inf|Inf|(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)")


class FormulaError(ValueError):
    """Semantically invalid formula (duplicate terms, bad bounds, ...)."""


class FormulaSyntaxError(FormulaError):
    def __init__(self, message, offset):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


@dataclass(frozen=True)
class VaryingTerm:
    """Group-indexed effects: an intercept plus one slope per entry in ``slopes``."""

    slopes: tuple[str, ...]
    group: str

    def __post_init__(self):
        object.__setattr__(self, "slopes", tuple(self.slopes))

    @property
    def coef_names(self):
        return ("Intercept",) + self.slopes


@dataclass(frozen=True)
class ModelSpec:
    outcome: str
    fixed_terms: tuple[str, ...] = ()
    varying_terms: tuple[VaryingTerm, ...] = ()
    truncation: tuple[float, float] | None = None
    intercept: bool = True

    def __post_init__(self):
        object.__setattr__(self, "fixed_terms", tuple(self.fixed_terms))
        object.__setattr__(self, "varying_terms", tuple(
            t if isinstance(t, VaryingTerm) else VaryingTerm(tuple(t[0]), t[1])
            for t in self.varying_terms))
        if self.truncation is not None:
            lb, ub = (float(b) for b in self.truncation)
            if math.isnan(lb) or math.isnan(ub) or not lb < ub:
                raise FormulaError(f"truncation requires lb < ub, got lb={lb}, ub={ub}")
            unbounded = math.isinf(lb) and math.isinf(ub)
            object.__setattr__(self, "truncation", None if unbounded else (lb, ub))
        if len(set(self.fixed_terms)) != len(self.fixed_terms):
            dup = _first_duplicate(self.fixed_terms)
            raise FormulaError(f"duplicate constant-effect term {dup!r}")
        groups = [t.group for t in self.varying_terms]
        if len(set(groups)) != len(groups):
            raise FormulaError(f"duplicate varying term for group {_first_duplicate(groups)!r}")
        for t in self.varying_terms:
            if len(set(t.slopes)) != len(t.slopes):
                raise FormulaError(f"duplicate slope {_first_duplicate(t.slopes)!r} in ({t.group})")
        if self.outcome in self.predictors:
            raise FormulaError(f"outcome {self.outcome!r} also appears as a predictor")
        if not self.intercept and not self.fixed_terms and not self.varying_terms:
            raise FormulaError("model has no terms")

    @property
    def predictors(self):
        """All predictor columns in first-use order (fixed, slopes, groups)."""
        seen = list(self.fixed_terms)
        for t in self.varying_terms:
            seen.extend(t.slopes)
            seen.append(t.group)
        return tuple(dict.fromkeys(seen))

    @property
    def groups(self):
        return tuple(t.group for t in self.varying_terms)

    @property
    def bounds(self):
        """(lb, ub) with infinities standing in for missing bounds."""
        return self.truncation if self.truncation is not None else (-math.inf, math.inf)

    def __str__(self):
        return render_formula(self)


def _first_duplicate(items):
    seen = set()
    for x in items:
        if x in seen:
            return x
        seen.add(x)
    return None


# -- tokenizer ---------------------------------------------------------------

@dataclass
class _Tok:
    kind: str  # ident, num, sym, end
    text: str
    offset: int


def _tokenize(text):
    toks = []
    i = 0
    byte = 0
    n = len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            byte += len(c.encode())
            i += 1
            continue
        if c in "|~+(),=":
            toks.append(_Tok("sym", c, byte))
            i += 1
            byte += 1
            continue
        m = _IDENT.match(text, i)
        if m and m.group() not in ("inf", "Inf"):
            toks.append(_Tok("ident", m.group(), byte))
        else:
            m = _REAL.match(text, i)
            if not m:
                raise FormulaSyntaxError(f"unexpected character {c!r}", byte)
            toks.append(_Tok("num", m.group(), byte))
        byte += len(m.group().encode())
        i = m.end()
    toks.append(_Tok("end", "", byte))
    return toks


class _Parser:
    def __init__(self, text):
        self.toks = _tokenize(text)
        self.pos = 0

    @property
    def cur(self):
        return self.toks[self.pos]

    def advance(self):
        tok = self.cur
        self.pos += 1
        return tok

    def expect(self, kind, text=None):
        tok = self.cur
        if tok.kind != kind or (text is not None and tok.text != text):
            want = repr(text) if text is not None else kind
            got = repr(tok.text) if tok.kind != "end" else "end of input"
            raise FormulaSyntaxError(f"expected {want}, found {got}", tok.offset)
        return self.advance()

    def at(self, kind, text=None):
        return self.cur.kind == kind and (text is None or self.cur.text == text)

    def parse(self):
        outcome = self.expect("ident").text
        truncation = None
        if self.at("sym", "|"):
            self.advance()
            truncation = self.parse_trunc()
        self.expect("sym", "~")
        intercept = None
        fixed, varying = [], []
        while True:
            start = self.cur.offset
            if self.at("num"):
                tok = self.advance()
                if tok.text not in ("0", "1"):
                    raise FormulaSyntaxError(f"numeric term {tok.text!r} not allowed", tok.offset)
                flag = tok.text == "1"
                if intercept is not None and intercept != flag:
                    raise FormulaError("formula both includes and removes the intercept")
                intercept = flag
            elif self.at("ident"):
                fixed.append(self.advance().text)
            elif self.at("sym", "("):
                varying.append(self.parse_varying())
            else:
                tok = self.cur
                got = repr(tok.text) if tok.kind != "end" else "end of input"
                raise FormulaSyntaxError(f"expected a term, found {got}", start)
            if self.at("sym", "+"):
                self.advance()
                continue
            break
        self.expect("end")
        return ModelSpec(
            outcome=outcome,
            fixed_terms=tuple(fixed),
            varying_terms=tuple(varying),
            truncation=truncation,
            intercept=True if intercept is None else intercept,
        )

    def parse_trunc(self):
        tok = self.expect("ident")
        if tok.text != "trunc":
            raise FormulaSyntaxError(f"expected 'trunc', found {tok.text!r}", tok.offset)
        self.expect("sym", "(")
        bounds = {}
        while True:
            name = self.expect("ident")
            if name.text not in ("lb", "ub"):
                raise FormulaSyntaxError(f"unknown trunc argument {name.text!r}", name.offset)
            if name.text in bounds:
                raise FormulaSyntaxError(f"repeated trunc argument {name.text!r}", name.offset)
            self.expect("sym", "=")
            val = self.expect("num")
            bounds[name.text] = float(val.text)
            if self.at("sym", ","):
                self.advance()
                continue
            break
        self.expect("sym", ")")
        lb = bounds.get("lb", -math.inf)
        ub = bounds.get("ub", math.inf)
        if not lb < ub:
            raise FormulaError(f"truncation requires lb < ub, got lb={lb:g}, ub={ub:g}")
        return None if math.isinf(lb) and math.isinf(ub) else (lb, ub)

    def parse_varying(self):
        self.expect("sym", "(")
        slopes = []
        if self.at("num"):
            tok = self.advance()
            if tok.text != "1":
                raise FormulaSyntaxError(f"expected '1' or a column, found {tok.text!r}", tok.offset)
            if self.at("sym", "+"):
                self.advance()
                slopes.append(self.expect("ident").text)
        else:
            slopes.append(self.expect("ident").text)
        while self.at("sym", "+"):
            self.advance()
            slopes.append(self.expect("ident").text)
        self.expect("sym", "|")
        group = self.expect("ident").text
        self.expect("sym", ")")
        return VaryingTerm(tuple(slopes), group)


def parse_formula(text):
    """Parse a formula string into a :class:`ModelSpec`.

    >>> s = parse_formula("O | trunc(lb=10, ub=50) ~ female + (1|age_group)")
    >>> s.truncation, s.fixed_terms, s.varying_terms[0].group
    ((10.0, 50.0), ('female',), 'age_group')
    """
    if not isinstance(text, str) or not text.strip():
        raise FormulaSyntaxError("empty formula", 0)
    return _Parser(text).parse()


def _fmt_bound(x):
    return repr(int(x)) if float(x).is_integer() else repr(float(x))


def render_formula(spec):
    """Canonical string for ``spec``; constant terms precede varying terms."""
    lhs = spec.outcome
    if spec.truncation is not None:
        lb, ub = spec.truncation
        args = []
        if math.isfinite(lb):
            args.append(f"lb={_fmt_bound(lb)}")
        if math.isfinite(ub):
            args.append(f"ub={_fmt_bound(ub)}")
        lhs += f" | trunc({', '.join(args)})"
    terms = []
    if not spec.intercept:
        terms.append("0")
    terms.extend(spec.fixed_terms)
    for t in spec.varying_terms:
        terms.append(f"({' + '.join(t.slopes) if t.slopes else '1'}|{t.group})")
    if not terms:
        terms.append("1")
    return f"{lhs} ~ {' + '.join(terms)}"
