"""Exact symbolic expression core.

Immutable expression trees over phase-space symbols: exact rationals, named
constants, parameters, field atoms with derivative multi-indices, momentum
atoms, Kronecker deltas, gamma-function factors, powers whose exponents are
affine in the complex order ``s`` (and the spacetime dimension ``d``), and
logarithms.  All construction goes through the ``mk_*`` builders, which return
canonical forms; ``simplify`` re-canonicalizes arbitrary trees bottom-up and
is idempotent.

Conventions baked into canonicalization:

* sums and products are flattened and sorted by a total node ordering,
  with like terms / like bases collected;
* a spacetime index appearing twice in a product term is an implicit
  Euclidean contraction (``V_mu V_mu`` is the gradient square); dummy
  indices are renamed to ``i0, i1, ...`` canonically;
* repeated indices inside a single field atom contract to a Laplacian
  marker;
* quotients of gamma functions whose arguments differ by integers are
  normalized to rising-factorial polynomials times one residual gamma
  factor per congruence class;
* gamma functions of constant integer or half-integer arguments fold to
  exact values (rationals, possibly times ``sqrt(pi)``);
* rational bases raised to symbolic exponents are split into prime powers
  so that e.g. ``4**(d/2)`` and ``2**d`` coincide.

Everything here is a pure function of immutable values; expressions are
hashable and safe to share between threads.
"""

from __future__ import annotations

import itertools
import json
import math
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Union

__all__ = [
    "ExprError", "UnboundSymbol", "GammaPole", "InconsistentSubstitution",
    "LinExp", "Expr", "Rat", "Cst", "Par", "Spectral", "Fld", "PComp", "PSq",
    "Delta", "Gam", "LogE", "Pow", "Sum", "Prod",
    "rational", "pi", "euler_e", "imag_i", "param", "lam", "field",
    "p_comp", "p_sq", "delta", "gamma_fn", "log_e", "mk_sum", "mk_prod",
    "mk_pow", "sin_pi_s_over_pi",
    "ZERO", "ONE", "TWO", "PI", "E_CONST", "I_UNIT", "S", "D", "HBAR", "MU", "EPS",
    "simplify", "diff", "diff_p", "diff_s", "eval_numeric", "substitute",
    "subs_param", "render", "parse_json", "free_index_names", "atoms_of",
]

Q = Fraction
QLike = Union[int, Fraction]

_DUMMY_RE = re.compile(r"^i\d+$")


class ExprError(Exception):
    """Base class for expression-level errors."""


class UnboundSymbol(ExprError):
    """A free symbol had no numeric binding."""


class GammaPole(ExprError):
    """Gamma function evaluated at a non-positive integer."""


class InconsistentSubstitution(ExprError):
    """A derivative atom cannot be generated from the replacement."""


# ---------------------------------------------------------------------------
# exponents affine in s and d


@dataclass(frozen=True)
class LinExp:
    """Exponent (or gamma argument) of the form const + s_coeff*s + d_coeff*d."""

    const: Fraction = Q(0)
    s: Fraction = Q(0)
    d: Fraction = Q(0)

    @staticmethod
    def of(x: "LinExp | QLike") -> "LinExp":
        if isinstance(x, LinExp):
            return x
        return LinExp(Q(x))

    def __add__(self, other: "LinExp | QLike") -> "LinExp":
        o = LinExp.of(other)
        return LinExp(self.const + o.const, self.s + o.s, self.d + o.d)

    def __sub__(self, other: "LinExp | QLike") -> "LinExp":
        o = LinExp.of(other)
        return LinExp(self.const - o.const, self.s - o.s, self.d - o.d)

    def __neg__(self) -> "LinExp":
        return LinExp(-self.const, -self.s, -self.d)

    def scale(self, k: QLike) -> "LinExp":
        k = Q(k)
        return LinExp(self.const * k, self.s * k, self.d * k)

    def times(self, other: "LinExp") -> "LinExp":
        """Product of two affine exponents; defined only if one is constant."""
        if other.is_const():
            return self.scale(other.const)
        if self.is_const():
            return other.scale(self.const)
        raise ExprError("exponent product is not affine in (s, d)")

    def is_const(self) -> bool:
        return self.s == 0 and self.d == 0

    def is_zero(self) -> bool:
        return self.is_const() and self.const == 0

    def is_integer(self) -> bool:
        return self.is_const() and self.const.denominator == 1

    def subs(self, s: "QLike | None" = None, d: "QLike | None" = None) -> "LinExp":
        c, sc, dc = self.const, self.s, self.d
        if s is not None:
            c, sc = c + sc * Q(s), Q(0)
        if d is not None:
            c, dc = c + dc * Q(d), Q(0)
        return LinExp(c, sc, dc)

    def eval(self, s: complex, d: complex) -> complex:
        return complex(self.const) + complex(self.s) * s + complex(self.d) * d

    def key(self) -> tuple:
        return (self.const, self.s, self.d)

    def __str__(self) -> str:
        def piece(c: Fraction, sym: str) -> str:
            if c == 1:
                return sym
            if c == -1:
                return "-" + sym
            if c.denominator == 1:
                return "%s%s" % (c, sym)
            return "%s%s/%s" % (c.numerator if c.numerator != 1 else "",
                                sym, c.denominator)
        parts = []
        if self.const or (not self.s and not self.d):
            parts.append(str(self.const))
        if self.s:
            parts.append(piece(self.s, "s"))
        if self.d:
            parts.append(piece(self.d, "d"))
        out = parts[0]
        for p in parts[1:]:
            out += p if p.startswith("-") else "+" + p
        return out


LIN_ZERO = LinExp()
LIN_ONE = LinExp(Q(1))
LIN_S = LinExp(Q(0), Q(1))
LIN_D = LinExp(Q(0), Q(0), Q(1))


# ---------------------------------------------------------------------------
# node classes

_RANK = {}


def _node(rank):
    def deco(cls):
        _RANK[cls] = rank
        return cls
    return deco


@dataclass(frozen=True)
class Expr:
    def __add__(self, other):
        return mk_sum([self, to_expr(other)])

    __radd__ = __add__

    def __neg__(self):
        return mk_prod([Rat(Q(-1)), self])

    def __sub__(self, other):
        return mk_sum([self, -to_expr(other)])

    def __rsub__(self, other):
        return mk_sum([to_expr(other), -self])

    def __mul__(self, other):
        return mk_prod([self, to_expr(other)])

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mk_prod([self, mk_pow(to_expr(other), LinExp(Q(-1)))])

    def __rtruediv__(self, other):
        return mk_prod([to_expr(other), mk_pow(self, LinExp(Q(-1)))])

    def __pow__(self, e):
        return mk_pow(self, LinExp.of(e) if not isinstance(e, LinExp) else e)

    def __str__(self):
        return render(self, "text")


@_node(0)
@dataclass(frozen=True)
class Rat(Expr):
    value: Fraction


@_node(1)
@dataclass(frozen=True)
class Cst(Expr):
    name: str  # "pi", "e", "i"


@_node(2)
@dataclass(frozen=True)
class Par(Expr):
    name: str  # s, d, hbar, mu, eps, t, couplings ...


@_node(3)
@dataclass(frozen=True)
class Spectral(Expr):
    """The semigroup integration variable."""


@_node(4)
@dataclass(frozen=True)
class Fld(Expr):
    name: str
    idx: tuple = ()
    lap: int = 0


@_node(5)
@dataclass(frozen=True)
class PComp(Expr):
    idx: str


@_node(6)
@dataclass(frozen=True)
class PSq(Expr):
    pass


@_node(7)
@dataclass(frozen=True)
class Delta(Expr):
    i: str
    j: str


@_node(8)
@dataclass(frozen=True)
class Gam(Expr):
    arg: LinExp


@_node(9)
@dataclass(frozen=True)
class LogE(Expr):
    arg: Expr


@_node(10)
@dataclass(frozen=True)
class Pow(Expr):
    base: Expr
    exp: LinExp


@_node(11)
@dataclass(frozen=True)
class Sum(Expr):
    terms: tuple


@_node(12)
@dataclass(frozen=True)
class Prod(Expr):
    factors: tuple


ZERO = Rat(Q(0))
ONE = Rat(Q(1))
TWO = Rat(Q(2))
PI = Cst("pi")
E_CONST = Cst("e")
I_UNIT = Cst("i")
S = Par("s")
D = Par("d")
HBAR = Par("hbar")
MU = Par("mu")
EPS = Par("eps")


def to_expr(x) -> Expr:
    if isinstance(x, Expr):
        return x
    if isinstance(x, (int, Fraction)):
        return Rat(Q(x))
    raise TypeError("cannot coerce %r to Expr" % (x,))


# ---------------------------------------------------------------------------
# total ordering


def key(e: Expr) -> tuple:
    r = _RANK[type(e)]
    if isinstance(e, Rat):
        return (r, e.value)
    if isinstance(e, Cst):
        return (r, e.name)
    if isinstance(e, Par):
        return (r, e.name)
    if isinstance(e, Spectral):
        return (r,)
    if isinstance(e, Fld):
        return (r, e.name, len(e.idx), e.idx, e.lap)
    if isinstance(e, PComp):
        return (r, e.idx)
    if isinstance(e, PSq):
        return (r,)
    if isinstance(e, Delta):
        return (r, e.i, e.j)
    if isinstance(e, Gam):
        return (r, e.arg.key())
    if isinstance(e, LogE):
        return (r, key(e.arg))
    if isinstance(e, Pow):
        return (r, key(e.base), e.exp.key())
    if isinstance(e, Sum):
        return (r, tuple(key(t) for t in e.terms))
    if isinstance(e, Prod):
        return (r, tuple(key(f) for f in e.factors))
    raise TypeError(type(e))


# ---------------------------------------------------------------------------
# index bookkeeping


def _atom_indices(e: Expr, mult: int = 1) -> list:
    """Index occurrences of one factor (with multiplicity)."""
    if isinstance(e, Fld):
        return list(e.idx) * mult
    if isinstance(e, PComp):
        return [e.idx] * mult
    if isinstance(e, Delta):
        return [e.i, e.j] * mult
    if isinstance(e, Pow):
        n = e.exp
        if n.is_integer():
            return _atom_indices(e.base, mult * abs(int(n.const)) or mult)
        return _atom_indices(e.base, mult)
    if isinstance(e, (Sum, Prod, LogE)):
        out = []
        kids = e.terms if isinstance(e, Sum) else (e.factors if isinstance(e, Prod) else (e.arg,))
        for k in kids:
            out.extend(_atom_indices(k, mult))
        return out
    return []


def index_counts(e: Expr) -> dict:
    c: dict = {}
    for i in _atom_indices(e):
        c[i] = c.get(i, 0) + 1
    return c


def free_index_names(e: Expr) -> set:
    return {i for i, n in index_counts(e).items() if n == 1}


def rename_indices(e: Expr, mapping: Mapping[str, str]) -> Expr:
    """Rename indices without re-simplifying composite structure."""
    if isinstance(e, Fld):
        return mk_field(e.name, tuple(mapping.get(i, i) for i in e.idx), e.lap)
    if isinstance(e, PComp):
        return PComp(mapping.get(e.idx, e.idx))
    if isinstance(e, Delta):
        return mk_delta(mapping.get(e.i, e.i), mapping.get(e.j, e.j))
    if isinstance(e, Pow):
        return Pow(rename_indices(e.base, mapping), e.exp)
    if isinstance(e, Sum):
        return Sum(tuple(rename_indices(t, mapping) for t in e.terms))
    if isinstance(e, Prod):
        return Prod(tuple(rename_indices(f, mapping) for f in e.factors))
    if isinstance(e, LogE):
        return LogE(rename_indices(e.arg, mapping))
    return e


# ---------------------------------------------------------------------------
# constructors


def rational(x: QLike) -> Expr:
    return Rat(Q(x))


def pi() -> Expr:
    return PI


def euler_e() -> Expr:
    return E_CONST


def imag_i() -> Expr:
    return I_UNIT


def param(name: str) -> Expr:
    return Par(name)


def lam() -> Expr:
    return Spectral()


def mk_field(name: str, idx: Iterable[str] = (), lap: int = 0) -> Fld:
    ids = sorted(idx)
    # repeated pairs inside one atom contract to Laplacian markers
    out = []
    k = 0
    i = 0
    while i < len(ids):
        if i + 1 < len(ids) and ids[i] == ids[i + 1]:
            k += 1
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return Fld(name, tuple(out), lap + k)


def field(name: str, idx: Iterable[str] = (), lap: int = 0) -> Expr:
    return mk_field(name, idx, lap)


def p_comp(idx: str) -> Expr:
    return PComp(idx)


def p_sq() -> Expr:
    return PSq()


def mk_delta(i: str, j: str) -> Expr:
    if i == j:
        return D
    return Delta(*sorted((i, j)))


def delta(i: str, j: str) -> Expr:
    return mk_delta(i, j)


_HALF = Q(1, 2)


def _gamma_exact(c: Fraction):
    """Gamma at an exact rational.  Returns (rational, sqrt_pi_power) or None.

    Supports positive integers and all half-odd integers; raises GammaPole at
    non-positive integers.
    """
    if c.denominator == 1:
        n = int(c)
        if n <= 0:
            raise GammaPole("gamma pole at %s" % c)
        v = Q(1)
        for k in range(2, n):
            v *= k
        return (v, 0)
    if c.denominator == 2:
        # walk from Gamma(1/2) = sqrt(pi)
        v = Q(1)
        x = Q(1, 2)
        if c >= x:
            while x < c:
                v *= x
                x += 1
        else:
            while x > c:
                x -= 1
                v /= x
        return (v, 1)
    return None


def gamma_fn(arg: LinExp | QLike) -> Expr:
    a = LinExp.of(arg)
    if a.is_const():
        ex = _gamma_exact(a.const)
        if ex is not None:
            r, half = ex
            if half:
                return mk_prod([Rat(r), Pow(PI, LinExp(_HALF))])
            return Rat(r)
    return Gam(a)


def log_e(arg) -> Expr:
    a = to_expr(arg)
    if a == ONE:
        return ZERO
    if isinstance(a, Pow) and a.base == E_CONST and a.exp.is_const():
        return Rat(a.exp.const)
    if a == E_CONST:
        return ONE
    return LogE(a)


def sin_pi_s_over_pi() -> Expr:
    """The semigroup prefactor, stored as 1/(Gamma(s) Gamma(1-s))."""
    return mk_prod([
        mk_pow(Gam(LIN_S), LinExp(Q(-1))),
        mk_pow(Gam(LinExp(Q(1), Q(-1))), LinExp(Q(-1))),
    ])


# ---------------------------------------------------------------------------
# canonical sum


def _term_split(t: Expr) -> tuple:
    """Decompose a canonical term into (rational coeff, key part)."""
    if isinstance(t, Rat):
        return t.value, ONE
    if isinstance(t, Prod) and isinstance(t.factors[0], Rat):
        rest = t.factors[1:]
        core = rest[0] if len(rest) == 1 else Prod(rest)
        return t.factors[0].value, core
    return Q(1), t


def _term_join(c: Fraction, core: Expr) -> Expr:
    if c == 0:
        return ZERO
    if core == ONE:
        return Rat(c)
    if c == 1:
        return core
    if isinstance(core, Prod):
        return Prod((Rat(c),) + core.factors)
    return Prod((Rat(c), core))


def mk_sum(terms: Iterable[Expr]) -> Expr:
    flat: list = []
    for t in terms:
        t = to_expr(t)
        if isinstance(t, Sum):
            flat.extend(t.terms)
        else:
            flat.append(t)
    acc: dict = {}
    order: dict = {}
    for t in flat:
        c, core = _term_split(t)
        k = key(core)
        if k in acc:
            acc[k] = (acc[k][0] + c, core)
        else:
            acc[k] = (c, core)
            order[k] = True
    items = [(c, core) for (c, core) in acc.values() if c != 0]
    if not items:
        return ZERO
    items.sort(key=lambda p: key(p[1]))
    # pull out rational content so that 2V + 2W == 2*(V+W) canonically;
    # the sign follows the highest-ordered term, keeping (s - 4) positive-led
    if len(items) == 1:
        return _term_join(*items[0])
    content = items[0][0]
    for c, _ in items[1:]:
        content = _gcd_frac(content, c)
    if items[-1][0] < 0:
        content = -content
    if content != 1:
        inner = Sum(tuple(_term_join(c / content, core) for c, core in items))
        return _term_join(content, inner)
    return Sum(tuple(_term_join(c, core) for c, core in items))


def _gcd_frac(a: Fraction, b: Fraction) -> Fraction:
    a, b = abs(a), abs(b)
    num = math.gcd(a.numerator, b.numerator)
    den = math.lcm(a.denominator, b.denominator)
    return Q(num, den)


# ---------------------------------------------------------------------------
# canonical product

def _prime_factors(n: int) -> dict:
    out: dict = {}
    d_ = 2
    while d_ * d_ <= n:
        while n % d_ == 0:
            out[d_] = out.get(d_, 0) + 1
            n //= d_
        d_ += 1
    if n > 1:
        out[n] = out.get(n, 0) + 1
    return out


def _rat_pow_exact(r: Fraction, e: LinExp):
    """r**e for rational r.  Integer e folds; otherwise prime-split.

    Returns (rational multiplier, list of (prime rational base, LinExp)).
    The prime entries must go straight into the power map (no re-dispatch),
    since a prime base with symbolic exponent is already in normal form.
    """
    if r == 1:
        return Q(1), []
    if r == 0:
        if e.is_const() and e.const > 0:
            return Q(0), []
        raise ExprError("0 raised to a non-positive power")
    if e.is_integer():
        return r ** int(e.const), []
    if r < 0:
        raise ExprError("negative rational base with non-integer exponent")
    extra: dict = {}
    for p_, k in _prime_factors(r.numerator).items():
        extra[p_] = extra.get(p_, LIN_ZERO) + e.scale(k)
    for p_, k in _prime_factors(r.denominator).items():
        extra[p_] = extra.get(p_, LIN_ZERO) - e.scale(k)
    out = []
    mult = Q(1)
    for p_, ee in sorted(extra.items()):
        if ee.is_zero():
            continue
        if ee.is_integer():
            mult *= Q(p_) ** int(ee.const)
        else:
            out.append((Rat(Q(p_)), ee))
    return mult, out


def _as_base_exp(f: Expr) -> tuple:
    if isinstance(f, Pow):
        return f.base, f.exp
    return f, LIN_ONE


def _expand_indexed_power(base: Expr, n: int, used: set) -> list:
    """Positive integer power of an indexed composite: relabeled copies."""
    dummies = sorted({i for i, c in index_counts(base).items() if c == 2})
    copies = []
    ctr = 0
    for _ in range(n):
        mapping = {}
        for d_ in dummies:
            while ("q%dq" % ctr) in used:
                ctr += 1
            mapping[d_] = "q%dq" % ctr
            used.add(mapping[d_])
            ctr += 1
        copies.append(rename_indices(base, mapping))
    return copies


def mk_prod(factors: Iterable[Expr]) -> Expr:
    coeff = Q(1)
    powmap: dict = {}   # key(base) -> [base, LinExp]
    i_exp = 0           # accumulated integer power of the imaginary unit

    def push(base: Expr, exp: LinExp):
        nonlocal coeff, i_exp
        if exp.is_zero():
            return
        if isinstance(base, Rat):
            mult, extra = _rat_pow_exact(base.value, exp)
            coeff *= mult
            for b2, e2 in extra:
                k2 = key(b2)
                if k2 in powmap:
                    powmap[k2][1] = powmap[k2][1] + e2
                else:
                    powmap[k2] = [b2, e2]
            return
        if isinstance(base, Cst) and base.name == "i":
            if not exp.is_integer():
                raise ExprError("imaginary unit with non-integer power")
            i_exp += int(exp.const)
            return
        if isinstance(base, Pow):
            push(base.base, base.exp.times(exp))
            return
        if isinstance(base, Prod):
            if exp.is_integer():
                n = int(exp.const)
                if n >= 0 and index_counts(base):
                    used = set(index_counts(base))
                    for cp in _expand_indexed_power(base, n, used):
                        push(cp, LIN_ONE)
                    return
                for f in base.factors:
                    push(f, exp)
                return
            # symbolic exponent: distribute (positive-valued factors assumed)
            for f in base.factors:
                push(f, exp)
            return
        k = key(base)
        if k in powmap:
            powmap[k][1] = powmap[k][1] + exp
        else:
            powmap[k] = [base, exp]

    stack = [to_expr(f) for f in factors]
    for f in stack:
        if isinstance(f, Prod):
            for g in f.factors:
                push(*_as_base_exp(g))
        else:
            push(*_as_base_exp(f))

    if coeff == 0:
        return ZERO

    # imaginary unit folding
    i_exp %= 4
    if i_exp == 2:
        coeff = -coeff
    elif i_exp == 3:
        coeff = -coeff

    # gamma-ratio normalization: rewrite quotients with integer-spaced
    # arguments as rising factorials, re-dispatching emitted factors
    gkeys = [k for k, (b, e) in powmap.items() if isinstance(b, Gam)]
    if len(gkeys) >= 2:
        gammas = [tuple(powmap.pop(k)) for k in gkeys]
        for factor, fexp in _gamma_rewrite(gammas):
            if isinstance(factor, Prod):
                for f in factor.factors:
                    b2, e2 = _as_base_exp(f)
                    push(b2, e2.times(fexp))
            else:
                push(factor, fexp)

    entries = [(b, e) for b, e in powmap.values() if not e.is_zero()]

    # delta contraction + momentum squares
    entries, cmul = _contract_indices(entries)
    coeff *= cmul
    if coeff == 0:
        return ZERO

    # canonical dummy renaming
    entries = _canonical_dummies(entries)

    out = []
    for b, e in sorted(entries, key=lambda p: (key(p[0]), p[1].key())):
        if e.is_zero():
            continue
        if isinstance(b, Rat) and e.is_integer():
            coeff *= b.value ** int(e.const)
            continue
        if e == LIN_ONE:
            out.append(b)
        else:
            out.append(Pow(b, e))
    if coeff == 0:
        return ZERO
    if i_exp in (1, 3):
        out.insert(0, I_UNIT)
    if not out:
        return Rat(coeff)
    if coeff != 1:
        out.insert(0, Rat(coeff))
    if len(out) == 1:
        return out[0]
    return Prod(tuple(out))


def _gamma_rewrite(gammas: list) -> list:
    """Gamma(a+n)/Gamma(a) quotients as rising factorials plus residuals.

    ``gammas`` is a list of (Gam, LinExp exponent); returns (Expr, LinExp)
    replacement factors.
    """
    groups: dict = {}
    for b, e in gammas:
        a = b.arg
        groups.setdefault((a.s, a.d), []).append((a, e))
    out: list = []
    for members in groups.values():
        subs: dict = {}
        for a, e in members:
            floor = a.const.numerator // a.const.denominator
            subs.setdefault(a.const - floor, []).append((a, e))
        for mems in subs.values():
            mems.sort(key=lambda p: p[0].const)
            base_arg = mems[0][0]
            net_exp = LIN_ZERO
            for a, e in mems:
                n = int(a.const - base_arg.const)
                # Gamma(base + n) = Gamma(base) * prod_{j<n} (base + j)
                for j in range(n):
                    out.append((linexp_expr(base_arg + j), e))
                net_exp = net_exp + e
            if not net_exp.is_zero():
                out.append((gamma_fn(base_arg), net_exp))
    return out


def linexp_expr(a: LinExp) -> Expr:
    """Affine form as a plain expression (for rising-factorial factors)."""
    terms = []
    if a.const:
        terms.append(Rat(a.const))
    if a.s:
        terms.append(mk_prod([Rat(a.s), S]))
    if a.d:
        terms.append(mk_prod([Rat(a.d), D]))
    return mk_sum(terms) if terms else ZERO


def _contract_indices(entries: list) -> tuple:
    """Kronecker contractions and momentum-square folding inside a product."""
    coeff = Q(1)

    def merge(es: list) -> list:
        m: dict = {}
        for b, e in es:
            k = key(b)
            if k in m:
                m[k][1] = m[k][1] + e
            else:
                m[k] = [b, e]
        return [(b, e) for b, e in m.values() if not e.is_zero()]

    changed = True
    while changed:
        changed = False
        entries = merge(entries)
        counts: dict = {}
        for b, e in entries:
            m = abs(int(e.const)) if e.is_integer() else 1
            for i in _atom_indices(b, m if m else 1):
                counts[i] = counts.get(i, 0) + 1

        for n_, (b, e) in enumerate(entries):
            if isinstance(b, Delta) and e.is_integer() and int(e.const) == 2:
                # delta(i,j)*delta(i,j) = delta(i,i) = d, if fully self-paired
                if counts.get(b.i, 0) == 2 and counts.get(b.j, 0) == 2:
                    entries[n_] = (D, LIN_ONE)
                    changed = True
                    break
            if not isinstance(b, Delta) or not (e.is_integer() and int(e.const) == 1):
                continue
            i, j = b.i, b.j
            if i == j:
                entries[n_] = (D, e)
                changed = True
                break
            target = tgt_idx = None
            if counts.get(j, 0) == 2:
                target, tgt_idx = j, i
            elif counts.get(i, 0) == 2:
                target, tgt_idx = i, j
            if target is None:
                continue
            for m_, (b2, e2) in enumerate(entries):
                if m_ == n_:
                    continue
                if target in _atom_indices(b2, 1):
                    entries[m_] = (rename_indices(b2, {target: tgt_idx}), e2)
                    entries.pop(n_)
                    changed = True
                    break
            if changed:
                break
        if changed:
            continue
        # p_i * p_i -> p^2
        for n_, (b, e) in enumerate(entries):
            if isinstance(b, PComp) and e.is_integer() and int(e.const) == 2:
                entries[n_] = (PSq(), LIN_ONE)
                changed = True
                break
    return merge(entries), coeff


def _canonical_dummies(entries: list) -> list:
    counts: dict = {}
    for b, e in entries:
        m = abs(int(e.const)) if e.is_integer() else 1
        for i in _atom_indices(b, m if m else 1):
            counts[i] = counts.get(i, 0) + 1
    dummies = sorted(i for i, c in counts.items() if c == 2)
    if not dummies:
        return entries
    frees = {i for i, c in counts.items() if c != 2}
    targets = []
    k = 0
    while len(targets) < len(dummies):
        name = "i%d" % k
        if name not in frees:
            targets.append(name)
        k += 1

    def apply(perm):
        mapping = dict(zip(perm, targets))
        out = [(rename_indices(b, mapping), e) for b, e in entries]
        out.sort(key=lambda p: (key(p[0]), p[1].key()))
        return out

    if len(dummies) <= 4:
        best = bestk = None
        for perm in itertools.permutations(dummies):
            cand = apply(perm)
            ck = tuple((key(b), e.key()) for b, e in cand)
            if bestk is None or ck < bestk:
                best, bestk = cand, ck
        return best
    return apply(tuple(dummies))


def mk_pow(base: Expr, exp: LinExp | QLike) -> Expr:
    e = exp if isinstance(exp, LinExp) else LinExp.of(exp)
    base = to_expr(base)
    if e.is_zero():
        return ONE
    if e == LIN_ONE:
        return base
    if isinstance(base, (Rat, Cst, Pow, Prod, Gam)):
        # route through the product builder so folding rules apply
        return mk_prod([Pow(base, e)])
    return Pow(base, e)


# ---------------------------------------------------------------------------
# simplify (bottom-up rebuild through the canonical constructors)


def simplify(e: Expr) -> Expr:
    if isinstance(e, Sum):
        return mk_sum([simplify(t) for t in e.terms])
    if isinstance(e, Prod):
        return mk_prod([simplify(f) for f in e.factors])
    if isinstance(e, Pow):
        return mk_pow(simplify(e.base), e.exp)
    if isinstance(e, LogE):
        return log_e(simplify(e.arg))
    if isinstance(e, Gam):
        return gamma_fn(e.arg)
    if isinstance(e, Fld):
        return mk_field(e.name, e.idx, e.lap)
    if isinstance(e, Delta):
        return mk_delta(e.i, e.j)
    return e


# ---------------------------------------------------------------------------
# differentiation


def diff(e: Expr, idx: str) -> Expr:
    """Spacetime derivative; field atoms gain an index, momenta are inert."""
    if isinstance(e, (Rat, Cst, Par, Spectral, PComp, PSq, Delta, Gam)):
        return ZERO
    if isinstance(e, Fld):
        return mk_field(e.name, e.idx + (idx,), e.lap)
    if isinstance(e, Sum):
        return mk_sum([diff(t, idx) for t in e.terms])
    if isinstance(e, Prod):
        out = []
        for n, f in enumerate(e.factors):
            df = diff(f, idx)
            if df != ZERO:
                out.append(mk_prod(list(e.factors[:n]) + [df] + list(e.factors[n + 1:])))
        return mk_sum(out)
    if isinstance(e, Pow):
        db = diff(e.base, idx)
        if db == ZERO:
            return ZERO
        return mk_prod([linexp_expr(e.exp), Pow(e.base, e.exp - 1), db])
    if isinstance(e, LogE):
        da = diff(e.arg, idx)
        if da == ZERO:
            return ZERO
        return mk_prod([da, mk_pow(e.arg, LinExp(Q(-1)))])
    raise TypeError(type(e))


def diff_p(e: Expr, idx: str) -> Expr:
    """Momentum derivative; fields are inert."""
    if isinstance(e, (Rat, Cst, Par, Spectral, Fld, Delta, Gam)):
        return ZERO
    if isinstance(e, PComp):
        return mk_delta(e.idx, idx)
    if isinstance(e, PSq):
        return mk_prod([TWO, PComp(idx)])
    if isinstance(e, Sum):
        return mk_sum([diff_p(t, idx) for t in e.terms])
    if isinstance(e, Prod):
        out = []
        for n, f in enumerate(e.factors):
            df = diff_p(f, idx)
            if df != ZERO:
                out.append(mk_prod(list(e.factors[:n]) + [df] + list(e.factors[n + 1:])))
        return mk_sum(out)
    if isinstance(e, Pow):
        db = diff_p(e.base, idx)
        if db == ZERO:
            return ZERO
        return mk_prod([linexp_expr(e.exp), Pow(e.base, e.exp - 1), db])
    if isinstance(e, LogE):
        da = diff_p(e.arg, idx)
        if da == ZERO:
            return ZERO
        return mk_prod([da, mk_pow(e.arg, LinExp(Q(-1)))])
    raise TypeError(type(e))


def diff_s(e: Expr) -> Expr:
    """Derivative with respect to the complex order parameter s."""
    if isinstance(e, (Rat, Cst, Spectral, Fld, PComp, PSq, Delta)):
        return ZERO
    if isinstance(e, Par):
        return ONE if e.name == "s" else ZERO
    if isinstance(e, Gam):
        if e.arg.s != 0:
            raise ExprError("cannot differentiate an unreduced gamma factor in s")
        return ZERO
    if isinstance(e, Sum):
        return mk_sum([diff_s(t) for t in e.terms])
    if isinstance(e, Prod):
        out = []
        for n, f in enumerate(e.factors):
            df = diff_s(f)
            if df != ZERO:
                out.append(mk_prod(list(e.factors[:n]) + [df] + list(e.factors[n + 1:])))
        return mk_sum(out)
    if isinstance(e, Pow):
        out = []
        if e.exp.s != 0:
            out.append(mk_prod([Rat(e.exp.s), log_e(e.base), Pow(e.base, e.exp)]))
        db = diff_s(e.base)
        if db != ZERO:
            out.append(mk_prod([linexp_expr(e.exp), Pow(e.base, e.exp - 1), db]))
        return mk_sum(out)
    if isinstance(e, LogE):
        da = diff_s(e.arg)
        if da == ZERO:
            return ZERO
        return mk_prod([da, mk_pow(e.arg, LinExp(Q(-1)))])
    raise TypeError(type(e))


# ---------------------------------------------------------------------------
# substitution


def subs_param(e: Expr, name: str, value) -> Expr:
    """Replace a parameter (including 's' or 'd' in exponents and gamma args)."""
    val = to_expr(value) if not isinstance(value, Expr) else value
    lin = None
    if name in ("s", "d") and isinstance(val, Rat):
        lin = val.value

    def walk(x: Expr) -> Expr:
        if isinstance(x, Par):
            return val if x.name == name else x
        if isinstance(x, Gam):
            a = x.arg
            if lin is not None:
                a = a.subs(s=lin) if name == "s" else a.subs(d=lin)
            return gamma_fn(a)
        if isinstance(x, Pow):
            ex = x.exp
            if lin is not None:
                ex = ex.subs(s=lin) if name == "s" else ex.subs(d=lin)
            return mk_pow(walk(x.base), ex)
        if isinstance(x, Sum):
            return mk_sum([walk(t) for t in x.terms])
        if isinstance(x, Prod):
            return mk_prod([walk(f) for f in x.factors])
        if isinstance(x, LogE):
            return log_e(walk(x.arg))
        return x

    if name in ("s", "d") and lin is None:
        # substituting a non-rational for s/d would leave exponents ill-typed
        raise ExprError("parameter %r may only be replaced by a rational" % name)
    return walk(e)


def _used_index_names(e: Expr) -> set:
    return set(index_counts(e))


def substitute(e: Expr, target: str, replacement: Expr) -> Expr:
    """Replace a field atom (and, consistently, all its derivative atoms)."""
    for bad in atoms_of(replacement, (Spectral, PComp, PSq)):
        raise InconsistentSubstitution(
            "replacement for %s contains phase-space momentum content: %s" % (target, bad))
    used = _used_index_names(e) | _used_index_names(replacement)
    fresh_ctr = [0]

    def fresh() -> str:
        while True:
            n = "q%dq" % fresh_ctr[0]
            fresh_ctr[0] += 1
            if n not in used:
                used.add(n)
                return n

    def rewrite_atom(f: Fld) -> Expr:
        out = replacement
        for i in f.idx:
            out = diff(out, i)
        for _ in range(f.lap):
            u = fresh()
            out = diff(diff(out, u), u)
        return out

    def walk(x: Expr) -> Expr:
        if isinstance(x, Fld) and x.name == target:
            return rewrite_atom(x)
        if isinstance(x, Sum):
            return mk_sum([walk(t) for t in x.terms])
        if isinstance(x, Prod):
            return mk_prod([walk(f) for f in x.factors])
        if isinstance(x, Pow):
            return mk_pow(walk(x.base), x.exp)
        if isinstance(x, LogE):
            return log_e(walk(x.arg))
        return x

    return simplify(walk(e))


def atoms_of(e: Expr, kinds) -> list:
    out = []

    def walk(x):
        if isinstance(x, kinds):
            out.append(x)
        if isinstance(x, Sum):
            for t in x.terms:
                walk(t)
        elif isinstance(x, Prod):
            for f in x.factors:
                walk(f)
        elif isinstance(x, Pow):
            walk(x.base)
        elif isinstance(x, LogE):
            walk(x.arg)

    walk(e)
    return out


# ---------------------------------------------------------------------------
# numeric evaluation


def eval_numeric(e: Expr, bindings: Mapping, dim: int = 4,
                 frees: "Mapping[str, int] | None" = None) -> complex:
    """Evaluate to a complex double.

    ``bindings`` may contain parameter values by name, ``"lam"`` for the
    spectral variable, ``"p"`` (a length-``dim`` sequence) for momentum
    atoms, and ``"fields"``: either a dict keyed by ``(name, idx_ints, lap)``
    or a callable ``f(name, idx_ints, lap) -> complex``.  Indices occurring
    twice in a term are summed over ``range(dim)``; remaining free indices
    are looked up in ``frees``.
    """
    frees = dict(frees or {})

    def field_val(name, idxs, lp):
        fb = bindings.get("fields")
        if fb is None:
            raise UnboundSymbol("no field bindings for %s" % name)
        if callable(fb):
            return fb(name, idxs, lp)
        try:
            return fb[(name, tuple(idxs), lp)]
        except KeyError:
            raise UnboundSymbol("field %s%s lap=%d unbound" % (name, idxs, lp))

    def ev(x: Expr, idxmap: dict) -> complex:
        if isinstance(x, Rat):
            return complex(x.value)
        if isinstance(x, Cst):
            import numpy as _np
            return {"pi": complex(_np.pi), "e": complex(_np.e), "i": 1j}[x.name]
        if isinstance(x, Par):
            if x.name not in bindings:
                raise UnboundSymbol(x.name)
            return complex(bindings[x.name])
        if isinstance(x, Spectral):
            if "lam" not in bindings:
                raise UnboundSymbol("lam")
            return complex(bindings["lam"])
        if isinstance(x, Fld):
            idxs = tuple(idxmap[i] for i in x.idx)
            return complex(field_val(x.name, idxs, x.lap))
        if isinstance(x, PComp):
            p = bindings.get("p")
            if p is None:
                raise UnboundSymbol("p")
            return complex(p[idxmap[x.idx]])
        if isinstance(x, PSq):
            p = bindings.get("p")
            if p is None:
                raise UnboundSymbol("p")
            return complex(sum(v * v for v in p))
        if isinstance(x, Delta):
            return 1.0 + 0j if idxmap[x.i] == idxmap[x.j] else 0j
        if isinstance(x, Gam):
            from scipy.special import gamma as _gamma
            a = x.arg.eval(_sv(x.arg), _dv())
            if abs(a.imag) < 1e-300 and a.real <= 0 and abs(a.real - round(a.real)) < 1e-12:
                raise GammaPole("gamma pole at %s" % a)
            return complex(_gamma(a))
        if isinstance(x, LogE):
            import numpy as _np
            return complex(_np.log(ev(x.arg, idxmap)))
        if isinstance(x, Pow):
            ex = x.exp.eval(_sv(x.exp), _dv())
            return ev(x.base, idxmap) ** ex
        if isinstance(x, Sum):
            return sum(ev_term(t, idxmap) for t in x.terms)
        if isinstance(x, Prod):
            return ev_term(x, idxmap)
        raise TypeError(type(x))

    def _sv(lin: LinExp) -> complex:
        if lin.s == 0:
            return 0j
        if "s" not in bindings:
            raise UnboundSymbol("s")
        return complex(bindings["s"])

    def _dv() -> complex:
        return complex(bindings.get("d", dim))

    def ev_term(t: Expr, outer: dict) -> complex:
        if isinstance(t, Sum):
            return sum(ev_term(u, outer) for u in t.terms)
        # sum the term's own dummy indices
        counts = index_counts(t)
        dummies = sorted(i for i, c in counts.items() if c == 2 and i not in outer)
        free_here = [i for i, c in counts.items() if c == 1 and i not in outer]
        idxmap = dict(outer)
        for i in free_here:
            if i not in frees:
                raise UnboundSymbol("free index %s" % i)
            idxmap[i] = frees[i]
        if not dummies:
            return _ev_flat(t, idxmap)
        total = 0j
        for combo in itertools.product(range(dim), repeat=len(dummies)):
            m = dict(idxmap)
            m.update(zip(dummies, combo))
            total += _ev_flat(t, m)
        return total

    def _ev_flat(t: Expr, idxmap: dict) -> complex:
        if isinstance(t, Prod):
            out = 1.0 + 0j
            for f in t.factors:
                out *= ev(f, idxmap)
            return out
        return ev(t, idxmap)

    return ev_term(e, {})


# ---------------------------------------------------------------------------
# rendering and parsing


_LATEX_NAMES = {
    "pi": r"\pi", "e": "e", "i": "i", "s": "s", "d": "d", "hbar": r"\hbar",
    "mu": r"\mu", "eps": r"\varepsilon", "t": "t", "m2": "m^{2}",
    "lc": r"\lambda_{c}", "gt": r"\tilde{g}", "N": "N", "phi": r"\phi", "V": "V",
}


def _frac_str(x: Fraction) -> str:
    return str(x)


def _lin_str(a: LinExp, latex: bool = False) -> str:
    return str(a)


def render(e: Expr, fmt: str = "text") -> str:
    if fmt == "json":
        return json.dumps(_to_json(e), sort_keys=True)
    if fmt == "latex":
        return _render_any(e, True)
    if fmt == "text":
        return _render_any(e, False)
    raise ValueError("unknown format %r" % fmt)


def _render_any(e: Expr, latex: bool) -> str:
    if isinstance(e, Rat):
        if e.value.denominator == 1:
            return str(e.value)
        if latex:
            sgn = "-" if e.value < 0 else ""
            v = abs(e.value)
            return r"%s\frac{%d}{%d}" % (sgn, v.numerator, v.denominator)
        return str(e.value)
    if isinstance(e, Cst):
        return _LATEX_NAMES[e.name] if latex else e.name
    if isinstance(e, Par):
        return _LATEX_NAMES.get(e.name, e.name) if latex else e.name
    if isinstance(e, Spectral):
        return r"\lambda" if latex else "lam"
    if isinstance(e, Fld):
        core = _LATEX_NAMES.get(e.name, e.name) if latex else e.name
        if e.idx:
            if latex:
                core = r"\partial_{%s}%s" % ("".join(_idx_tex(i) for i in e.idx), core)
            else:
                core = "%s_%s" % (core, "".join(e.idx))
        for _ in range(e.lap):
            core = (r"\partial^{2}" + core) if latex else ("lap(%s)" % core)
        return core
    if isinstance(e, PComp):
        return ("p_{%s}" % _idx_tex(e.idx)) if latex else ("p_%s" % e.idx)
    if isinstance(e, PSq):
        return "p^{2}" if latex else "p2"
    if isinstance(e, Delta):
        if latex:
            return r"\delta_{%s%s}" % (_idx_tex(e.i), _idx_tex(e.j))
        return "delta(%s,%s)" % (e.i, e.j)
    if isinstance(e, Gam):
        return (r"\Gamma(%s)" if latex else "Gamma(%s)") % _lin_str(e.arg, latex)
    if isinstance(e, LogE):
        return (r"\ln\left(%s\right)" if latex else "log(%s)") % _render_any(e.arg, latex)
    if isinstance(e, Pow):
        b = _render_any(e.base, latex)
        if isinstance(e.base, (Sum, Prod)) or (isinstance(e.base, Rat) and e.base.value < 0):
            b = (r"\left(%s\right)" if latex else "(%s)") % b
        if latex:
            return "%s^{%s}" % (b, _lin_str(e.exp, True))
        return "%s^(%s)" % (b, _lin_str(e.exp, False))
    if isinstance(e, Sum):
        parts = [_render_any(t, latex) for t in e.terms]
        out = parts[0]
        for p_ in parts[1:]:
            out += p_ if p_.startswith("-") else ("+" + p_)
        return out
    if isinstance(e, Prod):
        parts = []
        for f in e.factors:
            s_ = _render_any(f, latex)
            if isinstance(f, Sum):
                s_ = (r"\left(%s\right)" if latex else "(%s)") % s_
            parts.append(s_)
        if parts and parts[0] == "-1":
            parts = ["-"] + parts[1:]
            return parts[0] + (" " if latex else "*").join(parts[1:])
        return (" " if latex else "*").join(parts)
    raise TypeError(type(e))


def _idx_tex(i: str) -> str:
    greek = {"mu": r"\mu ", "nu": r"\nu ", "rho": r"\rho ", "sig": r"\sigma "}
    return greek.get(i, i)


def _lin_json(a: LinExp) -> dict:
    out = {"const": str(a.const), "s_coeff": str(a.s)}
    if a.d:
        out["d_coeff"] = str(a.d)
    return out


def _lin_from_json(o: Mapping) -> LinExp:
    return LinExp(Q(o.get("const", "0")), Q(o.get("s_coeff", "0")), Q(o.get("d_coeff", "0")))


def _to_json(e: Expr):
    if isinstance(e, Rat):
        return {"node": "rational", "value": str(e.value)}
    if isinstance(e, Cst):
        return {"node": "const", "name": e.name}
    if isinstance(e, Par):
        return {"node": "param", "name": e.name}
    if isinstance(e, Spectral):
        return {"node": "spectral"}
    if isinstance(e, Fld):
        return {"node": "field", "name": e.name, "indices": list(e.idx), "lap": e.lap}
    if isinstance(e, PComp):
        return {"node": "p", "index": e.idx}
    if isinstance(e, PSq):
        return {"node": "p2"}
    if isinstance(e, Delta):
        return {"node": "delta", "indices": [e.i, e.j]}
    if isinstance(e, Gam):
        return {"node": "gamma", "argument": _lin_json(e.arg)}
    if isinstance(e, LogE):
        return {"node": "log", "children": [_to_json(e.arg)]}
    if isinstance(e, Pow):
        return {"node": "power", "children": [_to_json(e.base)], "exponent": _lin_json(e.exp)}
    if isinstance(e, Sum):
        return {"node": "sum", "children": [_to_json(t) for t in e.terms]}
    if isinstance(e, Prod):
        return {"node": "product", "children": [_to_json(f) for f in e.factors]}
    raise TypeError(type(e))


def _from_json(o) -> Expr:
    n = o["node"]
    if n == "rational":
        return Rat(Q(o["value"]))
    if n == "const":
        return Cst(o["name"])
    if n == "param":
        return Par(o["name"])
    if n == "spectral":
        return Spectral()
    if n == "field":
        return mk_field(o["name"], tuple(o.get("indices", ())), o.get("lap", 0))
    if n == "p":
        return PComp(o["index"])
    if n == "p2":
        return PSq()
    if n == "delta":
        i, j = o["indices"]
        return mk_delta(i, j)
    if n == "gamma":
        return gamma_fn(_lin_from_json(o["argument"]))
    if n == "log":
        return log_e(_from_json(o["children"][0]))
    if n == "power":
        return mk_pow(_from_json(o["children"][0]), _lin_from_json(o["exponent"]))
    if n == "sum":
        return mk_sum([_from_json(c) for c in o["children"]])
    if n == "product":
        return mk_prod([_from_json(c) for c in o["children"]])
    raise ValueError("unknown node %r" % n)


def parse_json(s: str) -> Expr:
    return _from_json(json.loads(s))
