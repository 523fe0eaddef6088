"""Parser and validator for kernel metadata (``.kmeta``) and algorithm (``.alg``) files.

Kernel metadata::

    kernel matrix_vector {
      arg field inc any_space_1;
      arg field read any_space_2;
      arg operator read any_space_1 any_space_2;
      iterates_over cells;
    }

An operator's first space tag is the space it maps *to*, the second the
space it maps *from*.  ``stencil N;`` before the closing brace sets the
stencil radius of every read field argument; an argument may override it
with a trailing ``stencil N``.

Algorithm programs::

    field v on W2;  field s on W2;
    operator mm from W2 to W2;
    invoke { setval_c(v, 0.0); matrix_vector(v, s, mm); enforce_bc(v); }
"""
from __future__ import annotations

from dataclasses import dataclass, field
import re

__all__ = [
    "SPACES",
    "ACCESSES",
    "BUILTINS",
    "Diagnostic",
    "DSLError",
    "ArgMeta",
    "KernelMeta",
    "Decl",
    "Call",
    "Invoke",
    "AlgorithmProgram",
    "ResolvedArg",
    "ResolvedCall",
    "ResolvedProgram",
    "parse_kernel_meta",
    "parse_algorithm",
    "validate",
    "format_kernel_meta",
    "format_program",
]

SPACES = ("W0", "W1", "W2", "W3", "Wtheta")
ACCESSES = ("read", "write", "readwrite", "inc")
ARG_KINDS = ("field", "operator", "scalar")
_ANY = re.compile(r"any_space_(\d+)$")


@dataclass(frozen=True)
class Diagnostic:
    severity: str
    message: str
    line: int
    col: int

    def __str__(self):
        return f"{self.line}:{self.col}: {self.severity}: {self.message}"


class DSLError(Exception):
    """Fatal diagnostics; ``diagnostics`` is never empty."""

    def __init__(self, diagnostics, source: str = ""):
        self.diagnostics = list(diagnostics)
        self.source = source
        prefix = f"{source}:" if source else ""
        super().__init__("\n".join(prefix + str(d) for d in self.diagnostics))


@dataclass(frozen=True)
class ArgMeta:
    kind: str
    access: str
    spaces: tuple
    stencil: int | None = None      # explicit per-arg stencil, None = kernel default


@dataclass(frozen=True)
class KernelMeta:
    name: str
    args: tuple
    iterates_over: str
    stencil: int = 0
    builtin: bool = False

    def stencil_of(self, i: int) -> int:
        """Stencil radius of argument ``i`` (0 unless it is a read field)."""
        a = self.args[i]
        if a.kind != "field" or a.access != "read":
            return 0
        return self.stencil if a.stencil is None else a.stencil


@dataclass(frozen=True)
class Decl:
    kind: str
    name: str
    spaces: tuple = ()              # field: (space,), operator: (to, from)
    value: float | None = None
    line: int = 0
    col: int = 0


@dataclass(frozen=True)
class Call:
    name: str
    args: tuple                     # identifiers as str, literals as float
    line: int = 0
    col: int = 0


@dataclass(frozen=True)
class Invoke:
    calls: tuple
    line: int = 0
    col: int = 0


@dataclass(frozen=True)
class AlgorithmProgram:
    decls: tuple
    invokes: tuple

    def decl(self, name: str) -> Decl | None:
        for d in self.decls:
            if d.name == name:
                return d
        return None

    def structure(self):
        """Location-free view used for structural comparison."""
        return (tuple((d.kind, d.name, d.spaces, d.value) for d in self.decls),
                tuple(tuple((c.name, c.args) for c in inv.calls) for inv in self.invokes))


@dataclass(frozen=True)
class ResolvedArg:
    kind: str
    access: str
    name: str | None                # object name, None for a literal
    value: float | None             # literal value
    space: str | None               # field space / operator to-space
    from_space: str | None = None   # operator from-space
    stencil: int = 0

    @property
    def modified(self) -> bool:
        return self.access in ("write", "readwrite", "inc", "sum")


@dataclass(frozen=True)
class ResolvedCall:
    name: str
    args: tuple
    iterates_over: str
    builtin: bool
    line: int = 0
    col: int = 0


@dataclass(frozen=True)
class ResolvedProgram:
    program: AlgorithmProgram
    invokes: tuple                  # tuple of tuples of ResolvedCall
    bindings: tuple                 # per call: {any_space_n: space}


# -- built-ins ---------------------------------------------------------------
def _b(name, *args):
    return KernelMeta(name, tuple(ArgMeta(k, a, s) for k, a, s in args), "dofs", 0, True)


_F1 = ("any_space_1",)
BUILTINS = {
    m.name: m
    for m in (
        _b("setval_c", ("field", "write", _F1), ("scalar", "read", ())),
        _b("setval_x", ("field", "write", _F1), ("field", "read", _F1)),
        _b("copy", ("field", "read", _F1), ("field", "write", _F1)),
        _b("axpy", ("field", "readwrite", _F1), ("scalar", "read", ()), ("field", "read", _F1)),
        _b("inner_product", ("scalar", "sum", ()), ("field", "read", _F1), ("field", "read", _F1)),
    )
}


# -- tokenizer ---------------------------------------------------------------
_TOKEN = re.compile(r"""
    (?P<ws>[ \t\r]+) | (?P<nl>\n) | (?P<comment>\#[^\n]*)
  | (?P<number>[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[{}();,=])
""", re.VERBOSE)


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    line, lstart, pos = 1, 0, 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise DSLError([Diagnostic("error", f"unexpected character {text[pos]!r}",
                                       line, pos - lstart + 1)])
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            lstart = m.end()
        elif kind not in ("ws", "comment"):
            toks.append(_Tok(kind, m.group(), line, m.start() - lstart + 1))
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - lstart + 1))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def fail(self, msg, tok=None):
        tok = tok or self.tok
        raise DSLError([Diagnostic("error", msg, tok.line, tok.col)])

    def _show(self, tok):
        return "end of input" if tok.kind == "eof" else repr(tok.text)

    def expect(self, text):
        t = self.tok
        if t.text != text or t.kind == "eof":
            self.fail(f"expected {text!r}, found {self._show(t)}")
        self.i += 1
        return t

    def accept(self, text):
        if self.tok.text == text and self.tok.kind != "eof":
            self.i += 1
            return True
        return False

    def ident(self, what="identifier"):
        t = self.tok
        if t.kind != "ident":
            self.fail(f"expected {what}, found {self._show(t)}")
        self.i += 1
        return t

    def number(self):
        t = self.tok
        if t.kind != "number":
            self.fail(f"expected number, found {self._show(t)}")
        self.i += 1
        return t

    def integer(self, what):
        t = self.number()
        try:
            v = int(t.text)
        except ValueError:
            self.fail(f"{what} must be an integer", t)
        if v < 0:
            self.fail(f"{what} must be >= 0", t)
        return v

    def space(self):
        t = self.ident("function space")
        if t.text not in SPACES:
            self.fail(f"unknown function space {t.text!r}", t)
        return t.text

    def spacetag(self):
        t = self.ident("space tag")
        if t.text not in SPACES and not _ANY.match(t.text):
            self.fail(f"unknown space tag {t.text!r}", t)
        return t.text


# -- kernel metadata ---------------------------------------------------------
def parse_kernel_meta(text: str) -> KernelMeta:
    """Parse one ``kernel`` block; raises :class:`DSLError` on any fatal diagnostic."""
    p = _Parser(text)
    p.expect("kernel")
    name = p.ident("kernel name")
    p.expect("{")
    args, diags, locs = [], [], []
    while p.tok.text == "arg":
        start = p.tok
        p.i += 1
        kind = p.ident("argument kind")
        if kind.text not in ARG_KINDS:
            p.fail(f"unknown argument kind {kind.text!r}", kind)
        access = p.ident("access descriptor")
        if access.text not in ACCESSES:
            p.fail(f"unknown access {access.text!r}", access)
        tags = []
        while p.tok.kind == "ident" and p.tok.text != "stencil":
            tags.append(p.spacetag())
        stencil = None
        if p.accept("stencil"):
            stencil = p.integer("stencil depth")
        p.expect(";")
        args.append(ArgMeta(kind.text, access.text, tuple(tags), stencil))
        locs.append(start)
    p.expect("iterates_over")
    it = p.ident("iteration space")
    if it.text not in ("cells", "dofs"):
        p.fail(f"iterates_over must be cells or dofs, found {it.text!r}", it)
    p.expect(";")
    kstencil = 0
    if p.accept("stencil"):
        kstencil = p.integer("stencil depth")
        p.expect(";")
    p.expect("}")
    if p.tok.kind != "eof":
        p.fail(f"unexpected {p._show(p.tok)} after kernel block")

    if not args:
        diags.append(Diagnostic("error", f"kernel {name.text} has no arguments", name.line, name.col))
    for a, loc in zip(args, locs):
        where = (loc.line, loc.col)
        if a.kind == "scalar":
            if a.access != "read":
                diags.append(Diagnostic("error", f"scalar argument cannot have access {a.access}", *where))
            if a.spaces:
                diags.append(Diagnostic("error", "scalar argument takes no space tag", *where))
        elif a.kind == "operator":
            if a.access != "read":
                diags.append(Diagnostic("error", f"operator argument cannot have access {a.access}", *where))
            if len(a.spaces) != 2:
                diags.append(Diagnostic("error", "operator argument needs two space tags (to, from)", *where))
        else:
            if len(a.spaces) != 1:
                diags.append(Diagnostic("error", "field argument needs exactly one space tag", *where))
        if a.stencil is not None and not (a.kind == "field" and a.access == "read"):
            diags.append(Diagnostic("error", "stencil applies only to read field arguments", *where))
    if it.text == "dofs" and any(a.kind == "operator" for a in args):
        diags.append(Diagnostic("error", "dofs kernels cannot take operators", it.line, it.col))
    if diags:
        raise DSLError(diags)
    return KernelMeta(name.text, tuple(args), it.text, kstencil)


# -- algorithm ---------------------------------------------------------------
def parse_algorithm(text: str, metas=None) -> AlgorithmProgram:
    """Parse a program.

    Undeclared identifiers and duplicate declarations are always reported;
    arity is checked for built-ins and for kernels found in ``metas``
    (a mapping or iterable of :class:`KernelMeta`).  Unknown kernels are left
    for :func:`validate`.
    """
    metas = _meta_table(metas)
    p = _Parser(text)
    decls = []
    while p.tok.text in ("field", "operator", "scalar") and p.tok.kind == "ident":
        start = p.tok
        p.i += 1
        name = p.ident("name")
        if start.text == "field":
            p.expect("on")
            d = Decl("field", name.text, (p.space(),), None, start.line, start.col)
        elif start.text == "operator":
            p.expect("from")
            src = p.space()
            p.expect("to")
            dst = p.space()
            d = Decl("operator", name.text, (dst, src), None, start.line, start.col)
        else:
            p.expect("=")
            d = Decl("scalar", name.text, (), float(p.number().text), start.line, start.col)
        p.expect(";")
        decls.append(d)
    invokes = []
    while p.tok.text == "invoke" and p.tok.kind == "ident":
        start = p.tok
        p.i += 1
        p.expect("{")
        calls = []
        while p.tok.kind == "ident":
            cname = p.tok
            p.i += 1
            p.expect("(")
            args, argtoks = [], []
            while True:
                t = p.tok
                if t.kind == "ident":
                    args.append(t.text)
                elif t.kind == "number":
                    args.append(float(t.text))
                else:
                    p.fail(f"expected argument, found {p._show(t)}")
                p.i += 1
                argtoks.append(t)
                if not p.accept(","):
                    break
            p.expect(")")
            p.expect(";")
            calls.append((Call(cname.text, tuple(args), cname.line, cname.col), argtoks))
        if not calls:
            p.fail("invoke must contain at least one call")
        p.expect("}")
        invokes.append((start, calls))
    if p.tok.kind != "eof":
        p.fail(f"unexpected {p._show(p.tok)}")

    diags = []
    seen = {}
    for d in decls:
        if d.name in seen:
            diags.append(Diagnostic("error", f"{d.name} already declared at line {seen[d.name]}", d.line, d.col))
        else:
            seen[d.name] = d.line
    out = []
    for start, calls in invokes:
        for call, toks in calls:
            for a, t in zip(call.args, toks):
                if isinstance(a, str) and a not in seen:
                    diags.append(Diagnostic("error", f"undeclared identifier {a!r}", t.line, t.col))
            meta = BUILTINS.get(call.name) or metas.get(call.name)
            if meta is not None and len(meta.args) != len(call.args):
                diags.append(Diagnostic("error", f"{call.name} takes {len(meta.args)} arguments, "
                                        f"{len(call.args)} given", call.line, call.col))
        out.append(Invoke(tuple(c for c, _ in calls), start.line, start.col))
    if diags:
        raise DSLError(diags)
    return AlgorithmProgram(tuple(decls), tuple(out))


def _meta_table(metas) -> dict:
    if metas is None:
        return {}
    if isinstance(metas, dict):
        return dict(metas)
    return {m.name: m for m in metas}


# -- validation --------------------------------------------------------------
def validate(program: AlgorithmProgram, metas) -> ResolvedProgram:
    """Resolve every call against its metadata and unify ``any_space_n`` tags."""
    table = _meta_table(metas)
    diags = []
    for name in table:
        if name in BUILTINS:
            diags.append(Diagnostic("error", f"kernel {name} shadows a built-in", 0, 0))
    resolved_invokes, all_bindings = [], []
    for inv in program.invokes:
        rcalls = []
        for call in inv.calls:
            where = (call.line, call.col)
            meta = BUILTINS.get(call.name) or table.get(call.name)
            if meta is None:
                diags.append(Diagnostic("error", f"unknown kernel {call.name!r}", *where))
                continue
            if len(meta.args) != len(call.args):
                diags.append(Diagnostic("error", f"{call.name} takes {len(meta.args)} arguments, "
                                        f"{len(call.args)} given", *where))
                continue
            bindings: dict = {}
            rargs = []
            ok = True
            for i, (am, actual) in enumerate(zip(meta.args, call.args)):
                label = f"argument {i + 1} of {call.name}"
                if isinstance(actual, float):
                    if am.kind != "scalar" or am.access != "read":
                        diags.append(Diagnostic("error", f"{label} must be a declared {am.kind}, "
                                                f"got literal {actual!r}", *where))
                        ok = False
                        continue
                    rargs.append(ResolvedArg("scalar", "read", None, actual, None))
                    continue
                d = program.decl(actual)
                if d is None:
                    diags.append(Diagnostic("error", f"undeclared identifier {actual!r}", *where))
                    ok = False
                    continue
                if d.kind != am.kind:
                    diags.append(Diagnostic("error", f"{label} expects a {am.kind}, "
                                            f"{actual} is a {d.kind}", *where))
                    ok = False
                    continue
                for tag, sp in zip(am.spaces, d.spaces):
                    err = _unify(bindings, tag, sp, actual)
                    if err:
                        diags.append(Diagnostic("error", f"{call.name}: {err}", *where))
                        ok = False
                if d.kind == "operator":
                    rargs.append(ResolvedArg("operator", am.access, actual, None, d.spaces[0], d.spaces[1]))
                elif d.kind == "field":
                    rargs.append(ResolvedArg("field", am.access, actual, None, d.spaces[0],
                                             stencil=meta.stencil_of(i)))
                else:
                    rargs.append(ResolvedArg("scalar", am.access, actual, d.value, None))
            if ok:
                rcalls.append(ResolvedCall(call.name, tuple(rargs), meta.iterates_over,
                                           meta.builtin, call.line, call.col))
                all_bindings.append({k: v[0] for k, v in sorted(bindings.items())})
        resolved_invokes.append(tuple(rcalls))
    if diags:
        raise DSLError(diags)
    return ResolvedProgram(program, tuple(resolved_invokes), tuple(all_bindings))


def _unify(bindings: dict, tag: str, space: str, who: str) -> str | None:
    if tag in SPACES:
        if tag != space:
            return f"{who} is on {space} but the kernel requires {tag}"
        return None
    prev = bindings.get(tag)
    if prev is None:
        bindings[tag] = (space, who)
        return None
    if prev[0] != space:
        return (f"{tag} cannot be both {prev[0]} (from {prev[1]}) "
                f"and {space} (from {who})")
    return None


# -- pretty printers ---------------------------------------------------------
def _num(x: float) -> str:
    return repr(float(x))


def format_kernel_meta(meta: KernelMeta) -> str:
    lines = [f"kernel {meta.name} {{"]
    for a in meta.args:
        parts = ["arg", a.kind, a.access, *a.spaces]
        if a.stencil is not None:
            parts += ["stencil", str(a.stencil)]
        lines.append("  " + " ".join(parts) + ";")
    lines.append(f"  iterates_over {meta.iterates_over};")
    if meta.stencil:
        lines.append(f"  stencil {meta.stencil};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def format_program(program: AlgorithmProgram) -> str:
    lines = []
    for d in program.decls:
        if d.kind == "field":
            lines.append(f"field {d.name} on {d.spaces[0]};")
        elif d.kind == "operator":
            lines.append(f"operator {d.name} from {d.spaces[1]} to {d.spaces[0]};")
        else:
            lines.append(f"scalar {d.name} = {_num(d.value)};")
    for inv in program.invokes:
        lines.append("invoke {")
        for c in inv.calls:
            args = ", ".join(a if isinstance(a, str) else _num(a) for a in c.args)
            lines.append(f"  {c.name}({args});")
        lines.append("}")
    return "\n".join(lines) + ("\n" if lines else "")
