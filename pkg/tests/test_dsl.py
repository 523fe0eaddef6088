import itertools

import pytest
from hypothesis import given, settings, strategies as st

from minipsy.demos import builtin_metas, resource_text
from minipsy.dsl import (DSLError, format_kernel_meta, format_program, parse_algorithm,
                         parse_kernel_meta, validate)

MATRIX_VECTOR = """
kernel matrix_vector {
  arg field inc any_space_1;
  arg field read any_space_2;
  arg operator read any_space_1 any_space_2;
  iterates_over cells;
}
"""

MATVEC = """
field v on W2;
field s on W2;
operator mm from W2 to W2;
invoke {
  setval_c(v, 0.0);
  matrix_vector(v, s, mm);
  enforce_bc(v);
}
"""


@pytest.fixture(scope="module")
def metas():
    return builtin_metas()


# -- kernel metadata --------------------------------------------------------
def test_matrix_vector_meta():
    m = parse_kernel_meta(MATRIX_VECTOR)
    assert m.name == "matrix_vector" and m.iterates_over == "cells"
    assert len(m.args) == 3
    assert [(a.kind, a.access, a.spaces) for a in m.args] == [
        ("field", "inc", ("any_space_1",)),
        ("field", "read", ("any_space_2",)),
        ("operator", "read", ("any_space_1", "any_space_2"))]


def test_packaged_metas_parse(metas):
    assert set(metas) == {"matrix_vector", "enforce_bc", "advect_upwind"}
    adv = metas["advect_upwind"]
    assert [adv.stencil_of(i) for i in range(4)] == [0, 1, 1, 0]


@pytest.mark.parametrize("text,needle", [
    ("kernel k { iterates_over cells; }", "no arguments"),
    ("kernel k { arg scalar inc; iterates_over dofs; }", "scalar argument cannot have access inc"),
    ("kernel k { arg operator inc W2 W2; iterates_over cells; }", "operator argument cannot"),
    ("kernel k { arg operator read W2; iterates_over cells; }", "two space tags"),
    ("kernel k { arg field read W2 stencil 1; arg field write W3 stencil 1; iterates_over cells; }",
     "stencil applies only"),
    ("kernel k { arg field update W2; iterates_over cells; }", "unknown access"),
    ("kernel k { arg field read W9; iterates_over cells; }", "unknown space tag"),
    ("kernel k { arg field read W2; iterates_over edges; }", "cells or dofs"),
    ("kernel k { arg field read W2; iterates_over cells; ", "expected"),
])
def test_meta_diagnostics(text, needle):
    with pytest.raises(DSLError) as ei:
        parse_kernel_meta(text)
    assert needle in str(ei.value)
    assert all(d.line >= 1 and d.col >= 1 for d in ei.value.diagnostics)


def test_meta_per_arg_stencil_override():
    m = parse_kernel_meta("kernel k { arg field read W3 stencil 2; arg field read W3;"
                          " arg field readwrite W3; iterates_over cells; stencil 1; }")
    assert [m.stencil_of(i) for i in range(3)] == [2, 1, 0]


def test_meta_round_trip():
    for text in (MATRIX_VECTOR, resource_text("advect_upwind.kmeta")):
        m = parse_kernel_meta(text)
        assert parse_kernel_meta(format_kernel_meta(m)) == m


# -- algorithm --------------------------------------------------------------
def test_matvec_parses(metas):
    prog = parse_algorithm(MATVEC, metas)
    assert len(prog.invokes) == 1
    assert [c.name for c in prog.invokes[0].calls] == ["setval_c", "matrix_vector", "enforce_bc"]


def test_empty_programs():
    assert parse_algorithm("").invokes == ()
    assert parse_algorithm("field a on W3;  # nothing to do\n").invokes == ()


def test_arity_diagnostic_location(metas):
    text = "field v on W2;\nfield s on W2;\ninvoke {\n  setval_c(v, 0.0);\n    matrix_vector(v, s);\n}\n"
    with pytest.raises(DSLError) as ei:
        parse_algorithm(text, metas)
    (d,) = ei.value.diagnostics
    assert (d.line, d.col) == (5, 5)
    assert "takes 3 arguments" in d.message


def test_undeclared_and_duplicate():
    with pytest.raises(DSLError) as ei:
        parse_algorithm("field a on W3;\nfield a on W2;\ninvoke { copy(a, b); }")
    msgs = [d.message for d in ei.value.diagnostics]
    assert any("already declared" in m for m in msgs)
    assert any("undeclared identifier 'b'" in m for m in msgs)


@pytest.mark.parametrize("text,line,col", [
    ("field a on W3\ninvoke { }", 2, 1),
    ("field a on W4;", 1, 12),
    ("field a on W3;\ninvoke {\n}\n", 3, 1),
    ("field a on W3;\ninvoke { setval_c(a, 1.0) }", 2, 27),
    ("scalar x = ;", 1, 12),
    ("field a on W3; @", 1, 16),
])
def test_syntax_errors_located(text, line, col):
    with pytest.raises(DSLError) as ei:
        parse_algorithm(text)
    d = ei.value.diagnostics[0]
    assert (d.line, d.col) == (line, col)


# -- validation -------------------------------------------------------------
def test_validate_matvec(metas):
    res = validate(parse_algorithm(MATVEC, metas), metas)
    assert res.bindings[1] == {"any_space_1": "W2", "any_space_2": "W2"}
    mv = res.invokes[0][1]
    assert [a.access for a in mv.args] == ["inc", "read", "read"]
    assert [a.space for a in mv.args] == ["W2", "W2", "W2"]


def test_validate_distinct_spaces(metas):
    text = "field v on W2; field s on W3; operator mm from W3 to W2; invoke { matrix_vector(v, s, mm); }"
    res = validate(parse_algorithm(text, metas), metas)
    assert res.bindings[0] == {"any_space_1": "W2", "any_space_2": "W3"}


def test_validate_unification_failure(metas):
    text = "field v on W3; field s on W2; operator mm from W2 to W2; invoke { matrix_vector(v, s, mm); }"
    with pytest.raises(DSLError) as ei:
        validate(parse_algorithm(text, metas), metas)
    msg = str(ei.value)
    assert "W3" in msg and "W2" in msg
    assert ei.value.diagnostics[0].line == 1


def test_validate_unknown_kernel_and_kinds(metas):
    with pytest.raises(DSLError, match="unknown kernel 'nope'"):
        validate(parse_algorithm("field a on W3; invoke { nope(a); }"), metas)
    with pytest.raises(DSLError, match="expects a field"):
        validate(parse_algorithm("scalar a = 1; field b on W3; invoke { copy(a, b); }"), metas)
    with pytest.raises(DSLError, match="advect_upwind"):
        validate(parse_algorithm("field r on W3; field o on W3; field u on W3; scalar dt = 0.1;"
                                 "invoke { advect_upwind(r, o, u, dt); }"), metas)


def test_builtins_resolve(metas):
    text = ("field a on W0; field b on W0; scalar s = 0;"
            "invoke { setval_c(a, 2.0); copy(a, b); axpy(b, 0.5, a); inner_product(s, a, b); }")
    res = validate(parse_algorithm(text, metas), metas)
    calls = res.invokes[0]
    assert all(c.builtin and c.iterates_over == "dofs" for c in calls)
    assert calls[3].args[0].access == "sum"
    with pytest.raises(DSLError):
        validate(parse_algorithm("field a on W0; field b on W3; invoke { copy(a, b); }"), metas)


def test_unification_order_independent(metas):
    decls = ["field v on W2;", "field s on W3;", "operator mm from W3 to W2;"]
    body = "invoke { setval_c(v, 0.0); matrix_vector(v, s, mm); enforce_bc(v); }"
    results = set()
    for perm in itertools.permutations(decls):
        res = validate(parse_algorithm(" ".join(perm) + body, metas), metas)
        results.add(tuple(tuple(sorted(b.items())) for b in res.bindings))
    assert len(results) == 1


# -- round trip -------------------------------------------------------------
NAMES = ["a", "b", "c"]


@st.composite
def programs(draw):
    spaces = draw(st.lists(st.sampled_from(["W0", "W1", "W2", "W3", "Wtheta"]), min_size=3, max_size=3))
    decls = [f"field {n} on {s};" for n, s in zip(NAMES, spaces)]
    decls.append(f"scalar alpha = {draw(st.floats(-1e3, 1e3, allow_nan=False))!r};")
    invokes = []
    for _ in range(draw(st.integers(0, 3))):
        calls = []
        for _ in range(draw(st.integers(1, 4))):
            x, y = draw(st.sampled_from(NAMES)), draw(st.sampled_from(NAMES))
            lit = draw(st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False))
            calls.append(draw(st.sampled_from([
                f"setval_c({x}, {lit!r});", f"copy({x}, {y});", f"axpy({x}, alpha, {y});",
                f"setval_c({x}, alpha);"])))
        invokes.append("invoke {\n" + "\n".join(calls) + "\n}")
    return "\n".join(decls + invokes)


@given(programs())
@settings(max_examples=60, deadline=None)
def test_program_round_trip(text):
    prog = parse_algorithm(text)
    again = parse_algorithm(format_program(prog))
    assert again.structure() == prog.structure()
    assert format_program(again) == format_program(prog)


def test_matvec_round_trip(metas):
    prog = parse_algorithm(MATVEC, metas)
    assert parse_algorithm(format_program(prog), metas).structure() == prog.structure()
