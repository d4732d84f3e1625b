import csv
import io
import json
from fractions import Fraction

import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from convexint.ledger import (ROWS, LedgerError, as_fraction, feasible_parameters, format_table,
                              gap_closed_form, sweep, table_to_csv, table_to_json,
                              verify_exponent_inequalities)


def sympy_choice(d, q):
    """Independent evaluation of the exponent choice with sympy rationals."""
    d, q = sp.Integer(d), sp.Rational(q)
    qp = q / (q - 1)
    s = d + q + qp
    beta = 81 * qp * d**2 * s
    mu = 4 * beta * d * qp * s
    return {"qp": qp, "beta": beta, "kappa": 3 * beta * d, "mu": mu,
            "delta": sp.Rational(1, 6) / (mu * d + qp)}


def frac(x):
    return Fraction(int(sp.numer(x)), int(sp.denom(x)))


class TestChoice:
    def test_reference_values(self):
        c = feasible_parameters(3, 2)
        assert (c.qp, c.beta, c.kappa, c.mu) == (2, 10206, 91854, 1714608)
        assert (c.a2, c.a3, c.a4) == (3402, 5103, 3402)
        assert c.delta == Fraction(1, 30862956)
        assert 1944 * 3**4 * 2**2 * 7**2 + 6 * 2 == 30862956

    @pytest.mark.parametrize("d", [3, 4, 5, 7])
    @pytest.mark.parametrize("q", ["3/2", "2", "3", "11/7"])
    def test_matches_sympy(self, d, q):
        c = feasible_parameters(d, Fraction(q))
        ref = sympy_choice(d, q)
        for key in ("qp", "beta", "kappa", "mu", "delta"):
            assert getattr(c, key) == frac(ref[key])
        assert c.delta == gap_closed_form(d, Fraction(q))
        assert c.a2 == c.a4 and c.a2 > 1 and c.a4 > 1 and c.a1 > 0 and c.a3 > 0

    def test_closed_form_symbolic(self):
        # both expressions of the gap agree as rational functions of (d, q)
        d, q = sp.symbols("d q", positive=True)
        qp = q / (q - 1)
        s = d + q + qp
        beta = 81 * qp * d**2 * s
        mu = 4 * beta * d * qp * s
        lhs = sp.Rational(1, 6) / (mu * d + qp)
        rhs = 1 / (1944 * d**4 * qp**2 * s**2 + 6 * qp)
        assert sp.simplify(lhs - rhs) == 0

    def test_delta_decreases_in_d(self):
        for q in (Fraction(3, 2), Fraction(2), Fraction(3)):
            deltas = [feasible_parameters(d, q).delta for d in (3, 4, 5, 6)]
            assert all(a > b for a, b in zip(deltas, deltas[1:]))

    @pytest.mark.parametrize("d,q", [(2, 2), (3, 1), (3, "1/2"), (3.5, 2)])
    def test_rejects(self, d, q):
        with pytest.raises(LedgerError):
            feasible_parameters(d, q)

    def test_as_fraction(self):
        assert as_fraction("3/2") == Fraction(3, 2)
        assert as_fraction(0.5) == Fraction(1, 2)
        assert as_fraction(Fraction(2, 7)) == Fraction(2, 7)


class TestRows:
    def rows(self, alpha=0):
        c = feasible_parameters(3, 2)
        return {r.row.name: r for r in verify_exponent_inequalities(c, alpha * c.delta)}

    def test_hand_margins(self):
        r = self.rows()
        assert r["lambda^-1 l^-(d+1) small"].margin == 51030
        assert r["rho_l - rho in C_t L^q"].margin == Fraction(27215, 4)

    def test_wp_row_half_delta(self):
        r = self.rows(Fraction(1, 2))["W_P in C_t W^1p"]
        assert r.margin == Fraction(1, 6)

    def test_wp_row_tightest(self):
        r = self.rows(Fraction(9, 10))["W_P in C_t W^1p"]
        assert r.margin == Fraction(1, 10)

    def test_all_pass(self):
        assert all(r.passed for r in self.rows().values())
        assert len(self.rows()) == len(ROWS)

    def test_alpha_range(self):
        c = feasible_parameters(3, 2)
        with pytest.raises(LedgerError):
            verify_exponent_inequalities(c, c.delta)
        with pytest.raises(LedgerError):
            verify_exponent_inequalities(c, -c.delta)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(3, 8), st.fractions(Fraction(11, 10), Fraction(8)), st.fractions(0, Fraction(99, 100)))
    def test_choice_invariants_property(self, d, q, t):
        c = feasible_parameters(d, q)
        assert 3 * c.a2 == 2 * c.a3 == 3 * c.a4 == c.beta
        assert c.kappa == 3 * c.beta * d and c.gamma == Fraction(1, 2)
        res = verify_exponent_inequalities(c, t * c.delta)
        wp = next(r for r in res if r.row.name == "W_P in C_t W^1p")
        # linear in alpha: exact margin 1/4 - (t/6)
        assert wp.margin == Fraction(1, 4) - t / 6


class TestSweep:
    def test_full_sweep(self):
        res = sweep([3, 4, 5], [Fraction(3, 2), Fraction(2), Fraction(3)])
        assert len(res) == 3 * 3 * 3 * len(ROWS)
        assert all(r.margin > 0 for r in res)

    def test_range(self):
        with pytest.raises(LedgerError):
            sweep([2], [2])
        with pytest.raises(LedgerError):
            sweep([3], [20])

    def test_csv_rows(self, tmp_path):
        res = sweep([3], [2])
        text = table_to_csv(res, tmp_path / "t.csv")
        rows = list(csv.DictReader(io.StringIO(text)))
        assert len(rows) == len(res)
        first = rows[0]
        assert Fraction(int(first["margin_num"]), int(first["margin_den"])) == res[0].margin
        assert (tmp_path / "t.csv").read_text() == text

    def test_json(self):
        c = feasible_parameters(3, 2)
        payload = json.loads(table_to_json(verify_exponent_inequalities(c), choice=c))
        assert payload["choice"]["delta"] == "1/30862956"
        assert len(payload["rows"]) == len(ROWS)

    def test_format(self):
        text = format_table(verify_exponent_inequalities(feasible_parameters(3, 2)))
        assert text.count("PASS") == len(ROWS)
