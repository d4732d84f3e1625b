"""Exact rational bookkeeping of the exponent choice and its inequalities.

Every parameter of the scheme is a power of the error size eta.  An estimate
of the form ``c * eta**e < eta**t / k`` holds for all small eta as soon as
``e > t``, so the whole closing argument reduces to a finite list of strict
rational inequalities between exponents.  They live in ``ROWS`` as plain
strings so that each one can be audited by eye.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence


class LedgerError(ValueError):
    """Raised on invalid input or on a failing inequality during a sweep."""


def as_fraction(value, max_den: int = 10**9) -> Fraction:
    """Exact rational for ints, Fractions and decimal strings; floats are
    rounded to the closest fraction with denominator below ``max_den``."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, (int, str)):
        return Fraction(value)
    return Fraction(value).limit_denominator(max_den)


@dataclass(frozen=True)
class ExponentChoice:
    d: int
    q: Fraction
    qp: Fraction
    beta: Fraction
    kappa: Fraction
    gamma: Fraction
    mu: Fraction
    a1: Fraction
    a2: Fraction
    a3: Fraction
    a4: Fraction
    delta: Fraction

    def namespace(self, alpha: Fraction = Fraction(0)) -> dict:
        return {
            "d": Fraction(self.d), "q": self.q, "qp": self.qp,
            "beta": self.beta, "kappa": self.kappa, "gamma": self.gamma,
            "mu": self.mu, "a1": self.a1, "a2": self.a2, "a3": self.a3,
            "a4": self.a4, "alpha": alpha, "min": min,
        }

    def as_dict(self) -> dict:
        out = {"d": self.d}
        for key in ("q", "qp", "beta", "kappa", "gamma", "mu",
                    "a1", "a2", "a3", "a4", "delta"):
            out[key] = str(getattr(self, key))
        return out


def conjugate(q: Fraction) -> Fraction:
    return q / (q - 1)


def gap_closed_form(d: int, q) -> Fraction:
    """delta(d, q) written as a single fraction in d, q, q'."""
    q = as_fraction(q)
    qp = conjugate(q)
    return 1 / (1944 * Fraction(d) ** 4 * qp**2 * (d + q + qp) ** 2 + 6 * qp)


def feasible_parameters(d: int, q) -> ExponentChoice:
    if int(d) != d or d < 3:
        raise LedgerError(f"d must be an integer >= 3, got {d}")
    q = as_fraction(q)
    if q <= 1:
        raise LedgerError(f"q must exceed 1, got {q}")
    d = int(d)
    qp = conjugate(q)
    s = d + q + qp
    beta = 81 * qp * d**2 * s
    kappa = 3 * beta * d
    gamma = Fraction(1, 2)
    mu = 4 * beta * d * qp * s
    a1 = Fraction(1, 4)
    a2 = beta / 3
    a3 = beta / 2
    a4 = beta / 3
    delta = Fraction(1, 6) / (mu * d + qp)
    if delta != gap_closed_form(d, q):
        raise LedgerError("the two forms of the exponent gap disagree")
    return ExponentChoice(d, q, qp, beta, kappa, gamma, mu, a1, a2, a3, a4, delta)


@dataclass(frozen=True)
class Row:
    group: str
    name: str
    expression: str
    threshold: str
    strict: bool = True
    note: str = ""


# Each row asks: expression > threshold (or >= when not strict).
ROWS: tuple[Row, ...] = (
    # the choice itself
    Row("choice", "a1 positive", "a1", "0"),
    Row("choice", "a2 above one", "a2", "1"),
    Row("choice", "a3 positive", "a3", "0"),
    Row("choice", "a4 above one", "a4", "1"),
    # structural constraints, recast as powers of eta bounded by constants
    Row("structural", "lambda^-1 l^-(d+1) small", "kappa - beta*(d+1)", "0",
        note="sum of two powers must stay below 1: needs a positive exponent"),
    Row("structural", "tau l^-(2d+1) small",
        "1 + mu*d/qp - kappa*(d-1) - beta*(2*d+1) - gamma", "0",
        note="sum of two powers must stay below 1: needs a positive exponent"),
    Row("structural", "r_max below lambda^(-(2d-2)/(d-2))",
        "mu + qp/d - beta*qp - kappa*(2*d-2)/(d-2)", "0",
        note="unquantified constant on the right; strict gap makes it harmless"),
    # the solution on [0, T - eta^a3] only sees data on [0, T]
    Row("localization", "tau_max below eta^a3/2",
        "1 + mu*d/qp - kappa*(d-1) - gamma - a3", "0"),
    Row("localization", "ell below eta^a3/2", "beta - a3", "0"),
    # perturbation sizes, each below eta^a1 / 6
    Row("perturbation", "rho_l - rho in C_t L^q", "beta - a2", "a1"),
    Row("perturbation", "Theta_P in C_t L^q", "1 - gamma", "a1"),
    Row("perturbation", "Theta_T in C_t L^q",
        "mu/qp - kappa*(d-1)/q - beta*(d/(q-1) + 2*d + 3) - gamma + 1 + 1/d", "a1"),
    Row("perturbation", "Theta_C in C_tx",
        "mu*d/qp - kappa*(d-1) - 2*beta*(d+1) - gamma + 2", "a1"),
    Row("perturbation", "b_l - b in C_t W^1p", "beta - a2", "a1"),
    Row("perturbation", "W_P in C_t W^1p", "-mu*d*alpha + gamma - qp*alpha", "a1"),
    # derivative growth, each below eta^(-a2 a4) / 8
    Row("derivative", "grad rho_l", "-a2", "-a2*a4"),
    Row("derivative", "d_tx Theta_P (first power)", "1 - gamma - beta*(d+1)", "-a2*a4"),
    Row("derivative", "d_tx Theta_P (second power)",
        "-mu*d/qp - beta*(d+qp+1)", "-a2*a4"),
    Row("derivative", "dt Theta_T", "-mu*d/qp - beta*(d+1)", "-a2*a4"),
    Row("derivative", "grad Theta_T",
        "mu/q - kappa*(d-1)/q - beta*(d/(q-1) + 2*d + 3) - gamma + 1 - 1/(d*(q-1))",
        "-a2*a4"),
    Row("derivative", "dt Theta_C",
        "min(1 - gamma - beta*(d+1), -mu*d/qp - beta*(d+qp+1), -mu*d/qp - beta*(d+1))",
        "-a2*a4", note="bounded by dt Theta_P + dt Theta_T"),
    Row("derivative", "grad b_l", "-a2", "-a2*a4"),
    Row("derivative", "grad W_P",
        "-mu*(d*alpha + d/qp) - beta*(d+qp+1) + 2*gamma - 1 - qp*alpha", "-a2*a4"),
    # new error, each term below eta^a4 / 7
    Row("error", "R1 commutator", "2*beta - 2*a2", "a4"),
    Row("error", "R2 period variation", "mu*d/qp - beta*(2*d+1) - gamma + 2", "a4"),
    Row("error", "R3 coefficient drift", "2 - gamma - beta*(d+1) + mu*d/qp", "a4"),
    Row("error", "R4 radius variation", "mu - beta*(d+qp+1) + 1 + qp/d", "a4"),
    Row("error", "R5 crawled bumps", "kappa - beta*(d+2) + 1", "a4"),
    Row("error", "R6 spatial oscillation", "mu - beta*(2+qp+d) + 1 + qp/d", "a4"),
    Row("error", "R6 temporal oscillation",
        "mu*d/qp - kappa*(d-1) - beta*(d+2) - gamma + 2", "a4"),
    Row("error", "R7 rho_l W_P", "mu*d/q - beta*(d*qp - d/qp) + gamma + 1/(q-1)", "a4"),
    Row("error", "R7 Theta b_l", "mu*d/qp - kappa*(d-1) - beta*(3*d + 2 - d/q) - gamma + 2",
        "a4"),
    Row("error", "R7 Theta_T W_P",
        "mu/qp - kappa*(d-1)/q - beta*(d/(q-1) + 2*d + 3) + 1 + 1/d", "a4"),
)


def _evaluate(expr: str, ns: dict) -> Fraction:
    value = eval(expr, {"__builtins__": {}}, ns)  # noqa: S307 - module constants only
    return as_fraction(value)


@dataclass(frozen=True)
class RowResult:
    d: int
    q: Fraction
    alpha: Fraction
    row: Row
    value: Fraction
    bound: Fraction

    @property
    def margin(self) -> Fraction:
        return self.value - self.bound

    @property
    def passed(self) -> bool:
        return self.margin > 0 if self.row.strict else self.margin >= 0


def verify_exponent_inequalities(choice: ExponentChoice, alpha=0,
                                 rows: Sequence[Row] = ROWS) -> list[RowResult]:
    alpha = as_fraction(alpha)
    if alpha < 0 or alpha >= choice.delta:
        raise LedgerError(f"alpha must lie in [0, delta) = [0, {choice.delta}), got {alpha}")
    ns = choice.namespace(alpha)
    return [RowResult(choice.d, choice.q, alpha, row,
                      _evaluate(row.expression, ns), _evaluate(row.threshold, ns))
            for row in rows]


def default_alphas(delta: Fraction) -> list[Fraction]:
    return [Fraction(0), delta / 2, 9 * delta / 10]


def sweep(d_values: Iterable[int], q_values: Iterable, samples=None) -> list[RowResult]:
    """Run the table for every (d, q) and alpha in ``samples`` (fractions of delta).

    Raises LedgerError naming the first failing row.
    """
    results = []
    for d in d_values:
        if not 3 <= d <= 10:
            raise LedgerError(f"d={d} outside the supported sweep range [3, 10]")
        for q in q_values:
            q = as_fraction(q)
            if not 1 < q <= 10:
                raise LedgerError(f"q={q} outside the supported sweep range (1, 10]")
            choice = feasible_parameters(d, q)
            fractions = [Fraction(0), Fraction(1, 2), Fraction(9, 10)] if samples is None \
                else [as_fraction(s) for s in samples]
            for frac in fractions:
                for res in verify_exponent_inequalities(choice, frac * choice.delta):
                    if not res.passed:
                        raise LedgerError(
                            f"row '{res.row.name}' fails at d={d}, q={q}, "
                            f"alpha={res.alpha}: margin {res.margin}")
                    results.append(res)
    return results


CSV_COLUMNS = ("d", "q_num", "q_den", "alpha_num", "alpha_den", "group", "name",
               "expression", "threshold", "strict", "value_num", "value_den",
               "margin_num", "margin_den", "margin_float", "passed")


def _row_record(res: RowResult) -> dict:
    return {
        "d": res.d, "q_num": res.q.numerator, "q_den": res.q.denominator,
        "alpha_num": res.alpha.numerator, "alpha_den": res.alpha.denominator,
        "group": res.row.group, "name": res.row.name,
        "expression": res.row.expression, "threshold": res.row.threshold,
        "strict": res.row.strict,
        "value_num": res.value.numerator, "value_den": res.value.denominator,
        "margin_num": res.margin.numerator, "margin_den": res.margin.denominator,
        "margin_float": float(res.margin), "passed": res.passed,
    }


def table_to_csv(results: Sequence[RowResult], path=None) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for res in results:
        writer.writerow(_row_record(res))
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def table_to_json(results: Sequence[RowResult], path=None, choice=None) -> str:
    payload = {"rows": [_row_record(r) for r in results]}
    if choice is not None:
        payload["choice"] = choice.as_dict()
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def format_table(results: Sequence[RowResult]) -> str:
    lines = []
    for res in results:
        flag = "PASS" if res.passed else "FAIL"
        rel = ">" if res.row.strict else ">="
        lines.append(f"{flag}  [{res.row.group:12s}] {res.row.name:38s} "
                     f"{res.value} {rel} {res.bound}  (margin {res.margin})")
    return "\n".join(lines)
