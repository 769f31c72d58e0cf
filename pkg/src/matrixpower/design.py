"""Matrix sampling designs: which variables each questionnaire form carries.

A design names p regressors and one outcome, then lists forms. Each form
administers a subset of the regressors; the outcome is administered on every
form by construction, so form documents list regressor items only. Form
fractions give the share of respondents allocated to each form and must sum
to one.

Variable indexing convention used across the package: regressors are
0..p-1 in declaration order and the outcome is index p.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import DomainError, InvariantError, SchemaError

ALLOCATION_TOL = 1e-9


@dataclass(frozen=True)
class Form:
    """One questionnaire form: a name, its regressor items, and its share."""

    name: str
    items: tuple[str, ...]
    fraction: float


@dataclass(frozen=True)
class Design:
    """A validated matrix sampling plan.

    Raises InvariantError on construction if the plan is not a plan: duplicate
    names, unknown items, the outcome listed as an item, empty forms, or
    fractions that do not sum to one.
    """

    variables: tuple[str, ...]
    outcome: str
    forms: tuple[Form, ...]

    def __post_init__(self):
        if not self.variables:
            raise InvariantError("a design needs at least one regressor")
        if len(set(self.variables)) != len(self.variables):
            raise InvariantError("regressor names must be unique")
        if self.outcome in self.variables:
            raise InvariantError(f"outcome {self.outcome!r} also listed as a regressor")
        if not self.forms:
            raise InvariantError("a design needs at least one form")
        if len({f.name for f in self.forms}) != len(self.forms):
            raise InvariantError("form names must be unique")
        known = set(self.variables)
        for form in self.forms:
            if not form.items:
                raise InvariantError(f"form {form.name!r} administers no regressors")
            if len(set(form.items)) != len(form.items):
                raise InvariantError(f"form {form.name!r} lists a duplicate item")
            if self.outcome in form.items:
                raise InvariantError(
                    f"form {form.name!r} lists the outcome; it is administered implicitly"
                )
            unknown = [item for item in form.items if item not in known]
            if unknown:
                raise InvariantError(f"form {form.name!r} has unknown items {unknown}")
            if not 0.0 < form.fraction <= 1.0:
                raise InvariantError(
                    f"form {form.name!r} fraction {form.fraction} outside (0, 1]"
                )
        total = sum(f.fraction for f in self.forms)
        if abs(total - 1.0) > ALLOCATION_TOL:
            raise InvariantError(f"form fractions sum to {total!r}, expected 1")

    @property
    def p(self) -> int:
        """Number of regressors."""
        return len(self.variables)

    @property
    def form_count(self) -> int:
        return len(self.forms)

    @property
    def allocation(self) -> np.ndarray:
        return np.array([f.fraction for f in self.forms])

    def var_index(self, name: str) -> int:
        """Index of a variable; the outcome maps to p."""
        if name == self.outcome:
            return self.p
        try:
            return self.variables.index(name)
        except ValueError:
            raise KeyError(f"unknown variable {name!r}") from None

    def form_variable_indices(self, form_index: int) -> tuple[int, ...]:
        """Ascending indices of the variables form k administers, outcome included."""
        form = self.forms[form_index]
        idx = sorted(self.var_index(item) for item in form.items)
        return tuple(idx) + (self.p,)

    def to_document(self) -> dict:
        return {
            "variables": list(self.variables),
            "outcome": self.outcome,
            "forms": [
                {"name": f.name, "items": list(f.items), "fraction": f.fraction}
                for f in self.forms
            ],
        }


def parse_design(document) -> Design:
    """Build a Design from a JSON string or an already-parsed mapping.

    Structural problems (wrong types, missing keys, bad JSON) raise
    SchemaError; semantically invalid plans raise InvariantError from the
    Design constructor.
    """
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"design document is not valid JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise SchemaError(f"design document must be an object, got {type(document).__name__}")
    for key in ("variables", "outcome", "forms"):
        if key not in document:
            raise SchemaError(f"design document missing key {key!r}")
    variables = document["variables"]
    if not isinstance(variables, list) or not all(isinstance(v, str) for v in variables):
        raise SchemaError("'variables' must be a list of strings")
    outcome = document["outcome"]
    if not isinstance(outcome, str):
        raise SchemaError("'outcome' must be a string")
    raw_forms = document["forms"]
    if not isinstance(raw_forms, list):
        raise SchemaError("'forms' must be a list")
    forms = []
    for pos, raw in enumerate(raw_forms):
        if not isinstance(raw, dict):
            raise SchemaError(f"form #{pos} must be an object")
        for key in ("name", "items", "fraction"):
            if key not in raw:
                raise SchemaError(f"form #{pos} missing key {key!r}")
        name, items, fraction = raw["name"], raw["items"], raw["fraction"]
        if not isinstance(name, str):
            raise SchemaError(f"form #{pos} name must be a string")
        if not isinstance(items, list) or not all(isinstance(i, str) for i in items):
            raise SchemaError(f"form {name!r} items must be a list of strings")
        if isinstance(fraction, bool) or not isinstance(fraction, (int, float)):
            raise SchemaError(f"form {name!r} fraction must be a number")
        forms.append(Form(name=name, items=tuple(items), fraction=float(fraction)))
    return Design(variables=tuple(variables), outcome=outcome, forms=tuple(forms))


@dataclass(frozen=True, eq=False)
class SelectorMatrix:
    """0/1 selector picking a form's administered rows out of (1, x1..xp, y).

    `matrix` has one row per administered variable (ascending variable index,
    outcome last) and p+2 columns ordered (intercept, x1..xp, y). The
    intercept column is all zero: forms select variables, never the constant.
    """

    form_index: int
    variable_indices: tuple[int, ...]
    matrix: np.ndarray


def selector(design: Design, form_index: int) -> SelectorMatrix:
    """Selector matrix for form `form_index` (IndexError if out of range)."""
    if not 0 <= form_index < design.form_count:
        raise IndexError(f"form index {form_index} out of range [0, {design.form_count})")
    idx = design.form_variable_indices(form_index)
    matrix = np.zeros((len(idx), design.p + 2))
    for row, var in enumerate(idx):
        matrix[row, var + 1] = 1.0
    return SelectorMatrix(form_index=form_index, variable_indices=idx, matrix=matrix)


@dataclass(frozen=True)
class EstimabilityReport:
    """Which variable pairs are co-observed on some form, and which never are.

    `pair_coverage` maps name pairs (i <= j in variable order, outcome last,
    diagonal pairs included) to the tuple of form names covering them. The
    full covariance structure is identified exactly when nothing is uncovered.
    """

    pair_coverage: dict
    uncovered_pairs: tuple

    @property
    def singular(self) -> bool:
        return bool(self.uncovered_pairs)


def validate_estimability(design: Design) -> EstimabilityReport:
    names = design.variables + (design.outcome,)
    coverage = {
        (names[i], names[j]): []
        for i in range(len(names))
        for j in range(i, len(names))
    }
    for k, form in enumerate(design.forms):
        administered = design.form_variable_indices(k)
        for a_pos, i in enumerate(administered):
            for j in administered[a_pos:]:
                coverage[(names[i], names[j])].append(form.name)
    pair_coverage = {pair: tuple(forms) for pair, forms in coverage.items()}
    uncovered = tuple(pair for pair, forms in pair_coverage.items() if not forms)
    return EstimabilityReport(pair_coverage=pair_coverage, uncovered_pairs=uncovered)


def balanced_pairs_design(p: int, variables=None, outcome: str = "y") -> Design:
    """All-pairs design: one form per regressor pair, equal fractions.

    Forms are ordered lexicographically by pair; every regressor appears on
    p-1 forms and every pair on exactly one, so the full covariance structure
    is identified with the fewest items per form.
    """
    if p < 2:
        raise DomainError(f"a pairwise design needs p >= 2 regressors, got {p}")
    if variables is None:
        variables = tuple(f"x{i + 1}" for i in range(p))
    else:
        variables = tuple(variables)
        if len(variables) != p:
            raise DomainError(f"expected {p} variable names, got {len(variables)}")
    pairs = list(combinations(range(p), 2))
    fraction = 1.0 / len(pairs)
    forms = tuple(
        Form(name=str(k + 1), items=(variables[i], variables[j]), fraction=fraction)
        for k, (i, j) in enumerate(pairs)
    )
    return Design(variables=variables, outcome=outcome, forms=forms)


def builtin_bigfive() -> Design:
    """Ten-form personality-inventory plan: two of five traits per form."""
    return balanced_pairs_design(5, variables=("O", "C", "E", "A", "N"))
