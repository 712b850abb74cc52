"""JSON and CSV serialization for problems, solutions, and equilibria.

Problem files are JSON documents with top-level keys ``capacities``,
``mutually_exclusive``, ``types`` and ``label``. Unknown keys anywhere in
the document are rejected so that typos fail loudly. Serialization is
canonical: serializing a parsed document reproduces it byte for byte.
"""

from __future__ import annotations

import csv
import json
from typing import Any

import numpy as np

from .errors import StructuralError
from .model import LongRunAllocation, Problem, UrgencyProcess, UserType

_PROBLEM_KEYS = {"label", "capacities", "mutually_exclusive", "types"}
_TYPE_KEYS = {"mass", "weight", "urgency", "rewards_on", "rewards_off",
              "scale", "name"}
_URGENCY_KEYS = {"levels", "probs"}


def _reject_unknown(obj: dict, allowed: set, where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise StructuralError(
            f"unknown key(s) {sorted(unknown)} in {where}; "
            f"allowed: {sorted(allowed)}"
        )


def _require(obj: dict, key: str, where: str) -> Any:
    if key not in obj:
        raise StructuralError(f"missing key {key!r} in {where}")
    return obj[key]


def problem_from_dict(doc: dict) -> Problem:
    if not isinstance(doc, dict):
        raise StructuralError("problem document must be a JSON object")
    _reject_unknown(doc, _PROBLEM_KEYS, "problem")
    raw_types = _require(doc, "types", "problem")
    if not isinstance(raw_types, list):
        raise StructuralError("'types' must be a list")
    types = []
    for k, raw in enumerate(raw_types):
        where = f"types[{k}]"
        if not isinstance(raw, dict):
            raise StructuralError(f"{where} must be an object")
        _reject_unknown(raw, _TYPE_KEYS, where)
        urg = _require(raw, "urgency", where)
        if not isinstance(urg, dict):
            raise StructuralError(f"{where}.urgency must be an object")
        _reject_unknown(urg, _URGENCY_KEYS, f"{where}.urgency")
        process = UrgencyProcess(
            _require(urg, "levels", f"{where}.urgency"),
            _require(urg, "probs", f"{where}.urgency"),
        )
        types.append(UserType(
            mass=_require(raw, "mass", where),
            weight=_require(raw, "weight", where),
            urgency=process,
            rewards_on=_require(raw, "rewards_on", where),
            rewards_off=_require(raw, "rewards_off", where),
            scale=raw.get("scale"),
            name=raw.get("name", ""),
        ))
    return Problem(
        capacities=_require(doc, "capacities", "problem"),
        types=types,
        mutually_exclusive=doc.get("mutually_exclusive", False),
        label=doc.get("label", ""),
    )


def problem_to_dict(problem: Problem) -> dict:
    types = []
    for t in problem.types:
        entry = {
            "mass": t.mass,
            "weight": t.weight,
            "urgency": {"levels": list(t.urgency.levels),
                        "probs": list(t.urgency.probs)},
            "rewards_on": list(t.rewards_on),
            "rewards_off": list(t.rewards_off),
        }
        if t.scale is not None:
            entry["scale"] = t.scale
        if t.name:
            entry["name"] = t.name
        types.append(entry)
    return {
        "label": problem.label,
        "capacities": list(problem.capacities),
        "mutually_exclusive": problem.mutually_exclusive,
        "types": types,
    }


def dumps_canonical(doc: dict) -> str:
    return json.dumps(doc, indent=2) + "\n"


def problem_to_json(problem: Problem) -> str:
    return dumps_canonical(problem_to_dict(problem))


def problem_from_json(text: str) -> Problem:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise StructuralError(f"invalid JSON: {exc}") from exc
    return problem_from_dict(doc)


def load_problem(path) -> Problem:
    with open(path, "r", encoding="utf-8") as fh:
        return problem_from_json(fh.read())


def save_problem(problem: Problem, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(problem_to_json(problem))


# ---------------------------------------------------------------------------
# Solution exports
# ---------------------------------------------------------------------------

def _array(a) -> list:
    return np.asarray(a).tolist()


def allocation_rows(problem: Problem, alloc: LongRunAllocation):
    """Flatten chi to (type, resource, urgency_level, chi) rows."""
    rows = []
    for i, t in enumerate(problem.types):
        for j in range(problem.n_resources):
            for k, level in enumerate(t.urgency.levels):
                rows.append((i, j, level, float(alloc.chi[i, j, k])))
    return rows


def write_allocation_csv(problem: Problem, alloc: LongRunAllocation, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["type", "resource", "urgency", "chi"])
        writer.writerows(allocation_rows(problem, alloc))


def mlnw_solution_to_dict(problem: Problem, sol) -> dict:
    report = sol.residuals
    return {
        "objective": sol.objective,
        "reward_improvements": _array(sol.reward_improvements),
        "lambda": _array(sol.lam),
        "eta": _array(sol.eta),
        "iota": _array(sol.iota),
        "chi": _array(sol.chi.chi),
        "kkt_residuals": {
            "stationarity": report.stationarity,
            "primal_feasibility": report.primal_feasibility,
            "dual_feasibility": report.dual_feasibility,
            "complementary_slackness": report.complementary_slackness,
            "worst_index": list(report.worst_index),
        },
    }


def ke_to_dict(ke) -> dict:
    return {
        "bids": _array(ke.bids),
        "kappa": _array(ke.kappa),
        "eta": _array(ke.eta),
        "reward_improvements": _array(ke.reward_improvements),
        "chi": _array(ke.chi.chi),
    }


_KE_KEYS = {"bids", "kappa", "eta", "reward_improvements", "chi"}


def ke_from_dict(doc: dict):
    from .ke import KarmaEquilibrium  # local import to avoid a cycle

    if not isinstance(doc, dict):
        raise StructuralError("KE document must be a JSON object")
    _reject_unknown(doc, _KE_KEYS, "karma equilibrium")
    return KarmaEquilibrium(
        chi=LongRunAllocation(np.asarray(_require(doc, "chi", "ke"))),
        bids=np.asarray(_require(doc, "bids", "ke"), dtype=np.float64),
        kappa=np.asarray(_require(doc, "kappa", "ke"), dtype=np.float64),
        eta=np.asarray(_require(doc, "eta", "ke"), dtype=np.float64),
        reward_improvements=np.asarray(
            _require(doc, "reward_improvements", "ke"), dtype=np.float64),
    )


def load_ke(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise StructuralError(f"invalid JSON: {exc}") from exc
    return ke_from_dict(doc)


def save_ke(ke, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_canonical(ke_to_dict(ke)))


def write_coupling_csv(report, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["type", "separate_sum", "combined", "slack"])
        for i in range(len(report.combined)):
            writer.writerow([
                i,
                float(report.separate_sum[i]),
                float(report.combined[i]),
                float(report.slack[i]),
            ])
