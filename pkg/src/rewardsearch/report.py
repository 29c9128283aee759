"""Per-generation summary tables from archived records."""

from __future__ import annotations

from typing import Sequence

from .search import CandidateRecord, NoValidCandidates, select_best


def generation_rows(records: Sequence[CandidateRecord]) -> list[dict]:
    """One row per generation: the baseline, then each generation's best candidate."""
    rows = []
    gens = sorted({r.generation for r in records})
    for g in gens:
        members = [r for r in records if r.generation == g]
        label = "Baseline" if g == 0 else f"Gen-{g}"
        try:
            best = select_best(members)
        except NoValidCandidates:
            rows.append({"row": label, "generation": g, "id": None, "valid": 0, "total": len(members)})
            continue
        rows.append(
            {
                "row": label,
                "generation": g,
                "id": best.id,
                "J_hat": best.J_hat,
                "J_std": best.J_std,
                "J_undiscounted": best.J_undiscounted,
                "J_undiscounted_std": best.J_undiscounted_std,
                "deliveries": best.deliveries,
                "invalid_deliveries": best.invalid_deliveries,
                "valid": sum(r.scored for r in members),
                "total": len(members),
            }
        )
    return rows


def candidate_rows(records: Sequence[CandidateRecord]) -> list[dict]:
    out = []
    for r in records:
        d = r.diagnostics or {}
        out.append(
            {
                "id": r.id,
                "verdict": r.verdict,
                "J_hat": r.J_hat,
                "J_std": r.J_std,
                "deliveries": r.deliveries,
                "invalid_deliveries": r.invalid_deliveries,
                "delta": d.get("delta"),
                "rho": d.get("rho"),
                "nmi": d.get("nmi"),
                "repairs": len(r.repair_attempts),
            }
        )
    return out


def report_data(records: Sequence[CandidateRecord]) -> dict:
    return {"generations": generation_rows(records), "candidates": candidate_rows(records)}


def _fmt(v, spec=".2f"):
    return "-" if v is None else format(v, spec)


def _table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[j]) for r in rows)) if rows else len(h) for j, h in enumerate(header)]
    line = lambda cells: "  ".join(c.rjust(w) if j else c.ljust(w) for j, (c, w) in enumerate(zip(cells, widths)))
    return "\n".join([line(header), line(["-" * w for w in widths])] + [line(r) for r in rows])


def render_table(records: Sequence[CandidateRecord]) -> str:
    data = report_data(records)
    gen = []
    for row in data["generations"]:
        if row["id"] is None:
            gen.append([row["row"], "-", "-", "-", "-", "-", f"0/{row['total']}"])
            continue
        gen.append(
            [
                row["row"],
                row["id"],
                f"{_fmt(row['J_hat'])} ± {_fmt(row['J_std'])}",
                f"{_fmt(row['J_undiscounted'], '.1f')} ± {_fmt(row['J_undiscounted_std'], '.1f')}",
                _fmt(row["deliveries"]),
                _fmt(row["invalid_deliveries"]),
                f"{row['valid']}/{row['total']}",
            ]
        )
    top = _table(["Row", "Best", "J (disc.)", "Return", "Deliveries", "Invalid", "Valid"], gen)
    cand = [
        [
            c["id"],
            c["verdict"],
            _fmt(c["J_hat"]),
            _fmt(c["deliveries"]),
            _fmt(c["invalid_deliveries"]),
            _fmt(c["delta"], ".3f"),
            _fmt(c["rho"], ".3f"),
            _fmt(c["nmi"], ".3f"),
            str(c["repairs"]),
        ]
        for c in data["candidates"]
    ]
    bottom = _table(["Id", "Verdict", "J", "Deliv.", "Invalid", "Delta", "Rho", "NMI", "Repairs"], cand)
    return top + "\n\n" + bottom + "\n"
