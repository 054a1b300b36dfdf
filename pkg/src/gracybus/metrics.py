"""Render run reports and measurement tables as text tables or JSON lines."""

from __future__ import annotations

import json
from collections import defaultdict

from .analysis import PHASES, ROWS, SIZE_ROWS, ConformanceReport, expected_storage, reference
from .crypto import OpCounters
from .scenario import RunReport

FORMATS = ("table", "json-lines")


def _fmt_counters(d: dict[str, int]) -> str:
    return ",".join(f"{k}={v}" for k, v in sorted(d.items(), key=lambda kv: OpCounters.CATEGORIES.index(kv[0]))) or "-"


def _grid(header: list[str], rows: list[list]) -> str:
    cells = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def report_sizes(report: RunReport) -> dict[str, dict[int, list[int]]]:
    """Message type -> group size at send time -> distinct observed sizes."""
    out: dict[str, dict[int, set[int]]] = defaultdict(lambda: defaultdict(set))
    for ev in report.events:
        for m in ev.messages:
            out[m["type"]][ev.group_size].add(m["bytes"])
    return {t: {n: sorted(s) for n, s in sorted(by_n.items())} for t, by_n in sorted(out.items())}


def report_costs(report: RunReport) -> dict[str, dict[int, dict[str, int]]]:
    """Operation -> tree height -> initiator's counter delta (first occurrence)."""
    out: dict[str, dict[int, dict[str, int]]] = defaultdict(dict)
    for ev in report.events:
        verb, *args = ev.event.split()
        if verb not in ("update", "join", "leave") or not args or args[0] == "*" or ev.height is None:
            continue
        delta = ev.counters_delta.get(args[0])
        if delta and ev.height not in out[verb]:
            out[verb][ev.height] = delta
    return {k: dict(sorted(v.items())) for k, v in sorted(out.items())}


def emit_metrics(report: RunReport, fmt: str = "table") -> str:
    if fmt not in FORMATS:
        raise ValueError(f"format must be one of {FORMATS}")
    sizes = report_sizes(report)
    costs = report_costs(report)
    if fmt == "json-lines":
        lines = [json.dumps({"kind": "event", **_event_dict(e)}, sort_keys=True) for e in report.events]
        lines.append(json.dumps({"kind": "sizes", "sizes": {t: {str(n): s for n, s in v.items()} for t, v in sizes.items()}}, sort_keys=True))
        lines.append(json.dumps({"kind": "costs", "costs": {op: {str(h): c for h, c in v.items()} for op, v in costs.items()}}, sort_keys=True))
        lines.append(
            json.dumps(
                {
                    "kind": "summary",
                    "seed": report.seed,
                    "suite": report.suite,
                    "window": report.window,
                    "converged": report.converged,
                    "members": report.members,
                    "final_epoch": report.final_epoch,
                },
                sort_keys=True,
            )
        )
        return "\n".join(lines) + "\n"

    parts = []
    rows = []
    for e in report.events:
        types = ",".join(m["type"] + ("(dropped)" if m["dropped"] else "") for m in e.messages) or "-"
        total = sum(m["bytes"] for m in e.messages)
        rows.append([e.index, e.event, e.group_size, e.post_epoch, total, types, e.note])
    parts.append(_grid(["#", "event", "n", "epoch", "bytes", "messages", "note"], rows))

    ns = sorted({n for v in sizes.values() for n in v})
    rows = [[t] + ["/".join(map(str, v.get(n, []))) or "" for n in ns] for t, v in sizes.items()]
    parts.append("message sizes by group size\n" + _grid(["type"] + [f"n={n}" for n in ns], rows))

    rows = [[op, h, _fmt_counters(c)] for op, v in costs.items() for h, c in v.items()]
    parts.append("initiator operation counts by height\n" + _grid(["operation", "h", "counters"], rows))

    verdict = "converged" if report.converged else "DIVERGED"
    parts.append(f"{verdict}: {len(report.members)} members at epoch {report.final_epoch}")
    return "\n\n".join(parts) + "\n"


def _event_dict(e) -> dict:
    return {
        "index": e.index,
        "event": e.event,
        "group_size": e.group_size,
        "height": e.height,
        "messages": e.messages,
        "counters_delta": e.counters_delta,
        "post_epoch": e.post_epoch,
        "storage": e.storage,
        "note": e.note,
    }


# measurement tables


def size_table_text(table: dict[int, dict[str, int]], join_failed: list[int]) -> str:
    ns = sorted(table)
    rows = [[row] + [table[n][row] for n in ns] for row in SIZE_ROWS]
    text = _grid(["message"] + [f"n={n}" for n in ns], rows)
    jf = _grid(["rejected requests"] + [str(k + 1) for k in range(len(join_failed))], [["JoinFailed"] + join_failed])
    return text + "\n\n" + jf


def storage_table_text(table: dict[int, set[tuple[int, int, int]]]) -> str:
    rows = []
    for n, seen in sorted(table.items()):
        want = expected_storage(n)
        got = ";".join("/".join(map(str, s)) for s in sorted(seen))
        rows.append([n, got, "/".join(map(str, want)), "ok" if seen == {want} else "MISMATCH"])
    return _grid(["n", "measured public/private/epoch", "2n+1 / log2(n)+1 / 1", ""], rows)


def cost_table_text(rep: ConformanceReport) -> str:
    rows = []
    for row in ROWS:
        for phase in PHASES:
            line = [row, phase]
            for h in rep.heights:
                line.append(_fmt_counters(rep.measured[h][row][phase].nonzero()))
            line.append(_fmt_counters(reference(row, phase, rep.heights[-1]).nonzero()))
            ok = rep.delta_ok(row, phase) and rep.absolute_ok(row, phase)
            line.append("ok" if ok else "DEVIATES")
            rows.append(line)
    header = ["operation", "phase"] + [f"h={h}" for h in rep.heights] + [f"model h={rep.heights[-1]}", ""]
    text = _grid(header, rows)
    if rep.deviations:
        text += "\n\ndeviations\n" + "\n".join(d.line() for d in rep.deviations)
    else:
        text += "\n\nno deviations"
    return text
