"""Tables and charts: regional transition table, marginal effects, model coefficients.

Everything here is a pure function of its inputs and writes text with fixed
number formatting, so repeated runs give byte-identical files.
"""

from __future__ import annotations

import csv
import json
from html import escape

import numpy as np

from .volatility import display_round, row_percentages


def _fmt(x, nd):
    v = float(display_round(x, nd))
    return f"{v:.{nd}f}" if v != 0 else f"{0:.{nd}f}"


def table1_rows(F):
    """Counts in thousands and row percentages of a flow table, one decimal.

    Returns a list of rows (first row is the header), ready for CSV or text.
    """
    dests = list(F.destination_labels)
    rows = [["panel", "origin", *dests, "Total"]]
    for i, o in enumerate(F.origin_labels):
        rows.append(["thousands", o, *(_fmt(v / 1000.0, 1) for v in F.F[i]),
                     _fmt(F.F[i].sum() / 1000.0, 1)])
    pct = row_percentages(F)
    for i, o in enumerate(F.origin_labels):
        rows.append(["percent", o, *(_fmt(v, 1) for v in pct[i]), _fmt(100.0, 1)])
    return rows


def table1_text(F):
    rows = table1_rows(F)
    width = max(len(c) for r in rows for c in r) + 2
    return "\n".join("".join(c.rjust(width) if k > 1 else c.ljust(width) for k, c in enumerate(r))
                     for r in rows) + "\n"


def write_rows(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def table3_rows(reports, covariates, destinations):
    """Marginal effects of flagged covariates toward each of ``destinations``.

    ``reports`` are model-report dicts (see :func:`model_report`).  A cell
    shows the effect to three decimals; its flag (``strong``/``weak``) sits in
    the matching ``<covariate>_flag`` column.  An origin is skipped in a
    destination's block when that destination is its model's reference.
    """
    rows = [["destination", "origin", *covariates, *(f"{c}_flag" for c in covariates)]]
    for dest in destinations:
        for rep in reports:
            if dest not in rep["options"] or dest == rep["reference"]:
                continue
            j = rep["options"].index(dest)
            names = rep["covariates"]
            eff = rep["reported_effects"][j]
            flags = dict(zip(names, rep["flags"][rep["nonref"].index(dest)]))
            vals, fl = [], []
            for c in covariates:
                v = eff[names.index(c)] if c in names else 0.0
                vals.append(_fmt(v, 3))
                fl.append(flags.get(c, "") if v != 0 else "")
            rows.append([dest, rep["anchor"], *vals, *fl])
    return rows


def tableC1_rows(reports, covariates):
    """Coefficients ``b`` and z ratios per model and non-reference option."""
    rows = [["model", "pct_deviance", "option", "coeff", *covariates]]
    for rep in reports:
        names = rep["covariates"]
        for r, opt in enumerate(rep["nonref"]):
            b_row, z_row = [], []
            for c in covariates:
                if c in names and rep["mask"][r][names.index(c)]:
                    v = names.index(c)
                    b_row.append(_fmt(rep["beta"][r][v], 2))
                    z_row.append(_fmt(rep["z"][r][v], 2))
                else:
                    b_row.append(_fmt(0.0, 2))
                    z_row.append("")
            label = f"{rep['direction']} {rep['anchor']}"
            pct = _fmt(rep["pct_deviance_explained"], 1)
            rows.append([label, pct, opt, "b", *b_row])
            rows.append([label, pct, opt, "z", *z_row])
    return rows


def model_report(m, panel, diagnostics, effects, reported, flags, extra=None):
    """JSON-ready summary of a fitted model."""
    rep = {
        "anchor": panel.anchor,
        "direction": panel.direction,
        "zones": list(m.zone_ids),
        "options": list(m.option_labels),
        "reference": m.reference,
        "nonref": list(m.nonref_labels),
        "covariates": list(m.covariate_names),
        "beta0": m.beta0.tolist(),
        "beta": m.beta.tolist(),
        "mask": m.mask.astype(int).tolist(),
        "z": np.where(np.isnan(m.z_ratios), 0.0, m.z_ratios).tolist(),
        "p": np.where(np.isnan(m.p_values), 1.0, m.p_values).tolist(),
        "loglik": m.loglik,
        "deviance": m.deviance,
        "null_deviance": m.null_deviance,
        "pct_deviance_explained": m.pct_deviance_explained,
        "iterations": m.iterations,
        "marginal_effects": effects.tolist(),
        "reported_effects": reported.tolist(),
        "flags": flags.tolist(),
        "residuals": diagnostics["residuals"].tolist(),
        "std_residuals": np.nan_to_num(diagnostics["std_residuals"], posinf=1e300,
                                       neginf=-1e300).tolist(),
        "outliers": diagnostics["outliers"],
        "steps": m.info.get("steps", []),
    }
    if extra:
        rep.update(extra)
    return rep


def write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, ensure_ascii=False)
        fh.write("\n")


# -- SVG ---------------------------------------------------------------------

def _svg(width, height, body):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n'
            + "".join(body) + "</svg>\n")


def _shade(v):
    """White to dark blue for v in [0, 1]."""
    v = min(max(float(v), 0.0), 1.0)
    r = int(round(255 - v * (255 - 8)))
    g = int(round(255 - v * (255 - 48)))
    b = int(round(255 - v * (255 - 107)))
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(values, row_labels, col_labels, title, fmt="{:.1f}", vmax=None):
    """Cell-shaded matrix with the value printed in each cell."""
    values = np.asarray(values, dtype=float)
    vmax = float(np.nanmax(np.abs(values))) if vmax is None else vmax
    vmax = vmax or 1.0
    cw, ch, left, top = 84, 26, 110, 60
    W = left + cw * len(col_labels) + 20
    H = top + ch * len(row_labels) + 20
    body = [f'<text x="{left}" y="20" font-size="13">{escape(title)}</text>\n']
    for j, c in enumerate(col_labels):
        body.append(f'<text x="{left + cw * j + cw // 2}" y="{top - 8}" '
                    f'text-anchor="middle">{escape(c)}</text>\n')
    for i, r in enumerate(row_labels):
        y = top + ch * i
        body.append(f'<text x="{left - 6}" y="{y + ch // 2 + 4}" text-anchor="end">'
                    f'{escape(r)}</text>\n')
        for j in range(len(col_labels)):
            v = values[i, j]
            shade = abs(v) / vmax
            colour = _shade(shade)
            ink = "#ffffff" if shade > 0.55 else "#000000"
            x = left + cw * j
            body.append(f'<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="{colour}" '
                        f'stroke="#ffffff"/>\n')
            body.append(f'<text x="{x + cw // 2}" y="{y + ch // 2 + 4}" text-anchor="middle" '
                        f'fill="{ink}">{fmt.format(v)}</text>\n')
    return _svg(W, H, body)


def bar_chart_svg(labels, series, names, title):
    """Grouped vertical bars; ``series`` is (n_series, n_labels)."""
    series = np.asarray(series, dtype=float)
    colours = ("#08306b", "#ef8a62", "#67a9cf", "#999999")
    vmax = max(float(series.max()), 1e-9)
    bw, gap, left, top, h = 12, 10, 50, 40, 220
    group = bw * series.shape[0] + gap
    W = left + group * len(labels) + 20
    H = top + h + 60
    body = [f'<text x="{left}" y="20" font-size="13">{escape(title)}</text>\n',
            f'<line x1="{left}" y1="{top + h}" x2="{W - 10}" y2="{top + h}" stroke="#000000"/>\n']
    for k, name in enumerate(names):
        body.append(f'<rect x="{W - 150}" y="{8 + 14 * k}" width="10" height="10" '
                    f'fill="{colours[k % len(colours)]}"/>\n')
        body.append(f'<text x="{W - 135}" y="{17 + 14 * k}">{escape(name)}</text>\n')
    for g, lab in enumerate(labels):
        x0 = left + group * g
        for k in range(series.shape[0]):
            v = series[k, g]
            bh = h * v / vmax
            body.append(f'<rect x="{x0 + bw * k}" y="{top + h - bh:.2f}" width="{bw}" '
                        f'height="{bh:.2f}" fill="{colours[k % len(colours)]}"/>\n')
        body.append(f'<text x="{x0 + group // 2}" y="{top + h + 14}" text-anchor="middle">'
                    f'{escape(lab)}</text>\n')
    return _svg(W, H, body)


def write_text(text, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
