"""Dependency-free SVG bar charts for sweep tables."""

from xml.sax.saxutils import escape

PALETTE = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666")


def grouped_bar_svg(tables, metric, title="", ylabel="", width=720, height=420):
    """Grouped bars (one group per bin, one bar per method) with std whiskers.

    ``tables`` is ``{bin label: {method: summary dict}}`` where each summary
    carries ``metric`` and ``metric + "_std"``.
    """
    bins = list(tables)
    methods = []
    for per in tables.values():
        for m in per:
            if m not in methods:
                methods.append(m)
    left, right, top, bottom = 60, 170, 40, 60
    plot_w = width - left - right
    plot_h = height - top - bottom
    peak = 0.0
    for per in tables.values():
        for s in per.values():
            v = s[metric] + s.get(metric + "_std", 0.0)
            if v == v:
                peak = max(peak, v)
    peak = peak or 1.0
    group_w = plot_w / max(len(bins), 1)
    bar_w = group_w * 0.8 / max(len(methods), 1)

    def y(v):
        return top + plot_h * (1.0 - v / peak)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>',
        f'<text x="16" y="{top + plot_h / 2:.1f}" font-size="12" transform="rotate(-90 16 '
        f'{top + plot_h / 2:.1f})" text-anchor="middle">{escape(ylabel)}</text>',
    ]
    for t in range(5):
        v = peak * t / 4
        out.append(f'<text x="{left - 6}" y="{y(v) + 4:.1f}" font-size="10" text-anchor="end">{v:.3g}</text>')
    for gi, b in enumerate(bins):
        x0 = left + gi * group_w + group_w * 0.1
        for mi, m in enumerate(methods):
            s = tables[b].get(m)
            if s is None or s[metric] != s[metric]:
                continue
            v, sd = s[metric], s.get(metric + "_std", 0.0)
            x = x0 + mi * bar_w
            color = PALETTE[mi % len(PALETTE)]
            out.append(f'<rect x="{x:.1f}" y="{y(v):.1f}" width="{bar_w * 0.9:.1f}" '
                       f'height="{top + plot_h - y(v):.1f}" fill="{color}"/>')
            cx = x + bar_w * 0.45
            out.append(f'<line x1="{cx:.1f}" y1="{y(max(v - sd, 0)):.1f}" x2="{cx:.1f}" '
                       f'y2="{y(v + sd):.1f}" stroke="black"/>')
        out.append(f'<text x="{left + (gi + 0.5) * group_w:.1f}" y="{top + plot_h + 18}" '
                   f'font-size="11" text-anchor="middle">{escape(str(b))}</text>')
    for mi, m in enumerate(methods):
        ly = top + 10 + mi * 18
        lx = left + plot_w + 15
        out.append(f'<rect x="{lx}" y="{ly - 9}" width="10" height="10" fill="{PALETTE[mi % len(PALETTE)]}"/>')
        out.append(f'<text x="{lx + 15}" y="{ly}" font-size="11">{escape(m)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
