from __future__ import annotations

from jinja2 import Environment, select_autoescape

from .reports import ComputedReport

_env = Environment(autoescape=select_autoescape(default=True, default_for_string=True))

_TEMPLATE = _env.from_string("""<!doctype html>
<html lang="en">
<head>
<meta charset="utf-8">
<title>Reproducibility report: {{ r.name }}</title>
<style>
  body { font-family: sans-serif; margin: 2rem auto; max-width: 70rem; color: #1f2933; }
  table { border-collapse: collapse; width: 100%; font-size: 0.9rem; }
  th, td { border-bottom: 1px solid #d9e2ec; padding: 0.3rem 0.5rem; text-align: left; }
  .mono { font-family: monospace; }
  .reproducible { color: #1b7f3b; }
  .nonreproducible { color: #b42318; font-weight: bold; }
  .unconfirmed { color: #8a6d00; }
  .unknown { color: #616e7c; }
  .totals span { margin-right: 1.5rem; }
</style>
</head>
<body>
<h1>{{ r.name }}</h1>
<p>{{ r.description }}</p>
<p>Generated {{ generated_at }}</p>
<h2>Summary</h2>
<p class="totals">
{% for status, n in totals %}<span class="{{ status }}">{{ status }}: <b id="total-{{ status }}">{{ n }}</b></span>
{% endfor %}</p>
<p>Reproducibility rate: <b id="rate">{{ rate_text }}</b>{% if pct_text %} ({{ pct_text }}){% endif %}</p>
<h2>Regressions</h2>
{% if regressions %}
<table>
<tr><th>package</th><th>reproducible</th><th>nonreproducible</th></tr>
{% for g in regressions %}
<tr><td>{{ g.stem }}</td><td class="mono">{{ g.earlier_name }} ({{ g.earlier_drv_hash }})</td><td class="mono">{{ g.later_name }} ({{ g.later_drv_hash }})</td></tr>
{% endfor %}
</table>
{% else %}
<p>None detected.</p>
{% endif %}
<h2>Derivations</h2>
<table>
<tr><th>name</th><th>derivation</th><th>status</th><th>builders</th><th>last seen</th></tr>
{% for row in rows %}
<tr><td>{{ row.name }}</td><td class="mono">{{ row.drv_hash }}</td><td class="{{ row.status }}">{{ row.status }}</td><td>{{ row.distinct_builders }}</td><td>{{ row.last_seen }}</td></tr>
{% endfor %}
</table>
</body>
</html>
""")


def format_rate(rate: float | None) -> str:
    return "n/a" if rate is None else f"{rate:.4g}"


def render_report_html(report: ComputedReport) -> str:
    """Static dashboard page for a computed report, built from its JSON form."""
    doc = report.to_json()
    return _TEMPLATE.render(
        r=doc,
        generated_at=doc["generated_at"],
        totals=list(doc["totals"].items()),
        rate_text=format_rate(report.rate),
        pct_text=None if report.rate is None else f"{report.rate * 100:.1f}%",
        regressions=doc["regressions"],
        rows=doc["rows"],
    )
