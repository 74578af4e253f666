"""
Report generation for nlmcflow: PDF (fpdf2) and HTML.

Charts (matplotlib): matrix error versus time for every oversampling size,
and final fine cell averages next to each coarse solution.
File names carry no timestamps so reruns overwrite the same report.
"""
from __future__ import annotations

import os
from datetime import datetime, timezone
from typing import Any, Dict, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from fpdf import FPDF  # noqa: E402

from .config import _ensure_dirs, _setup_logger  # noqa: E402


REPORT_NAME = "nlmc_report"
# Fixed PDF creation date keeps reruns byte-identical
CREATION_DATE = datetime(2000, 1, 1, tzinfo=timezone.utc)


class ReportGenerator:
    def __init__(self, reports_dir: str, logs_dir: str = "logs") -> None:
        self.reports_dir = reports_dir
        self.charts_dir = os.path.join(reports_dir, "charts")
        _ensure_dirs([self.reports_dir, self.charts_dir])
        self.logger = _setup_logger(logs_dir)

    def _path(self, name: str, ext: str) -> str:
        return os.path.join(self.reports_dir, f"{name}.{ext}")

    def generate_reports(self, table: pd.DataFrame, means: pd.DataFrame, meta: Dict[str, Any],
                         coarse_shape: Tuple[int, int]) -> Dict[str, str]:
        """Create PDF and HTML reports and return their paths."""
        try:
            charts = {
                "errors": self._error_chart(table),
                "maps": self._pressure_maps(means, coarse_shape),
            }
            pdf_path = self._create_pdf(table, meta, charts)
            html_path = self._create_html(table, meta, charts)
            self.logger.info("Reports generated: PDF=%s, HTML=%s", pdf_path, html_path)
            return {"pdf": pdf_path, "html": html_path}
        except Exception as e:
            self.logger.exception("Failed to generate reports: %s", e)
            raise

    def _error_chart(self, table: pd.DataFrame) -> str:
        fig, ax = plt.subplots(figsize=(7, 4))
        for s, group in table.groupby("s", sort=True):
            ax.plot(group["time"], group["matrix_error_pct"], marker="o", label=f"s = {s}")
        ax.set_title("Relative error of coarse-cell mean pressure")
        ax.set_xlabel("time")
        ax.set_ylabel("error (%)")
        ax.legend()
        fig.tight_layout()
        path = os.path.join(self.charts_dir, "errors.png")
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
        self.logger.info("Error chart saved: %s", path)
        return path

    def _pressure_maps(self, means: pd.DataFrame, coarse_shape: Tuple[int, int]) -> str:
        nx, ny = coarse_shape
        columns = ["fine"] + [c for c in means.columns if c.startswith("s")]
        fig, axes = plt.subplots(1, len(columns), figsize=(3.2 * len(columns), 3.2), squeeze=False)
        lo = float(means[columns].min().min())
        hi = float(means[columns].max().max())
        for ax, col in zip(axes[0], columns):
            img = ax.imshow(
                np.asarray(means[col]).reshape(ny, nx), origin="lower", vmin=lo, vmax=hi, cmap="viridis"
            )
            ax.set_title("fine average" if col == "fine" else f"NLMC {col.replace('s', 's = ')}")
            ax.set_xticks([])
            ax.set_yticks([])
        fig.colorbar(img, ax=axes[0].tolist(), shrink=0.8)
        path = os.path.join(self.charts_dir, "pressure_maps.png")
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
        return path

    def _create_pdf(self, table: pd.DataFrame, meta: Dict[str, Any], charts: Dict[str, str]) -> str:
        pdf = FPDF()
        pdf.set_creation_date(CREATION_DATE)
        pdf.set_auto_page_break(auto=True, margin=15)
        pdf.add_page()
        pdf.set_font("Helvetica", size=16)
        pdf.cell(0, 10, f"NLMC Upscaling Report: {meta.get('name', '')}", new_x="LMARGIN", new_y="NEXT")

        pdf.set_font("Helvetica", size=11)
        for key, value in meta.items():
            if key != "name":
                pdf.cell(0, 6, f"{key.replace('_', ' ')}: {value}", new_x="LMARGIN", new_y="NEXT")

        if not table.empty:
            pdf.ln(4)
            pdf.set_font("Helvetica", style="B", size=11)
            pdf.cell(0, 8, "Relative errors (percent)", new_x="LMARGIN", new_y="NEXT")
            pdf.set_font("Courier", size=8)
            header = f"{'s':>3} {'step':>5} {'time':>8} {'matrix %':>10} {'fracture %':>11} {'DOF_f':>8} {'DOF_c':>7}"
            pdf.cell(0, 5, header, new_x="LMARGIN", new_y="NEXT")
            for row in table.itertuples():
                pdf.cell(0, 5, (
                    f"{row.s:>3} {row.step:>5} {row.time:>8.4g} {row.matrix_error_pct:>10.4f} "
                    f"{row.fracture_error_pct:>11.4f} {row.dof_f:>8} {row.dof_c:>7}"
                ), new_x="LMARGIN", new_y="NEXT")
            timing = table.groupby("s", sort=True)[["fine_seconds", "coarse_seconds"]].first()
            pdf.ln(2)
            pdf.set_font("Helvetica", size=9)
            for s, t in timing.iterrows():
                pdf.cell(0, 5, f"s = {s}: fine solve {t.fine_seconds:.2f} s, coarse solve {t.coarse_seconds:.2f} s",
                         new_x="LMARGIN", new_y="NEXT")

        for chart in charts.values():
            if chart and os.path.exists(chart):
                pdf.ln(4)
                pdf.image(chart, w=180)

        pdf_path = self._path(REPORT_NAME, "pdf")
        pdf.output(pdf_path)
        return pdf_path

    def _create_html(self, table: pd.DataFrame, meta: Dict[str, Any], charts: Dict[str, str]) -> str:
        css = """
            body { font-family: Arial, sans-serif; margin: 20px; }
            h1 { color: #222; }
            table { border-collapse: collapse; margin-top: 10px; }
            th, td { border: 1px solid #ccc; padding: 6px 8px; font-size: 12px; text-align: right; }
            th { background: #f5f5f5; }
        """
        facts = "".join(f"<li>{k.replace('_', ' ')}: {v}</li>" for k, v in meta.items() if k != "name")
        html_table = table.to_html(index=False, float_format=lambda v: f"{v:.4g}") if not table.empty else ""
        images = "".join(
            f'<img src="{os.path.relpath(path, self.reports_dir)}" style="max-width: 100%;" />'
            for path in charts.values() if path
        )

        html = f"""
        <html>
          <head><style>{css}</style></head>
          <body>
            <h1>NLMC Upscaling Report: {meta.get('name', '')}</h1>
            <ul>{facts}</ul>
            <h2>Relative errors (percent)</h2>
            {html_table}
            <h2>Charts</h2>
            {images}
          </body>
        </html>
        """

        html_path = self._path(REPORT_NAME, "html")
        with open(html_path, "w", encoding="utf-8") as f:
            f.write(html)
        return html_path


__all__ = ["ReportGenerator"]
