"""Render experiment and ablation JSON reports as text tables or Word documents."""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional

from docx import Document
from docx.oxml import OxmlElement
from docx.oxml.ns import qn

from pcrecourse.components import styles
from pcrecourse.utils.logger import logger
from pcrecourse.utils.paths import ensure_dir

METRIC_COLUMNS = [
    ("validity", "Validity %"),
    ("actionability", "Action. %"),
    ("causality", "Causal %"),
    ("nll", "NLL"),
    ("similarity", "Similarity"),
    ("sparsity", "Sparsity"),
    ("median_time", "Time (s)"),
    ("mean_yhat", "mean ŷ"),
    ("alt_yhat", "alt ŷ"),
]


def load_report(path) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        logger.error(f"Error: report {path} not found")
        raise
    except json.JSONDecodeError:
        logger.error(f"Error: Invalid JSON format in {path}")
        raise


def report_tables(report: Dict[str, Any]) -> Dict[str, List[List[str]]]:
    """Named tables (header row first) for an experiment or ablation report."""
    header = ["Run"] + [label for _, label in METRIC_COLUMNS]
    if "rows" in report:
        rows = [header]
        for row in report["rows"]:
            rows.append([f"{row['name']} (pre-LS)"] + _cells(row["pre"]))
            rows.append([f"{row['name']} (+LS)"] + _cells(row["post"]))
        return {"Ablation": rows}
    if "aggregate" not in report:
        raise ValueError("Missing required field: aggregate")

    tables = {
        "Summary over folds": [
            header,
            ["PAR"] + _cells(report["aggregate"]["pre"]),
            ["PAR (+LS)"] + _cells(report["aggregate"]["post"]),
        ]
    }
    fold_rows = [["Fold", "tau", "denied", "coverage", "fidelity", "Δ validity", "Δ NLL", "Δ sparsity", "Δ similarity"]]
    for fold in report.get("folds", []):
        deltas = fold["deltas"]
        fold_rows.append(
            [
                str(fold["fold"]),
                f"{fold['tau']:.2f}",
                str(fold["n_denied"]),
                f"{fold['diagnostics']['coverage']:.4f}",
                f"{fold['diagnostics']['fidelity']:.4f}",
                f"{deltas['validity']:+.2f}",
                f"{deltas['nll']:+.2f}",
                f"{deltas['sparsity']:+.2f}",
                f"{deltas['similarity']:+.2f}",
            ]
        )
    tables["Per fold"] = fold_rows
    return tables


def format_text(tables: Dict[str, List[List[str]]]) -> str:
    """Fixed-width rendering of :func:`report_tables`."""
    blocks = []
    for name, rows in tables.items():
        widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
        lines = [name, ""]
        for n, row in enumerate(rows):
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
            if n == 0:
                lines.append("  ".join("-" * w for w in widths))
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


class ReportDocument:
    """Word document with one table per report block."""

    def __init__(self, output_dir: Path = Path(".")):
        self.doc = Document()
        self.output_dir = ensure_dir(output_dir)
        styles.apply_styles_to_document(self.doc)

    def set_cell_border(self, cell, **kwargs):
        """Set cell borders, e.g. ``set_cell_border(cell, bottom="single")``."""
        tcPr = cell._tc.get_or_add_tcPr()
        borders = OxmlElement("w:tcBorders")
        tcPr.append(borders)
        for key, value in kwargs.items():
            if key in ("top", "left", "bottom", "right"):
                border = OxmlElement(f"w:{key}")
                border.set(qn("w:val"), value)
                border.set(qn("w:sz"), "8")
                border.set(qn("w:space"), "0")
                border.set(qn("w:color"), "auto")
                borders.append(border)

    def shade_cell(self, cell, fill: str):
        shading = OxmlElement("w:shd")
        shading.set(qn("w:val"), "clear")
        shading.set(qn("w:color"), "auto")
        shading.set(qn("w:fill"), fill)
        cell._tc.get_or_add_tcPr().append(shading)

    def add_table(self, heading: str, data: List[List[str]], header_rows: int = 1) -> None:
        if not data:
            return
        self.doc.add_heading(heading, level=2)
        table = self.doc.add_table(rows=len(data), cols=len(data[0]))
        table.style = "Table Grid"
        for i, row in enumerate(data):
            for j, text in enumerate(row):
                cell = table.cell(i, j)
                cell.text = text
                if i < header_rows:
                    self.shade_cell(cell, styles.COLORS["header_fill"])
                    self.set_cell_border(cell, bottom="single")
                    for paragraph in cell.paragraphs:
                        for run in paragraph.runs:
                            run.font.bold = True
                            run.font.size = styles.SIZES["small"]

    def add_note(self, text: str) -> None:
        self.doc.add_paragraph(text, style="Report Note")

    def save(self, file_name: str) -> Path:
        path = self.output_dir / file_name
        self.doc.save(path)
        logger.info(f"Document saved successfully to {path}")
        return path


def write_docx(report: Dict[str, Any], out_path, title: Optional[str] = None) -> Path:
    """Render a report to a .docx file."""
    out_path = Path(out_path)
    document = ReportDocument(out_path.parent)
    try:
        document.doc.add_heading(title or "Recourse experiment report", 0)
        config = report.get("config")
        if config:
            document.add_note(f"Dataset {config['dataset']['csv']}, seed {config['seed']}")
        for name, rows in report_tables(report).items():
            document.add_table(name, rows)
        document.add_note("Values are mean ± sample standard deviation over folds.")
        return document.save(out_path.name)
    except Exception as e:
        logger.error(f"Error writing report document: {str(e)}")
        raise


def _cells(block: Dict[str, Any]) -> List[str]:
    cells = []
    for key, _ in METRIC_COLUMNS:
        value = block.get(key)
        if value is None:
            cells.append("--")
        else:
            cells.append(f"{value['mean']:.2f} ± {value['std']:.2f}")
    return cells
