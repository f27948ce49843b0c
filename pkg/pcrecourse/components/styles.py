"""Word styles for experiment reports."""

from docx.enum.style import WD_STYLE_TYPE
from docx.enum.text import WD_ALIGN_PARAGRAPH
from docx.shared import Pt, RGBColor

COLORS = {
    "primary": RGBColor(0, 0, 0),
    "secondary": RGBColor(128, 128, 128),
    "header_fill": "D9E2F3",  # table header shading, hex for w:shd
}

FONTS = {
    "body": "Calibri",
    "heading": "Calibri",
}

SIZES = {
    "small": Pt(9),
    "normal": Pt(10),
    "title": Pt(18),
    "heading1": Pt(14),
    "heading2": Pt(12),
}


def create_style(doc, name: str, base_style: str = "Normal", style_type=WD_STYLE_TYPE.PARAGRAPH):
    """Return style ``name``, adding it on top of ``base_style`` if missing."""
    try:
        style = doc.styles.add_style(name, style_type)
        style.base_style = doc.styles[base_style]
        return style
    except ValueError:
        return doc.styles[name]


def apply_font_format(style, **kwargs):
    for key, value in kwargs.items():
        if key == "color":
            style.font.color.rgb = value
        else:
            setattr(style.font, key, value)


def apply_paragraph_format(style, **kwargs):
    for key, value in kwargs.items():
        setattr(style.paragraph_format, key, value)


def apply_styles_to_document(doc):
    """Compact styles suited to metric tables."""
    for section in doc.sections:
        section.top_margin = Pt(54)
        section.bottom_margin = Pt(54)
        section.left_margin = Pt(54)
        section.right_margin = Pt(54)

    title = doc.styles["Title"]
    apply_font_format(title, name=FONTS["heading"], size=SIZES["title"], bold=True, color=COLORS["primary"])
    apply_paragraph_format(title, alignment=WD_ALIGN_PARAGRAPH.LEFT, space_after=Pt(12))

    for level in (1, 2):
        heading = doc.styles[f"Heading {level}"]
        apply_font_format(heading, name=FONTS["heading"], size=SIZES[f"heading{level}"], bold=True)
        apply_paragraph_format(heading, space_before=Pt(12), space_after=Pt(6))

    normal = doc.styles["Normal"]
    apply_font_format(normal, name=FONTS["body"], size=SIZES["normal"])
    apply_paragraph_format(normal, space_after=Pt(4))

    note = create_style(doc, "Report Note")
    apply_font_format(note, name=FONTS["body"], size=SIZES["small"], italic=True, color=COLORS["secondary"])
