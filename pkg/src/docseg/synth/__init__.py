"""Synthetic document generator: layout, rendering, and audits."""

from .generate import (
    CLASS_INDEX,
    CLASS_NAMES,
    ELEMENT_CLASSES,
    TEXT_CLASSES,
    Corpora,
    DocumentPage,
    GeneratorConfig,
    PageSentence,
    TemplateLayout,
    audit_page,
    bundled_template,
    class_presence,
    config_digest,
    generate_from_template,
    generate_page,
    load_corpora,
    load_template,
)

__all__ = [
    "CLASS_INDEX",
    "CLASS_NAMES",
    "ELEMENT_CLASSES",
    "TEXT_CLASSES",
    "Corpora",
    "DocumentPage",
    "GeneratorConfig",
    "PageSentence",
    "TemplateLayout",
    "audit_page",
    "bundled_template",
    "class_presence",
    "config_digest",
    "generate_from_template",
    "generate_page",
    "load_corpora",
    "load_template",
]
