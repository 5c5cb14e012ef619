"""Trace exporter: bridges transformer checkpoints to the dagcd trace format."""
from .errors import ExportUnsupported
from .export import ExportJob, ExportResult, export_traces
from .templates import PromptTemplate, get_template, list_templates, render_template

__version__ = "0.1.0"

__all__ = [
    "ExportJob",
    "ExportResult",
    "ExportUnsupported",
    "PromptTemplate",
    "export_traces",
    "get_template",
    "list_templates",
    "render_template",
    "__version__",
]
