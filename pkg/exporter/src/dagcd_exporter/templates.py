"""Prompt template catalog.

Each template carries exactly one ``{context}`` slot and one ``{question}``
slot; template 1 is the default. Segments between slots are labeled with the
template role when prompts are tokenized, so the context span can be recovered
position-by-position downstream.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import ExportUnsupported

CONTEXT_SLOT = "{context}"
QUESTION_SLOT = "{question}"

_SLOT_RE = re.compile(r"\{(context|question)\}")


@dataclass(frozen=True)
class PromptTemplate:
    template_id: int
    name: str
    text: str

    def __post_init__(self):
        if self.text.count(CONTEXT_SLOT) != 1:
            raise ExportUnsupported(
                f"template {self.template_id} needs exactly one {CONTEXT_SLOT} slot"
            )
        if self.text.count(QUESTION_SLOT) != 1:
            raise ExportUnsupported(
                f"template {self.template_id} needs exactly one {QUESTION_SLOT} slot"
            )

    def render(self, context: str, question: str) -> str:
        return self.text.replace(CONTEXT_SLOT, context).replace(QUESTION_SLOT, question)

    def segments(self) -> list[tuple[str, str]]:
        """(role, literal-or-slot-name) pieces in prompt order.

        Roles are "template" for literal text and "context"/"question" for the
        two slots; literal pieces keep their exact text.
        """
        out: list[tuple[str, str]] = []
        pos = 0
        for m in _SLOT_RE.finditer(self.text):
            if m.start() > pos:
                out.append(("template", self.text[pos : m.start()]))
            out.append((m.group(1), m.group(0)))
            pos = m.end()
        if pos < len(self.text):
            out.append(("template", self.text[pos:]))
        return out


TEMPLATES: tuple[PromptTemplate, ...] = (
    PromptTemplate(
        1,
        "standard",
        "Answer the question based on the given context.\n"
        "Context: {context}\nQuestion: {question}\nAnswer:",
    ),
    PromptTemplate(
        2,
        "instruction-first",
        "Use only the following context to answer the question.\n"
        "Context: {context}\nQ: {question}\nA:",
    ),
    PromptTemplate(
        3,
        "context-first",
        "Context: {context}\n"
        "Based on the context above, answer the following question.\n"
        "Question: {question}\nAnswer:",
    ),
    PromptTemplate(
        4,
        "passage-query",
        "Read the passage and answer the query.\n"
        "Passage: {context}\nQuery: {question}\nResponse:",
    ),
)

DEFAULT_TEMPLATE_ID = 1


def list_templates() -> tuple[PromptTemplate, ...]:
    return TEMPLATES


def get_template(template_id: int) -> PromptTemplate:
    for t in TEMPLATES:
        if t.template_id == template_id:
            return t
    raise ExportUnsupported(f"unknown template id {template_id}")


def render_template(template_id: int, context: str, question: str) -> str:
    return get_template(template_id).render(context, question)
