"""Prompt templates and the request marker line prepended to every prompt."""

from __future__ import annotations

import re
import string
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import TemplateError

TEMPLATE_IDS = ("top_down", "bottom_up", "uniqueness", "verify")
EMPTY_LIST = "(none)"
WHOLE_IMAGE = "The entire image."

_MARKER_RE = re.compile(r'<request template="([^"]*)" image="([^"]*)" node="([^"]*)"/>')


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    body: str

    @property
    def slots(self) -> set[str]:
        names = set()
        for m in string.Template.pattern.finditer(self.body):
            name = m.group("named") or m.group("braced")
            if name:
                names.add(name)
        return names

    def render(self, **values) -> str:
        missing = self.slots - values.keys()
        if missing:
            raise TemplateError(f"template {self.template_id!r} needs slot(s) {sorted(missing)}")
        return string.Template(self.body).substitute(values)


def load_templates(prompts_dir: str | Path | None = None) -> dict[str, PromptTemplate]:
    """Shipped templates, each overridable by ``<prompts_dir>/<id>.txt``."""
    out = {}
    pkg = resources.files("ureca_forge") / "prompts"
    for tid in TEMPLATE_IDS:
        override = Path(prompts_dir) / f"{tid}.txt" if prompts_dir else None
        if override is not None and override.is_file():
            body = override.read_text(encoding="utf-8")
        else:
            body = (pkg / f"{tid}.txt").read_text(encoding="utf-8")
        out[tid] = PromptTemplate(tid, body)
    return out


def describe_list(items) -> str:
    items = [s.strip() for s in items if s and s.strip()]
    if not items:
        return EMPTY_LIST
    return "\n    ".join(f"{i}. {s}" for i, s in enumerate(items, 1))


def request_marker(template_id: str, image_id: str, node_id: int) -> str:
    return f'<request template="{template_id}" image="{image_id}" node="{node_id}"/>'


def build_prompt(template: PromptTemplate, image_id: str, node_id: int, **slots) -> str:
    return request_marker(template.template_id, image_id, node_id) + "\n" + template.render(**slots)


def parse_marker(prompt: str) -> tuple[str, str, str] | None:
    """(template_id, image_id, node_id) from a prompt, or None if unmarked."""
    m = _MARKER_RE.search(prompt)
    return (m.group(1), m.group(2), m.group(3)) if m else None
