"""Versioned prompt templates stored as data files (``data/prompts/<name>.<version>.txt``)."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib.resources import files
from pathlib import Path
from string import Template

from .util import ConvoforgeError


class TemplateError(ConvoforgeError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    system: Template
    user: Template

    def render(self, **values) -> tuple[str, str]:
        try:
            return self.system.substitute(values).strip(), self.user.substitute(values).strip()
        except KeyError as exc:
            raise TemplateError(f"template {self.id} needs a value for {exc}") from None


def parse_template(template_id: str, text: str) -> PromptTemplate:
    sections: dict[str, list[str]] = {}
    current = None
    for line in text.splitlines():
        stripped = line.strip()
        if stripped.startswith("===") and stripped.endswith("==="):
            current = stripped.strip("= ").lower()
            sections[current] = []
        elif current is None:
            continue  # header comments
        else:
            sections[current].append(line)
    if "system" not in sections or "user" not in sections:
        raise TemplateError(f"template {template_id} needs '=== system ===' and '=== user ===' sections")
    return PromptTemplate(template_id, Template("\n".join(sections["system"])), Template("\n".join(sections["user"])))


@lru_cache(maxsize=None)
def load_template(template_id: str, directory: str | None = None) -> PromptTemplate:
    """Load ``template_id`` (e.g. ``turn_doctor.v1``) from ``directory`` or the bundled set."""
    if directory is not None:
        path = Path(directory) / f"{template_id}.txt"
        if not path.exists():
            raise TemplateError(f"no prompt template {template_id!r} in {directory}")
        text = path.read_text(encoding="utf-8")
    else:
        res = files("convoforge.data.prompts").joinpath(f"{template_id}.txt")
        if not res.is_file():
            raise TemplateError(f"no bundled prompt template {template_id!r}")
        text = res.read_text(encoding="utf-8")
    return parse_template(template_id, text)
