"""Prompt templates: plain text files with named ``{placeholder}`` slots."""

from __future__ import annotations

import hashlib
import re
from importlib import resources
from pathlib import Path

PLACEHOLDERS = ("instruction", "question", "hint", "schema", "link")
_SLOT = re.compile(r"\{(" + "|".join(PLACEHOLDERS) + r")\}")

DEFAULT_TEMPLATES = (
    "link_nd",
    "link_chunked",
    "sql_direct",
    "sql_trusting",
    "sql_non_trusting",
    "sql_non_trusting_link_only",
)


class PromptTemplate:
    """A template whose only special syntax is the five named slots.

    Any other braces are literal text, and substituted values are never
    re-scanned, so schema text containing ``{...}`` is safe.
    """

    def __init__(self, text: str, name: str = "inline"):
        self.text = text
        self.name = name
        self.sha256 = hashlib.sha256(text.encode("utf-8")).hexdigest()

    @classmethod
    def from_file(cls, path) -> "PromptTemplate":
        path = Path(path)
        return cls(path.read_text(encoding="utf-8"), name=str(path))

    @classmethod
    def default(cls, name: str) -> "PromptTemplate":
        if name not in DEFAULT_TEMPLATES:
            raise KeyError(f"no default template {name!r}")
        text = resources.files("nl2sqlkit").joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")
        return cls(text, name=f"default:{name}")

    @property
    def slots(self) -> set[str]:
        return set(_SLOT.findall(self.text))

    def render(self, **fields: str) -> str:
        unknown = set(fields) - set(PLACEHOLDERS)
        if unknown:
            raise KeyError(f"unknown template fields: {sorted(unknown)}")
        return _SLOT.sub(lambda m: fields.get(m.group(1)) or "", self.text)

    def __repr__(self) -> str:
        return f"PromptTemplate({self.name!r}, sha256={self.sha256[:12]})"
