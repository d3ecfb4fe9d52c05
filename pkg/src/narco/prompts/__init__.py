"""Versioned prompt templates.

Templates use ``string.Template`` placeholders (``$prior``) so story text
containing braces is passed through untouched. Changing a template's wording
means adding a new ``.vN.txt`` file and bumping :data:`VERSIONS`.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache
from importlib import resources
from string import Template

VERSIONS = {
    "qg_turn1": "v1",
    "qg_turn2": "v1",
    "verify": "v1",
    "relation_score": "v1",
    "qa_system": "v1",
    "qa": "v1",
    "format_reminder": "v1",
}


@lru_cache(maxsize=None)
def text(name: str) -> str:
    version = VERSIONS[name]
    return resources.files(__name__).joinpath(f"{name}.{version}.txt").read_text(encoding="utf-8").strip()


def render(name: str, **slots) -> str:
    return Template(text(name)).substitute(**{k: str(v) for k, v in slots.items()})


def digest(*names: str) -> str:
    h = hashlib.sha256()
    for name in sorted(names or VERSIONS):
        h.update(f"{name}.{VERSIONS[name]}\n".encode())
        h.update(text(name).encode("utf-8"))
    return h.hexdigest()[:16]
