"""Prompt templates shipped as editable text files.

Templates use ``string.Template`` placeholders (``$name``). A directory named
by ``DATASETAGENT_PROMPT_DIR`` overrides the packaged copies file by file.
"""

from __future__ import annotations

import os
from importlib import resources
from pathlib import Path
from string import Template

PROMPT_DIR_ENV = "DATASETAGENT_PROMPT_DIR"


def load_prompt(name: str) -> str:
    override = os.environ.get(PROMPT_DIR_ENV)
    if override:
        path = Path(override) / f"{name}.txt"
        if path.is_file():
            return path.read_text()
    return resources.files("datasetagent").joinpath(f"prompts/{name}.txt").read_text()


def render_prompt(name: str, **values) -> str:
    return Template(load_prompt(name)).substitute({k: str(v) for k, v in values.items()})


def between(text: str, tag: str) -> str | None:
    """The text enclosed by ``<<<TAG`` and ``TAG>>>`` markers, if present."""
    start = text.find(f"<<<{tag}\n")
    end = text.find(f"\n{tag}>>>")
    if start < 0 or end < start:
        return None
    return text[start + len(tag) + 4 : end]
