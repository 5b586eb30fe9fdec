"""Access to the prompt templates shipped under ``templates/``."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from string import Template


@lru_cache(maxsize=None)
def load(name: str) -> dict:
    text = resources.files("trpgeval").joinpath("templates", f"{name}.json").read_text(encoding="utf-8")
    return json.loads(text)


def render(template: str, **values: object) -> str:
    return Template(template).substitute({k: str(v) for k, v in values.items()})


def harness(key: str, **values: object) -> str:
    return render(load("harness_prompts")[key], **values)
