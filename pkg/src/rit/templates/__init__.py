"""Editable request templates for the language-model port."""
from functools import lru_cache
from importlib import resources
from string import Template


@lru_cache(maxsize=None)
def load(name: str) -> Template:
    text = resources.files(__name__).joinpath(f"{name}.txt").read_text(encoding="utf-8")
    return Template(text)


def render(name: str, **values) -> str:
    return load(name).substitute(**values).rstrip("\n")
