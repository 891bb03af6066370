"""Prompt templates shipped as package data."""

from importlib import resources

from ..errors import TemplateError


def load_template(name: str) -> str:
    try:
        return resources.files(__package__).joinpath(name).read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise TemplateError(f"unknown template {name!r}") from exc


class StrictFormatMap(dict):
    """format_map helper that raises on unresolved placeholders."""

    def __missing__(self, key):
        raise TemplateError(f"unresolved placeholder {key!r}")
