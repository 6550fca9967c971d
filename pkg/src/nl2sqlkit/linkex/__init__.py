"""SQL parsing and gold schema-link extraction."""

from .extract import LinkFailure, build_gold_links, extract_links
from .link import (
    EMPTY_LINK,
    SchemaLink,
    close_foreign_keys,
    link_from_json,
    link_to_json,
    quote_ident,
    restrict_link,
    serialize_link,
)
from .parser import parse_sql

__all__ = [
    "EMPTY_LINK",
    "LinkFailure",
    "SchemaLink",
    "build_gold_links",
    "close_foreign_keys",
    "extract_links",
    "link_from_json",
    "link_to_json",
    "parse_sql",
    "quote_ident",
    "restrict_link",
    "serialize_link",
]
