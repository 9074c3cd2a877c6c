"""
TOON (Token-Oriented Object Notation) reader and writer for grbLMM config
and simulation grid files.

Supported subset:

    boost:
      nu: 0.1
      stopping: cv
    grid:
      tau[3]: 0.4,0.8,1.6
      designs[2]:
        - random_intercepts
        - random_slopes

Lines starting with ``#`` are comments.
"""

import re
from typing import Any, Dict, List, Tuple


class ToonParseError(Exception):
    """Custom exception for TOON parsing errors"""

    pass


_ENTRY = re.compile(
    r'^(?P<key>"(?:[^"\\]|\\.)*"|[A-Za-z_][A-Za-z0-9_.\-]*)'
    r"(?:\[(?P<length>[0-9]+)\])?\s*:\s*(?P<value>.*)$"
)
_INT = re.compile(r"^[-+]?\d+$")
_FLOAT = re.compile(r"^[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?$")
_ESCAPES = {"n": "\n", "r": "\r", "t": "\t", '"': '"', "\\": "\\"}


class ToonParser:
    """Indentation-based TOON parser for objects, inline arrays and list arrays"""

    def __init__(self, strict: bool = True):
        self.strict = strict
        self.lines: List[Tuple[int, str, int]] = []

    def parse(self, content: str) -> Dict[str, Any]:
        """Parse TOON content and return a Python dictionary"""
        self.lines = []
        for lineno, raw in enumerate(content.splitlines(), start=1):
            stripped = raw.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "\t" in raw[: len(raw) - len(raw.lstrip())]:
                raise ToonParseError(f"line {lineno}: tabs are not allowed in indentation")
            indent = len(raw) - len(raw.lstrip(" "))
            self.lines.append((indent, stripped, lineno))

        if not self.lines:
            return {}

        data, pos = self._parse_block(0, -1)
        if pos < len(self.lines):
            raise ToonParseError(f"line {self.lines[pos][2]}: unexpected dedent")
        return data

    def _parse_block(self, pos: int, parent_indent: int) -> Tuple[Dict[str, Any], int]:
        """Parse the object whose entries are indented deeper than parent_indent"""
        result: Dict[str, Any] = {}
        block_indent = None

        while pos < len(self.lines):
            indent, text, lineno = self.lines[pos]
            if indent <= parent_indent:
                break
            if block_indent is None:
                block_indent = indent
            elif indent != block_indent:
                raise ToonParseError(f"line {lineno}: inconsistent indentation")

            match = _ENTRY.match(text)
            if not match:
                raise ToonParseError(f"line {lineno}: expected 'key: value', got {text!r}")

            key = match.group("key")
            if key.startswith('"'):
                key = self._unescape_string(key[1:-1])
            if self.strict and key in result:
                raise ToonParseError(f"line {lineno}: duplicate key {key!r}")
            value = match.group("value").strip()
            pos += 1

            if match.group("length") is not None:
                length = int(match.group("length"))
                if value:
                    items = self._split_inline_values(value, ",")
                else:
                    items, pos = self._parse_list_items(pos, indent)
                if self.strict and len(items) != length:
                    raise ToonParseError(
                        f"line {lineno}: array length mismatch for {key!r}: "
                        f"declared {length}, got {len(items)}"
                    )
                result[key] = items
            elif value:
                result[key] = self._parse_primitive(value)
            elif pos < len(self.lines) and self.lines[pos][0] > indent:
                result[key], pos = self._parse_block(pos, indent)
            else:
                result[key] = {}

        return result, pos

    def _parse_list_items(self, pos: int, parent_indent: int) -> Tuple[List[Any], int]:
        """Parse '- item' lines belonging to an array header"""
        items = []
        while pos < len(self.lines):
            indent, text, lineno = self.lines[pos]
            if indent <= parent_indent:
                break
            if not text.startswith("-"):
                raise ToonParseError(f"line {lineno}: expected '- item' in array")
            items.append(self._parse_primitive(text[1:].strip()))
            pos += 1
        return items, pos

    def _split_inline_values(self, values_str: str, delimiter: str) -> List[Any]:
        """Split inline array values by delimiter, respecting quotes"""
        values = []
        current = ""
        in_quotes = False
        escape_next = False

        for char in values_str:
            if escape_next:
                current += char
                escape_next = False
            elif char == "\\":
                current += char
                escape_next = True
            elif char == '"':
                current += char
                in_quotes = not in_quotes
            elif char == delimiter and not in_quotes:
                values.append(self._parse_primitive(current))
                current = ""
            else:
                current += char

        if in_quotes:
            raise ToonParseError(f"unterminated string in {values_str!r}")
        if current.strip() or values:
            values.append(self._parse_primitive(current))
        return values

    def _parse_primitive(self, token: str) -> Any:
        """Parse a primitive value (string, number, boolean, null)"""
        token = token.strip()

        if len(token) >= 2 and token.startswith('"') and token.endswith('"'):
            return self._unescape_string(token[1:-1])
        if token == "true":
            return True
        if token == "false":
            return False
        if token == "null":
            return None
        if _INT.match(token):
            return int(token)
        if _FLOAT.match(token):
            return float(token)
        return token

    def _unescape_string(self, s: str) -> str:
        """Unescape a quoted TOON string"""
        result = []
        chars = iter(s)
        for char in chars:
            if char != "\\":
                result.append(char)
                continue
            nxt = next(chars, None)
            if nxt is None:
                raise ToonParseError(f"dangling escape in {s!r}")
            result.append(_ESCAPES.get(nxt, nxt))
        return "".join(result)


def load_toon_file(filepath: str, strict: bool = True) -> Dict[str, Any]:
    """Load and parse a TOON file"""
    try:
        with open(filepath, "r", encoding="utf-8") as f:
            content = f.read()
    except FileNotFoundError:
        raise ToonParseError(f"File not found: {filepath}")
    except UnicodeDecodeError as e:
        raise ToonParseError(f"Unicode decode error in {filepath}: {e}")
    return ToonParser(strict).parse(content)


def _format_primitive(value: Any) -> str:
    """Format primitive value for TOON output"""
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    text = str(value)
    needs_quotes = (
        any(c in text for c in ':",\\\n\r\t[]{}#')
        or text.strip() != text
        or text in ("true", "false", "null")
        or bool(_FLOAT.match(text))
        or not text
    )
    if needs_quotes:
        escaped = (
            text.replace("\\", "\\\\")
            .replace('"', '\\"')
            .replace("\n", "\\n")
            .replace("\r", "\\r")
            .replace("\t", "\\t")
        )
        return f'"{escaped}"'
    return text


def _format_key(key: str) -> str:
    """Format key for TOON output"""
    if re.match(r"^[A-Za-z_][A-Za-z0-9_.\-]*$", key):
        return key
    escaped = key.replace("\\", "\\\\").replace('"', '\\"')
    return f'"{escaped}"'


def dump_toon(data: Dict[str, Any], indent: int = 2) -> str:
    """Encode a nested dict of primitives and primitive lists as TOON"""
    lines: List[str] = []

    def _emit(obj: Dict[str, Any], depth: int) -> None:
        pad = " " * (indent * depth)
        for key, value in obj.items():
            if isinstance(value, dict):
                lines.append(f"{pad}{_format_key(key)}:")
                _emit(value, depth + 1)
            elif isinstance(value, (list, tuple)):
                values = ",".join(_format_primitive(v) for v in value)
                lines.append(f"{pad}{_format_key(key)}[{len(value)}]: {values}".rstrip())
            else:
                lines.append(f"{pad}{_format_key(key)}: {_format_primitive(value)}")

    _emit(data, 0)
    return "\n".join(lines) + "\n"


def save_toon_file(data: Dict[str, Any], filepath: str, indent: int = 2) -> None:
    """Save data as a TOON file"""
    with open(filepath, "w", encoding="utf-8") as f:
        f.write(dump_toon(data, indent))
