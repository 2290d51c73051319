"""Parameter files: ``[section]`` headers, ``key = value`` lines, ``#`` comments.

Sections nest through dotted headers (``[solver.inner]``) and lookups use the
full dotted path (``solver.inner.tol``). Values are kept as raw strings and
coerced by the typed accessors, so keys the program never asks about survive
untouched; ``unused_keys()`` reports them for a warn-on-unused pass at exit.
Lookups never mutate the tree (the accessors only note the path as read).
"""

import re

from .errors import ConfigError, ParamParseError

_HEADER = re.compile(r"^\[([A-Za-z0-9_.-]+)\]$")
_KEY = re.compile(r"^[A-Za-z0-9_.-]+$")
_REQUIRED = object()

_BOOL = {
    "true": True, "yes": True, "on": True, "1": True,
    "false": False, "no": False, "off": False, "0": False,
}


class ParamTree:
    """Flat dotted-path view of a parsed parameter file."""

    def __init__(self):
        self._values = {}   # path -> (raw string, line number)
        self._read = set()

    def _set(self, path, raw, line):
        if path in self._values:
            first = self._values[path][1]
            raise ParamParseError(
                f"duplicate key '{path}' (first set on line {first})", line=line)
        self._values[path] = (raw, line)

    # -- lookup ----------------------------------------------------------

    def __contains__(self, path):
        return path in self._values

    def keys(self):
        return sorted(self._values)

    def unused_keys(self):
        return sorted(set(self._values) - self._read)

    def get(self, path, default=_REQUIRED):
        if path in self._values:
            self._read.add(path)
            return self._values[path][0]
        if default is _REQUIRED:
            raise ConfigError(f"missing required parameter '{path}'")
        return default

    def _coerce(self, path, default, conv, kind):
        raw = self.get(path, default)
        if not isinstance(raw, str):
            return raw          # default passed through, already typed
        try:
            return conv(raw)
        except (ValueError, KeyError):
            line = self._values[path][1]
            raise ConfigError(
                f"parameter '{path}' = '{raw}' (line {line}) is not {kind}") from None

    def get_str(self, path, default=_REQUIRED):
        return self.get(path, default)

    def get_int(self, path, default=_REQUIRED):
        return self._coerce(path, default, lambda s: int(s, 10), "an integer")

    def get_float(self, path, default=_REQUIRED):
        return self._coerce(path, default, float, "a real number")

    def get_bool(self, path, default=_REQUIRED):
        return self._coerce(path, default, lambda s: _BOOL[s.lower()], "a boolean")

    def get_floats(self, path, default=_REQUIRED):
        def conv(s):
            toks = [t for t in re.split(r"[,\s]+", s.strip()) if t]
            return [float(t) for t in toks]
        return self._coerce(path, default, conv, "a real list")

    def get_ints(self, path, default=_REQUIRED):
        def conv(s):
            toks = [t for t in re.split(r"[,\s]+", s.strip()) if t]
            return [int(t, 10) for t in toks]
        return self._coerce(path, default, conv, "an integer list")


def parse_params(text):
    """Parse parameter-file text into a ParamTree.

    Raises ParamParseError (a ConfigError) with the 1-based line number on
    duplicate keys, malformed lines, and malformed section headers.
    """
    tree = ParamTree()
    prefix = ""
    for lineno, rawline in enumerate(text.splitlines(), start=1):
        line = rawline.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            m = _HEADER.match(line)
            if m is None or not all(m.group(1).split(".")):
                raise ParamParseError(f"malformed section header '{line}'", line=lineno)
            prefix = m.group(1) + "."
            continue
        if "=" not in line:
            raise ParamParseError(f"expected 'key = value', got '{line}'", line=lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        if not _KEY.match(key):
            raise ParamParseError(f"malformed key '{key}'", line=lineno)
        tree._set(prefix + key, value.strip(), lineno)
    return tree


def read_params(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_params(fh.read())
