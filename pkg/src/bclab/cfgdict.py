#--------------------------------------------------------------------------------------------------#
#  bclab: a desk-scale laboratory for backdoor injection by adversarial weight perturbation        #
#  Licensed under the BSD 2-clause license.                                                        #
#--------------------------------------------------------------------------------------------------#
#
"""
Contains an event-driven builder for nested configuration dictionaries and the
walker turning them back into events.
"""
import re
from typing import Any, Dict, Iterator, List, Tuple, Union

from bclab.common import ConfigError
from bclab.eventhandler import ConfigEventHandler, ConfigEventPrinter

_ItemType = Union[float, int, bool, str]

_DataType = Union[_ItemType, List[_ItemType]]

# Characters which force quoting when a string is written back
_SPECIAL_CHARS = "{}=;#<\"' \t\n"

# Pattern to transform config values into actual Python data types
_TOKEN_PATTERN = re.compile(r"""
\s*
(?:
    (?P<int>[+-]?[0-9]+)(?=\s|$)
|
    (?P<float>[+-]?(?:[0-9]+\.?[0-9]*|\.[0-9]+)(?:[eE][+-]?[0-9]+)?)(?=\s|$)
|
    (?P<logical>(?i:yes|no|true|false))(?=\s|$)
|
    (?P<quote>['"])(?P<qstr>.*?)(?P=quote)
|
    (?P<str>\S+)
)
""", re.VERBOSE)


class ConfigDictBuilder(ConfigEventHandler):
    """Event handler building a nested Python dictionary.

    Assigning an already present key replaces its value, opening an already
    present section continues it, so later definitions override earlier ones.
    """

    def __init__(self):
        super().__init__()
        self._cfgdict: dict = {}
        self._curblock: dict = self._cfgdict
        self._parentblocks: List[dict] = []


    @property
    def cfgdict(self) -> dict:
        """The dictionary which has been built"""
        return self._cfgdict


    def open_section(self, name, line):
        block = self._curblock.get(name)
        if not isinstance(block, dict):
            block = {}
            self._curblock[name] = block
        self._parentblocks.append(self._curblock)
        self._curblock = block


    def close_section(self, name):
        if not self._parentblocks:
            raise ConfigError(f"Section '{name}' closed without being opened")
        self._curblock = self._parentblocks.pop(-1)


    def add_value(self, name, text, line):
        self._curblock[name] = text_to_data(text)


def text_to_data(txt: str) -> _DataType:
    """Converts the text of a value to a Python scalar or list.

    Examples:
        >>> text_to_data("0.01")
        0.01
        >>> text_to_data("13 15 0 1.0")
        [13, 15, 0, 1.0]
        >>> text_to_data("'my run' yes")
        ['my run', True]
    """
    data = []
    for match in _TOKEN_PATTERN.finditer(txt.strip()):
        if match.group("int") is not None:
            data.append(int(match.group("int")))
        elif match.group("float") is not None:
            data.append(float(match.group("float")))
        elif match.group("logical") is not None:
            data.append(match.group("logical").lower() in ("yes", "true"))
        elif match.group("quote") is not None:
            data.append(match.group("qstr"))
        elif match.group("str") is not None:
            data.append(match.group("str"))
    if len(data) == 1:
        return data[0]
    return data


class ConfigDictWalker:
    """Walks through a Python dictionary and triggers configuration events.

    Args:
        eventhandler: Event handler dealing with the events generated while
            walking through the dictionary. When not specified, the events
            are printed.
    """

    def __init__(self, eventhandler: ConfigEventHandler = None):
        self._eventhandler = ConfigEventPrinter() if eventhandler is None else eventhandler


    def walk(self, dictobj: dict):
        """Walks through the dictionary and generates events.

        Args:
            dictobj: Dictionary to walk through.
        """
        for key, value in dictobj.items():
            if isinstance(value, dict):
                self._eventhandler.open_section(key, 0)
                self.walk(value)
                self._eventhandler.close_section(key)
            else:
                self._eventhandler.add_value(key, to_text(value), 0)


def flatten(dictobj: dict, prefix: str = "") -> List[Tuple[str, Any]]:
    """Dotted key, value pairs of a nested dictionary in sorted key order.

    Examples:
        >>> flatten({"seed": 1, "optimizer": {"momentum": 0.9, "batch_size": 64}})
        [('optimizer.batch_size', 64), ('optimizer.momentum', 0.9), ('seed', 1)]
    """
    return sorted(_flat_items(dictobj, prefix))


def _flat_items(dictobj: dict, prefix: str) -> Iterator[Tuple[str, Any]]:
    for key, value in dictobj.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            yield from _flat_items(value, dotted + ".")
        else:
            yield dotted, value


def unflatten(items: Dict[str, Any]) -> dict:
    """Nested dictionary from dotted keys (inverse of :func:`flatten`)."""
    result: dict = {}
    for dotted, value in items.items():
        block = result
        *sections, key = dotted.split(".")
        for section in sections:
            block = block.setdefault(section, {})
            if not isinstance(block, dict):
                raise ConfigError(f"Key '{dotted}' conflicts with the value of '{section}'")
        block[key] = value
    return result


def canonical_text(dictobj: dict) -> str:
    """One 'dotted.key = value' line per entry of the flattened dictionary."""
    return "".join(f"{key} = {to_text(value)}\n" for key, value in flatten(dictobj))


def to_text(obj) -> str:
    """Config representation of a scalar or a list of scalars."""
    if isinstance(obj, (list, tuple)):
        return " ".join(_item_to_text(item) for item in obj)
    return _item_to_text(obj)


def _item_to_text(item) -> str:
    if isinstance(item, bool):
        return "yes" if item else "no"
    if isinstance(item, (int, float)):
        return repr(item)
    if isinstance(item, str):
        return _str_to_text(item)
    raise TypeError(f"Data type {type(item)} can not be converted to config text")


def _str_to_text(string: str) -> str:
    needs_quote = not string or any(char in string for char in _SPECIAL_CHARS)\
        or text_to_data(string) != string
    if not needs_quote:
        return string
    if '"' not in string:
        return f'"{string}"'
    if "'" not in string:
        return f"'{string}'"
    raise ValueError(f"String '{string}' can not be quoted correctly")
