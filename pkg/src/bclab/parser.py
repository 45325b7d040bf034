#--------------------------------------------------------------------------------------------------#
#  bclab: a desk-scale laboratory for backdoor injection by adversarial weight perturbation        #
#  Licensed under the BSD 2-clause license.                                                        #
#--------------------------------------------------------------------------------------------------#
#
"""
Contains the event-generating parser of the lab configuration language.
"""
import os
import re
from typing import List, Optional, TextIO, Tuple, Union

from bclab.common import ConfigError
from bclab.eventhandler import ConfigEventHandler, ConfigEventPrinter


SYNTAX_ERROR = 1
UNCLOSED_SECTION_ERROR = 2
UNCLOSED_QUOTATION_ERROR = 3
ORPHAN_TEXT_ERROR = 4
INCLUDE_ERROR = 5

_SPECIALS = "{}=;#<\"'"

_NAME_PATTERN = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)*$")


class ConfigParser:
    """Event based parser for the lab configuration language.

    Arguments:
        eventhandler: Object which should handle the events triggered during
            parsing. When not specified, ConfigEventPrinter() is used.

    Examples:
        >>> from io import StringIO
        >>> from bclab.cfgdict import ConfigDictBuilder
        >>> builder = ConfigDictBuilder()
        >>> parser = ConfigParser(eventhandler=builder)
        >>> parser.parse(StringIO(\"\"\"
        ... seed = 3
        ... optimizer {
        ...     learning_rate = 0.01   # tuning step size
        ...     early_stop = 5
        ... }
        ... \"\"\"))
        >>> builder.cfgdict
        {'seed': 3, 'optimizer': {'learning_rate': 0.01, 'early_stop': 5}}
    """

    def __init__(self, eventhandler: Optional[ConfigEventHandler] = None):
        self._eventhandler = ConfigEventPrinter() if eventhandler is None else eventhandler
        self._fname = ""           # name of file being processed
        self._opened: List[Tuple[Tuple[str, ...], int]] = []   # opened section paths
        self._buffer = []          # text collected since the last special character
        self._key = None           # key waiting for its value after an equal sign
        self._quote = ""           # quote character if inside a quotation
        self._quoteline = 0        # line where the current quotation started
        self._currline = 0         # nr. of current line in file


    def parse(self, fobj: Union[TextIO, str]):
        """Parses the provided file-like object.

        Args:
            fobj: File like object or name of a file containing the data.
        """
        isfilename = isinstance(fobj, str)
        if isfilename:
            self._fname = fobj
            try:
                fp = open(fobj, "r")
            except OSError as exc:
                raise ConfigError(f"Can not open config file '{fobj}': {exc.strerror}") from exc
        else:
            fp = fobj
            self._fname = getattr(fobj, "name", "")
        try:
            for line in fp.readlines():
                self._parse(line)
                self._currline += 1
        finally:
            if isfilename:
                fp.close()

        line0 = self._opened[-1][1] if self._opened else 0
        if self._opened:
            self._error(UNCLOSED_SECTION_ERROR, (line0, line0))
        elif "".join(self._buffer).strip():
            self._error(ORPHAN_TEXT_ERROR, (line0, self._currline))


    def _parse(self, line):
        """Parses a given line."""

        while True:
            if self._quote:
                closing = line.find(self._quote)
                if closing < 0:
                    self._error(UNCLOSED_QUOTATION_ERROR, (self._quoteline, self._currline))
                self._buffer.append(line[:closing + 1])
                self._quote = ""
                line = line[closing + 1:]
                continue

            sign, before, after = _splitbycharset(line, _SPECIALS)

            # End of line or comment
            if not sign or sign == "#":
                self._buffer.append(before)
                if self._key is not None:
                    self._assign()
                break

            if sign in ("'", '"'):
                self._buffer.append(before + sign)
                self._quote = sign
                self._quoteline = self._currline

            elif sign == "=":
                if self._key is not None:
                    self._error(SYNTAX_ERROR, (self._currline, self._currline))
                self._key = self._name(before)

            elif sign == ";":
                self._buffer.append(before)
                if self._key is not None:
                    self._assign()
                elif "".join(self._buffer).strip():
                    self._error(SYNTAX_ERROR, (self._currline, self._currline))

            elif sign == "{":
                if self._key is not None:
                    self._error(SYNTAX_ERROR, (self._currline, self._currline))
                path = self._name(before)
                for part in path:
                    self._eventhandler.open_section(part, self._currline)
                self._opened.append((path, self._currline))

            elif sign == "}":
                self._buffer.append(before)
                if self._key is not None:
                    self._assign()
                elif "".join(self._buffer).strip():
                    self._error(ORPHAN_TEXT_ERROR, (self._currline, self._currline))
                self._buffer = []
                if not self._opened:
                    self._error(SYNTAX_ERROR, (self._currline, self._currline))
                path, _ = self._opened.pop()
                for part in reversed(path):
                    self._eventhandler.close_section(part)

            # Include of an other config file
            elif sign == "<":
                if self._key is not None or not after.startswith("<+"):
                    self._buffer.append(before + sign)
                else:
                    if ("".join(self._buffer) + before).strip():
                        self._error(SYNTAX_ERROR, (self._currline, self._currline))
                    self._buffer = []
                    self._include(after[2:].split("#", 1)[0])
                    break

            line = after


    def _name(self, before: str) -> Tuple[str, ...]:
        name = ("".join(self._buffer) + before).strip()
        self._buffer = []
        if not _NAME_PATTERN.match(name):
            self._error(SYNTAX_ERROR, (self._currline, self._currline))
        return tuple(name.split("."))


    def _assign(self):
        text = "".join(self._buffer).strip()
        self._buffer = []
        if not text:
            self._error(SYNTAX_ERROR, (self._currline, self._currline))
        path, self._key = self._key, None
        for part in path[:-1]:
            self._eventhandler.open_section(part, self._currline)
        self._eventhandler.add_value(path[-1], text, self._currline)
        for part in reversed(path[:-1]):
            self._eventhandler.close_section(part)


    def _include(self, fname: str):
        fname = unquote(fname.strip())
        if not fname:
            self._error(INCLUDE_ERROR, (self._currline, self._currline))
        if not os.path.isabs(fname) and self._fname:
            fname = os.path.join(os.path.dirname(self._fname), fname)
        if not os.path.isfile(fname):
            self._error(INCLUDE_ERROR, (self._currline, self._currline))
        parser = ConfigParser(eventhandler=self._eventhandler)
        parser.parse(fname)


    def _error(self, errorcode, lines):
        error_msg = (
            "Parsing error ({}) between lines {} - {} in file '{}'.".format(
                errorcode, lines[0] + 1, lines[1] + 1, self._fname))
        raise ConfigError(error_msg)


def unquote(txt: str) -> str:
    """Removes a pair of matching quotes around a string, if present."""
    if len(txt) >= 2 and txt[0] in "\"'" and txt[-1] == txt[0]:
        return txt[1:-1]
    return txt


def _splitbycharset(txt, charset):
    """Splits a string at the first occurrence of a character in a set.

    Returns:
        Tuple (char, before, after), char being empty if nothing was found.
    """
    for firstpos, char in enumerate(txt):
        if char in charset:
            return txt[firstpos], txt[:firstpos], txt[firstpos + 1:]
    return '', txt, ''
