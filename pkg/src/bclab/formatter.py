#--------------------------------------------------------------------------------------------------#
#  bclab: a desk-scale laboratory for backdoor injection by adversarial weight perturbation        #
#  Licensed under the BSD 2-clause license.                                                        #
#--------------------------------------------------------------------------------------------------#
#
"""
Provides an event based formatter writing configuration text
"""

from typing import List, TextIO
from bclab.eventhandler import ConfigEventHandler


_INDENT_STR = "  "


class ConfigFormatter(ConfigEventHandler):
    """Implements an event driven configuration formatter.

    Args:
        fobj: File like object to write the formatted output to.
    """

    def __init__(self, fobj: TextIO):
        super().__init__()
        self._fobj = fobj
        self._indent_level = 0
        # Number of entries written into each open section
        self._nr_children: List[int] = [0]


    def open_section(self, name: str, line: int):
        self._open_parent()
        self._fobj.write(f"{self._indent_level * _INDENT_STR}{name}")
        self._nr_children[-1] += 1
        self._nr_children.append(0)


    def close_section(self, name: str):
        nr_children = self._nr_children.pop(-1)
        if not nr_children:
            self._fobj.write(" {}\n")
        else:
            self._indent_level -= 1
            self._fobj.write(f"{self._indent_level * _INDENT_STR}}}\n")


    def add_value(self, name: str, text: str, line: int):
        self._open_parent()
        self._fobj.write(f"{self._indent_level * _INDENT_STR}{name} = {text}\n")
        self._nr_children[-1] += 1


    def _open_parent(self):
        # The brace of a section is only written once its first entry arrives
        if len(self._nr_children) > 1 and not self._nr_children[-1]:
            self._fobj.write(" {\n")
            self._indent_level += 1
