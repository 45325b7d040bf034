#--------------------------------------------------------------------------------------------------#
#  bclab: a desk-scale laboratory for backdoor injection by adversarial weight perturbation        #
#  Licensed under the BSD 2-clause license.                                                        #
#--------------------------------------------------------------------------------------------------#
#
"""
Contains the event handler base class of the lab configuration language.
"""

from abc import ABC, abstractmethod


class ConfigEventHandler(ABC):
    """Abstract base class for handling configuration events."""

    @abstractmethod
    def open_section(self, name: str, line: int):
        """Opens a section.

        Args:
            name: Name of the section (a single component, never dotted).
            line: Zero-based line where the section was opened.
        """

    @abstractmethod
    def close_section(self, name: str):
        """Closes a section.

        Args:
            name: Name of the section which had been closed.
        """

    @abstractmethod
    def add_value(self, name: str, text: str, line: int):
        """Assigns a value to a key of the current section.

        Args:
            name: Name of the key (a single component, never dotted).
            text: Raw text of the value, quotes included.
            line: Zero-based line of the assignment.
        """


class ConfigEventPrinter(ConfigEventHandler):
    """Minimal demonstration class for event handlers.

    This specific implementation prints the events. Subclasses should override
    the public methods to customize the behavior.
    """

    def __init__(self):
        self._indentlevel = 0
        self._indentstr = "  "


    def open_section(self, name: str, line: int):
        print(f"{self._indentlevel * self._indentstr}OPENING SECTION: {name}")
        self._indentlevel += 1


    def close_section(self, name: str):
        self._indentlevel -= 1
        print(f"{self._indentlevel * self._indentstr}CLOSING SECTION: {name}")


    def add_value(self, name: str, text: str, line: int):
        print(f"{self._indentlevel * self._indentstr}VALUE: {name} = {text}")
