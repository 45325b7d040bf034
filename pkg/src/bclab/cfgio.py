#--------------------------------------------------------------------------------------------------#
#  bclab: a desk-scale laboratory for backdoor injection by adversarial weight perturbation        #
#  Licensed under the BSD 2-clause license.                                                        #
#--------------------------------------------------------------------------------------------------#
#
"""
Reading and writing configuration dictionaries in the lab configuration language
"""
import io
from typing import TextIO, Union
from bclab.cfgdict import ConfigDictBuilder, ConfigDictWalker
from bclab.formatter import ConfigFormatter
from bclab.parser import ConfigParser


def load(cfgfile: Union[TextIO, str]) -> dict:
    """Loads a configuration file into a Python dictionary.

    Included files (``<<+ "base.lcf"``) are looked up relative to the
    directory of the including file.

    Args:
        cfgfile: Name of file or file like object to read the data from.

    Returns:
        Nested dictionary representing the configuration.

    Raises:
        ConfigError: if the file can not be opened or parsed.
    """
    dictbuilder = ConfigDictBuilder()
    parser = ConfigParser(eventhandler=dictbuilder)
    parser.parse(cfgfile)
    return dictbuilder.cfgdict


def load_string(cfgstr: str) -> dict:
    """Loads a string with configuration text into a Python dictionary.

    Examples:
        >>> cfgstr = \"\"\"
        ... seed = 1
        ... objective {
        ...   kind = anchor
        ...   lambda = 0.5
        ... }
        ... objective.lambda = 0.2   # later assignments win
        ... \"\"\"
        >>> load_string(cfgstr)
        {'seed': 1, 'objective': {'kind': 'anchor', 'lambda': 0.2}}
    """
    return load(io.StringIO(cfgstr))


def dump(data: dict, cfgfile: Union[TextIO, str]):
    """Dumps a dictionary to a file in the lab configuration language.

    Args:
        data: Nested dictionary with scalar, list or dictionary values.
        cfgfile: Name of file or file like object to write the result to.

    Raises:
        TypeError: if object is not a dictionary instance.
    """
    if not isinstance(data, dict):
        msg = "Invalid object type"
        raise TypeError(msg)
    if isinstance(cfgfile, str):
        with open(cfgfile, "w") as cfgdescr:
            ConfigDictWalker(ConfigFormatter(cfgdescr)).walk(data)
    else:
        ConfigDictWalker(ConfigFormatter(cfgfile)).walk(data)


def dump_string(data: dict) -> str:
    """Serializes a dictionary to a string in the lab configuration language.

    Examples:
        >>> dump_string({"seed": 1, "model": {"name": "mlp", "hidden": [32, 16]}})
        'seed = 1\\nmodel {\\n  name = mlp\\n  hidden = 32 16\\n}\\n'
    """
    result = io.StringIO()
    dump(data, result)
    return result.getvalue()
