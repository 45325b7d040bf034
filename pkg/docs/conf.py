# Sphinx configuration of the bclab documentation.

import os
import re
import sys
import doctest

_SRC = os.path.abspath(os.path.join(os.path.dirname(__file__), '..', 'src'))
sys.path.insert(0, _SRC)


def _version():
    with open(os.path.join(_SRC, 'bclab', '__init__.py'), 'r') as fp:
        match = re.search(r"^__version__ = '([^']*)'", fp.read(), re.MULTILINE)
    return match.group(1) if match else 'unknown'


# -- Project ----------------------------------------------------------------

project = 'bclab'
copyright = '2026, bclab developers'
author = 'bclab developers'
release = _version()
version = release


# -- Build ------------------------------------------------------------------

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.doctest',
    'sphinx.ext.napoleon',
    'sphinx.ext.intersphinx',
]

# Docstrings use the Google style throughout
napoleon_google_docstring = True
napoleon_numpy_docstring = False

autodoc_member_order = 'bysource'
autodoc_typehints = 'description'

intersphinx_mapping = {
    'python': ('https://docs.python.org/3', None),
    'torch': ('https://pytorch.org/docs/stable', None),
    'numpy': ('https://numpy.org/doc/stable', None),
}

doctest_default_flags = doctest.NORMALIZE_WHITESPACE | doctest.ELLIPSIS
doctest_global_setup = '''
import torch
from bclab import ParamVector, grad, load_string, dump_string
'''

exclude_patterns = ['_build']


# -- HTML -------------------------------------------------------------------

html_theme = 'sphinx_rtd_theme'
html_title = f'bclab {release}'
