# Sphinx configuration for the wavedistill documentation.
# https://www.sphinx-doc.org/en/master/usage/configuration.html

import os
import sys

import sphinx_rtd_theme  # noqa: F401 'sphinx_rtd_theme' imported but unused

# the package is imported from the source tree for its metadata and for autodoc
docs_dir = os.path.dirname(__file__)
sys.path.insert(1, os.path.abspath(os.path.join(docs_dir, '..')))

import wavedistill  # noqa: E402 module level import not at top of file

# -- Project information -----------------------------------------------------

project = wavedistill.__project_name__
author = wavedistill.__author__
copyright = wavedistill.__copyright__.lstrip('Copyright ')
version = wavedistill.__version__
release = version

# -- General configuration ---------------------------------------------------

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.autosummary',
    'sphinx.ext.mathjax',
    'sphinx.ext.todo',
    'sphinx_rtd_theme',
]
exclude_patterns = ['_build']
pygments_style = 'sphinx'
needs_sphinx = '3.4'
language = 'en'

# -- Options for HTML output -------------------------------------------------

html_theme = 'sphinx_rtd_theme'
html_last_updated_fmt = ''
html_copy_source = False
html_theme_options = {'navigation_depth': 3}

# -- Options for the Python domain -------------------------------------------

python_use_unqualified_type_names = True

# -- sphinx.ext.autodoc and autosummary --------------------------------------

autoclass_content = 'both'
autodoc_member_order = 'bysource'
autodoc_default_options = {
    'members': True,
    'undoc-members': True,
    'show-inheritance': True,
}
# tensors are plain ndarrays; keep the aliases readable in signatures
autodoc_type_aliases = {'Tensor': 'wavedistill.tensor.Tensor', 'Params': 'wavedistill.detector.Params'}
autodoc_typehints = 'description'
autosummary_generate = True

# -- sphinx.ext.todo ---------------------------------------------------------

todo_include_todos = True
