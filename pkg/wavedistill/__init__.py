"""Distil a small object detector from a larger one through wavelet-decoupled feature maps: explicit spectral
feature imitation weighted by Density-Independent Scale Weights, and implicit distillation through frozen knowledge
amplifier heads, all with exact hand-written gradients. Runs end-to-end on a toy detector over synthetic scenes of
dense small objects.
"""

# The docstring above (__doc__) and the variables below are used in the program and for builds, including in building
# documentation with Sphinx.

__min_python_version__ = (3, 8)  # minimum version of Python required to run

__project_name__ = __package__
# Release numbering largely follows Semantic Versioning https://semver.org/spec/v2.0.0.html#semantic-versioning-200
__version__ = '0.4.0'
__description__ = 'Dual-stream wavelet spectral distillation for dense small-object detectors'
__author__ = 'Mike Borsetti <mike@borsetti.com>'
__copyright__ = 'Copyright 2020- Mike Borsetti'
__license__ = 'MIT'
__url__ = f'https://pypi.org/project/{__project_name__}/'
__docs_url__ = f'https://{__project_name__}.readthedocs.io/en/stable/'

from typing import Dict, Union


def init_data() -> Dict[str, Union[str, tuple]]:
    """Returns dict of globals, including __version__ (used in testing)

    :return: dict of globals()
    """
    return {k: v for k, v in globals().items()}
