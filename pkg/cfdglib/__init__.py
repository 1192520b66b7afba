from . import lab_def
from . import numkernel
from . import envsuite
from . import rlcore
from . import diagnostics
from . import diffusion
from . import augmentor


def get_cfdglib_version():
    return "0.3.0"
