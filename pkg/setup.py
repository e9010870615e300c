import os

from setuptools import setup
from setuptools.extension import Extension

# The compiled kernels are optional: without Cython or a C compiler the
# package still installs and falls back to the pure-Python kernels.
ext_modules = []
if os.environ.get("MEDADAPT_NO_EXT", "") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [Extension("medadapt.glm_prep._ckernels", ["src/medadapt/glm_prep/_ckernels.pyx"])],
            compiler_directives={"language_level": "3", "boundscheck": False, "wraparound": False},
        )

setup(ext_modules=ext_modules)
