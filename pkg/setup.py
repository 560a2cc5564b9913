"""Build script for the optional compiled kernel extension.

The package works without the extension (pure-numpy fallbacks are selected
at import time); building it just makes conv gather/scatter and resize loops
faster.  `pip install -e . --no-build-isolation` compiles it in place.
"""
import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

extensions = [
    Extension(
        "fovgen._ckernels",
        ["src/fovgen/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"})
    if cythonize
    else [],
)
