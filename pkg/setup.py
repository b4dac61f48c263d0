"""Optional Cython build of the hot kernels; the package works without it."""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("RESLOC_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        common = dict(
            include_dirs=[np.get_include()],
            extra_compile_args=["-O3"],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        )
        ext_modules = cythonize(
            [
                Extension("resloc._ext._pbkernel", ["src/resloc/_ext/_pbkernel.pyx"], **common),
                Extension("resloc._ext._filterkernel", ["src/resloc/_ext/_filterkernel.pyx"], **common),
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
