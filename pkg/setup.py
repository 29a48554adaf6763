"""Build script for the optional compiled Hamming-scan kernel.

The package works without the extension (a numpy fallback is selected at
import time); building it just makes large key-database scans faster.
"""

import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "diffmark._hamming_cy",
        ["src/diffmark/_hamming_cy.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3"],
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
