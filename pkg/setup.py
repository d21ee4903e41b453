import os

import numpy as np

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # no Cython: install the pure-Python fallback only
    cythonize = None

# -ffast-math is deliberately absent: the kernels rely on isfinite() and on
# libm results matching the scalar reference evaluator bit for bit.
extensions = [
    Extension(
        "btsgp._ckernels",
        ["src/btsgp/_ckernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
]

if cythonize is None or os.environ.get("BTSGP_NO_EXT"):
    setup()
else:
    setup(
        ext_modules=cythonize(
            extensions,
            compiler_directives={"language_level": "3"},
        )
    )
