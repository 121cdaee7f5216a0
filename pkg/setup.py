import numpy as np
from setuptools import Extension, setup

# The compiled kernels are an optional speedup: if Cython or a C compiler is
# missing the install falls back to the pure-numpy implementations.
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "dndfilter._kernels",
                ["src/dndfilter/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
