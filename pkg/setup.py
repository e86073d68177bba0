import numpy as np
from setuptools import Extension, setup

# The compiled attention kernel is optional: stream4d.kernels falls back to a
# pure-numpy implementation when the extension is absent.
try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "stream4d._attnkernel",
                ["src/stream4d/_attnkernel.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
