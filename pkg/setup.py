import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "rpavg._core",
        ["src/rpavg/_core.pyx"],
        include_dirs=[np.get_include()],
        # no -ffast-math: the compensated sums rely on strict IEEE ordering
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={"language_level": "3"},
    )
)
