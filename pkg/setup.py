import os
import sys

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

# libmvec vectorizes exp() in the kernel loop only under -ffast-math; the
# kernel clamps its pre-activations so finite-math assumptions hold.
# Alignment peeling is disabled so each score's bits depend only on its inputs.
COMPILE_ARGS = ["-O3", "-ffast-math", "--param=vect-max-peeling-for-alignment=0"]
LIBRARIES = ["m", "mvec"] if sys.platform.startswith("linux") else ["m"]
if not os.environ.get("VRCOLOC_PORTABLE"):
    COMPILE_ARGS.append("-march=native")

ext_modules = []
if cythonize is not None and not os.environ.get("VRCOLOC_NO_EXT"):
    ext_modules = cythonize(
        [Extension("vrcoloc._ckernels", ["src/vrcoloc/_ckernels.pyx"],
                   include_dirs=[np.get_include()],
                   define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                   extra_compile_args=COMPILE_ARGS,
                   libraries=LIBRARIES)],
        compiler_directives={"language_level": 3},
    )

setup(ext_modules=ext_modules)
