import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("QCMAP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [Extension("qcmap._ckernels", ["src/qcmap/_ckernels.pyx"],
                   include_dirs=[np.get_include()],
                   extra_compile_args=["-O3"])],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
