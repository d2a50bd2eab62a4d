import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; the NumPy kernels are used
    ext_modules = []
else:
    ext_modules = cythonize(
        [Extension("flowrecon._kernels._ckernels",
                   ["src/flowrecon/_kernels/_ckernels.pyx"],
                   include_dirs=[np.get_include()],
                   extra_compile_args=["-O3"])],
        language_level=3,
    )

setup(ext_modules=ext_modules)
