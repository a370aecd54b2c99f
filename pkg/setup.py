import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "maskfew._kernels",
                ["src/maskfew/_kernels.pyx"],
                extra_compile_args=["-O3"],
                include_dirs=[numpy.get_include()],
            )
        ],
        language_level=3,
    )

# The compiled kernels are optional: maskfew.backend falls back to the
# numpy implementations in kernels_py when the extension is absent.
setup(ext_modules=ext_modules)
