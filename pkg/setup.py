# Builds the optional compiled kd-tree kernel. If Cython or a compiler is
# missing the package still installs and uses the pure-Python search.
import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext = Extension("crossloc.retrieval._kdcore", ["src/crossloc/retrieval/_kdcore.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    optional=True)
    ext_modules = cythonize([ext], language_level=3, quiet=True)

setup(ext_modules=ext_modules)
