"""Build the optional compiled kernels.

The package works without them: when Cython or a C compiler is missing the
extension is skipped and the numpy fallback is used at import time.
"""

import os

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing or failed
            self.warn(f"compiled kernels not built ({exc}); using the numpy fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            self.warn(f"compiled kernels not built ({exc}); using the numpy fallback")


def extensions():
    if os.environ.get("BRIDGESIM_NO_EXT"):
        return []
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        return []
    from setuptools import Extension

    random_lib = os.path.join(os.path.dirname(numpy.__file__), "random", "lib")
    ext = Extension(
        "bridgesim._ckernels",
        ["src/bridgesim/_ckernels.pyx"],
        include_dirs=[numpy.get_include()],
        library_dirs=[random_lib],
        libraries=["npyrandom", "m"],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], compiler_directives={"language_level": 3}, quiet=True)


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
