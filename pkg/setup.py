import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    # optional=True: a failed compile falls back to the numpy kernels
    ext_modules = cythonize(
        [
            Extension(
                "flowct.kernels._core",
                ["src/flowct/kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                # -O3/-march=native so the inner conv loops vectorize (this is
                # a source build, the binary never leaves the machine); no
                # -ffast-math, the kernels must keep IEEE semantics (NaN
                # propagation, fixed summation order)
                extra_compile_args=["-O3", "-march=native", "-funroll-loops"],
                optional=True,
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
