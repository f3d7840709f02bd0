from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # fall back to the pure numpy kernels
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "ctxvote._kernels",
                ["src/ctxvote/_kernels.pyx"],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
