"""Build the optional compiled scan kernel; the package works without it."""
import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("LIGHTDOT_NO_EXT", "") in ("", "0"):
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [Extension("lightdot._scan", ["src/lightdot/_scan.pyx"], include_dirs=[np.get_include()],
                       extra_compile_args=["-O3"])],
            compiler_directives={"embedsignature": True},
        )

setup(ext_modules=ext_modules)
