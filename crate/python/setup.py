"""Builds the Rust extension with cargo and drops the cdylib into the package.

setuptools-rust is deliberately not required: the extension crate lives in the
surrounding cargo workspace, so all this has to do is run `cargo build` with
the extension-module feature and copy the resulting shared library to wherever
setuptools expects the extension artifact.
"""

import os
import shutil
import subprocess
from pathlib import Path

from setuptools import setup
from setuptools.command.build_ext import build_ext
from setuptools.extension import Extension

HERE = Path(__file__).resolve().parent
MANIFEST = HERE.parent / "crates" / "python" / "Cargo.toml"


class CargoExtension(Extension):
    def __init__(self, name):
        super().__init__(name, sources=[])


class CargoBuild(build_ext):
    def run(self):
        # No C sources, so skip the compiler setup entirely.
        for ext in self.extensions:
            self.build_extension(ext)

    def build_extension(self, ext):
        if not MANIFEST.is_file():
            raise RuntimeError(
                f"missing {MANIFEST}; install editable from the python/ "
                "directory of the workspace checkout"
            )
        subprocess.run(
            [
                "cargo",
                "build",
                "--release",
                "--features",
                "extension-module",
                "--manifest-path",
                str(MANIFEST),
            ],
            check=True,
        )
        target = Path(os.environ.get("CARGO_TARGET_DIR", HERE.parent / "target"))
        built = target / "release" / "libresmin_py.so"
        dest = Path(self.get_ext_fullpath(ext.name))
        dest.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(built, dest)


setup(
    ext_modules=[CargoExtension("resmin.resmin_py")],
    cmdclass={"build_ext": CargoBuild},
)
