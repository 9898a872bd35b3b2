from setuptools import find_packages, setup  # type: ignore

# Do not forget to update and sync the fields in shrinknet/__init__.py!
#
# The source distribution runs setup.py while installing the package, so the
# version cannot be imported from shrinknet/__init__.py here.
setup(
    name="shrinknet",
    version="0.1.0",  # Update this in shrinknet/__init__.py too
    author="shrinknet contributors",
    packages=find_packages(exclude=["examples", "examples.*"]),
    scripts=[],
    entry_points={
        "console_scripts": [
            "shrinknet=shrinknet.main:main",
        ],
    },
    license="MIT",
    description=(
        "Deep residual shrinkage networks for multichannel sEMG gesture "
        "classification, with a small numpy autodiff core."
    ),
    long_description=open("README.md", encoding="utf-8").read(),
    long_description_content_type="text/markdown",
    install_requires=[
        "numpy>=1.21",
        "matplotlib>=3.5",  # For the SVG training curves
        "typing_extensions>=3.10.0",
    ],
    extras_require={
        "dev": [
            "autodocsumm>=0.2.2,<1",
            "black==22.3.0",
            "hypothesis>=6.0.0",
            "isort==5.11.5",
            "mypy==0.990",
            "pre-commit~=2.20",
            "pytest",
            "pytest-xdist",
            "sphinx>=3.4.3",
            "sphinx-rtd-theme>=0.5.1",
            "wheel",
        ]
    },
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    python_requires=">=3.8",
)
