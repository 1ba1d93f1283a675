from setuptools import find_packages, setup

from bmdgan.version import BMDGAN_VERSION

long_description = ""
with open("README.md") as ifp:
    long_description = ifp.read()

setup(
    name="bmdgan",
    version=BMDGAN_VERSION,
    description="bmdgan: bone decomposition of hip radiographs and BMD estimation",
    long_description=long_description,
    long_description_content_type="text/markdown",
    platforms="all",
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Natural Language :: English",
        "Programming Language :: Python",
        "License :: OSI Approved :: Apache Software License",
        "Topic :: Scientific/Engineering :: Medical Science Apps.",
    ],
    python_requires=">=3.8",
    packages=find_packages(exclude=["tests", "tests.*"]),
    zip_safe=False,
    install_requires=[
        "matplotlib",
        "numpy",
        "pydantic>=1.8,<2",
        "scipy",
        "toml",
        "torch>=1.10",
    ],
    extras_require={
        "dev": [
            "black",
            "isort",
            "mypy",
            "pytest",
            "types-toml",
        ],
        "distribute": ["setuptools", "twine", "wheel"],
    },
    entry_points={
        "console_scripts": [
            "bmdgan=bmdgan.cli:main",
        ]
    },
)
