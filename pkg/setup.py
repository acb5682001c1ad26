"""Setup file for the ctpretrain application"""

from setuptools import find_packages, setup


setup(
    name="ctpretrain",
    packages=find_packages(exclude=("tests", "tests.*")),
    install_requires=[
        "addict",
        "einops",
        "matplotlib",
        "nibabel",
        "numpy",
        "pandas",
        "pyyaml",
        "scipy",
        "timm",
        "torch",
    ],
    extras_require={
        "dev": [
            "pre-commit",
            "pylint",
            "pytest",
            "pytest-cov",
            "pytest-mock",
            "pytest-pylint",
            "black",
        ],
    },
    python_requires=">=3.9",
    package_dir={"ctpretrain": "ctpretrain"},
    entry_points={
        "console_scripts": [
            "ctpretrain = ctpretrain.cli:main",
        ],
    },
)
