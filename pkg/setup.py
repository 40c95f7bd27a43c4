from pathlib import Path
from setuptools import setup, find_packages

README = (Path(__file__).parent / "README.md")
long_desc = README.read_text(encoding="utf-8") if README.exists() else "blocksel – block selection for transfer learning"

setup(
    name="blocksel",
    version="0.1.0",
    description="blocksel – GA block selection and OTDD block importance for CNN transfer learning",
    long_description=long_desc,
    long_description_content_type="text/markdown",
    author="blocksel",
    python_requires=">=3.10",
    packages=find_packages(include=["blocksel", "blocksel.*"]),
    include_package_data=True,
    install_requires=[
        "pydantic>=2,<3",
        "PyYAML>=6,<7",
        "tqdm>=4,<5",
        "rich>=13,<14",
        "orjson>=3,<4",
        "numpy>=1.24,<3",
        "scipy>=1.10,<2",
        "torch>=2.1,<3",
        "torchvision>=0.16,<1",
        "POT>=0.9,<1",
        "matplotlib>=3.7,<4",
        "Pillow>=10,<12",
    ],
    extras_require={
        "test": ["pytest>=8,<9"],
    },
    entry_points={
        "console_scripts": [
            "blocksel=blocksel.cli:main",
        ],
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
)
