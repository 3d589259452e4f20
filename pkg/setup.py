from setuptools import find_packages, setup

setup(
    name="capkit",
    version="1.0.0",
    description="Conformal capacities, the Ferrand pseudometric and Class I/II experiments on simplicial meshes",
    packages=find_packages(exclude=["tests", "tests.*"]),
    python_requires=">=3.10",
    install_requires=[
        "numpy>=1.24.0",
        "scipy>=1.10.0",
        "matplotlib>=3.7.0",
        "pydantic>=2.5,<3",
        "pydantic-settings>=2.1",
        "python-dotenv>=1.0",
    ],
    extras_require={"test": ["pytest>=7.4", "pytest-cov>=4.1"]},
    entry_points={"console_scripts": ["capcli=capkit.main:main"]},
)
