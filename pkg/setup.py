from setuptools import setup, find_packages

setup(
    name="fedretina",
    version="0.1.0",
    packages=find_packages(where="src"),
    package_dir={"": "src"},
    install_requires=[
        "numpy>=1.21",
        "scipy>=1.7",
        "scikit-learn>=1.0",
    ],
    extras_require={"test": ["pytest>=7.0"]},
    entry_points={"console_scripts": ["fedretina=fedretina.cli:main"]},
    python_requires=">=3.8",
    description="Federated learning simulator for diabetic retinopathy grading across institutions",
)
