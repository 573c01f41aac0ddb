import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()

setuptools.setup(
    name="rqe_calib",
    version="0.1.0",
    description="Lidar to egomotion Sim(3) calibration by point cloud entropy minimization.",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(exclude=["tests", "examples", "examples.*"]),
    entry_points={
        'console_scripts': [
            'rqe_calib=rqe_calib.cli:main',
        ],
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    install_requires=[
        "numpy>=1.22",
        "pandas>=1.5",
        "scipy>=1.9",
    ],
    extras_require={
        "test": ["pytest>=7"],
    },
    python_requires='>=3.9',
)
