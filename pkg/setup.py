from setuptools import setup, find_packages

with open("requirements.txt") as f:
    requirements = f.read().splitlines()

setup(
    name="psychocal",
    version="0.1.0",
    packages=find_packages(exclude=["examples", "examples.*", "samples", "samples.*"]),
    install_requires=requirements,
    extras_require={"test": ["pytest"]},
    package_data={"psychocal": ["conf/*.yaml", "conf/prompts/*.yaml"]},
    include_package_data=True,
    entry_points={"console_scripts": ["psychocal=psychocal.cli:main"]},
)
