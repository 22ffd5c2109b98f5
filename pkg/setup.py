#!/usr/bin/env python
# encoding: utf-8

from setuptools import setup

with open("requirements.txt") as f:
    install_requires = [line.strip() for line in f if line.strip() and not line.startswith("#")]

setup(
    name="fedgr_tools",
    version="0.1",
    description="Federated learning with sniffing-then-refining label correction under client label noise",
    author="...",
    packages=["fedgr_tools"],
    python_requires=">=3.9",
    install_requires=install_requires,
    entry_points={"console_scripts": ["fedgr = fedgr_tools.cli:main"]},
)
