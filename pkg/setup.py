"""Setuptools installation script for x0transfer package."""

from setuptools import setup

setup()
