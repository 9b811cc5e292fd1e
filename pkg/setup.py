# -*- coding: utf-8 -*-

from setuptools import setup, find_packages



setup(
      name='sizeprior',
      version='0.1.0',
      packages=find_packages(
          include=["sizeprior*"]
          ),
      install_requires=['numpy>=1.22', 'scipy>=1.8', 'click>=8.0', 'pyyaml>=6.0'],
      entry_points={'console_scripts': ['sizeprior=sizeprior.cli:main']},
      zip_safe=False,
      )
