"""
AMOS 安装脚本

Usage:
    pip install -e .
    amos --help
"""

from setuptools import setup, find_packages

setup(
    name='amos-desk',
    version='0.1.0',
    description='Adversarial multi-head ELECTRA-style pretraining on a numpy autodiff core',
    packages=find_packages(include=['amos', 'amos.*']),
    py_modules=['config', 'error_logger', 'main'],
    python_requires='>=3.9',
    install_requires=[
        'numpy>=1.24',
        'Pillow>=10.0.0,<11.0.0',
        'tqdm>=4.66',
    ],
    extras_require={
        'test': ['pytest>=7.4'],
    },
    entry_points={
        'console_scripts': [
            'amos=main:main',
        ],
    },
)
