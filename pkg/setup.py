from setuptools import setup

setup(
    name='vipamin',
    version='0.1.0',
    py_modules=['vipamin', 'vipamin_store'],
    packages=['vipamin_app', ],
    package_data={'vipamin_app': ['schemas/*.json']},
    scripts=['vipamin.py', 'vipamin_store.py'],
    description="Prompt initialization, tuning and diagnostics for visual prompt tuning on a toy ViT.",
    platforms=['POSIX'],
    test_suite='tests',
    install_requires=['numpy>=1.22',
                      'scipy>=1.8',
                      'pyyaml>=5.4',
                      'pydantic>=2.0'],
    tests_require=['mock>=4.0'],
    classifiers=[
        'Intended Audience :: Science/Research',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
        'Programming Language :: Python :: 3',
        'Development Status :: 3 - Alpha',
    ],
)
